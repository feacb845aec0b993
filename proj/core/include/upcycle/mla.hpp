#pragma once

#include <string>

#include "upcycle/checkpoint.hpp"
#include "upcycle/tensor.hpp"

namespace upcycle {

struct MlaConfig {
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t r_q = 0;
    std::size_t r_kv = 0;
    std::size_t d_qk_nope = 0;
    std::size_t d_qk_rope = 0;
    std::size_t d_v = 0;
    bool nope_mode = false;  // skip all rotary rotations
    bool gate = false;       // sigmoid output gate W_gate
    double yarn_factor = 1.0;
    double rope_theta = 10000.0;
    std::size_t original_context = 2048;
    double eps = 1e-5;

    std::size_t qk_dim() const { return d_qk_nope + d_qk_rope; }
    std::size_t max_positions() const;
    // Latent plus shared rotary key: r_kv + d_qk_rope values per token.
    std::size_t cache_elements_per_token() const { return r_kv + d_qk_rope; }
    double attention_scale() const;
    void validate() const;
    friend bool operator==(const MlaConfig&, const MlaConfig&) = default;
};

// Per-head sizes follow the teacher head: d_qk_rope = d_h / 2, the rest is
// nope, d_v = d_h; r_kv fills the per-token cache budget after the rotary
// key and r_q = 2 r_kv (capped at the full query rank).
MlaConfig default_mla_config(const TransformerConfig& teacher, std::size_t cache_per_token);

// Returns cfg extended to factor x original_context positions with the
// YaRN-interpolated rotary frequencies and temperature.
MlaConfig yarn_scale(const MlaConfig& cfg, double factor);

struct MlaBlockWeights {
    Tensor wqa;      // r_q x d
    Tensor q_norm;   // r_q
    Tensor wqb;      // H dn x r_q
    Tensor wqr;      // H dr x r_q
    Tensor wkva;     // r_kv x d
    Tensor kv_norm;  // r_kv
    Tensor wkb;      // H dn x r_kv
    Tensor wvb;      // H dv x r_kv
    Tensor wkr;      // dr x d, shared across heads
    Tensor wo;       // d x H dv
    Tensor wgate;    // d x d, only with gate
};

MlaBlockWeights mla_skeleton(const MlaConfig& cfg);
void for_each_param(MlaBlockWeights& w, const std::string& prefix, const ParamVisitor& fn);
void for_each_param(const MlaBlockWeights& w, const std::string& prefix, const ConstParamVisitor& fn);
std::size_t mla_param_count(const MlaConfig& cfg);

// Decode cache: pre-norm KV latents and rotated shared keys.
struct MlaCache {
    Tensor latents;    // T x r_kv
    Tensor rope_keys;  // T x dr
    std::size_t length() const { return latents.rows(); }
    std::size_t elements() const { return latents.size() + rope_keys.size(); }
};

// Activations kept for the backward pass.
struct MlaTape {
    Tensor x, cq_pre, cq, ckv, kv_n, q, k, v, probs, attn, mixed, gate;
};

// x: T x d at absolute positions position_offset ... Without a cache x is
// a self-contained segment. With a cache the new latents are appended and
// attention covers every cached position; position_offset must then equal
// the cache length.
Tensor mla_forward(const MlaBlockWeights& w, const MlaConfig& cfg, const Tensor& x, MlaCache* cache = nullptr,
                   std::size_t position_offset = 0, MlaTape* tape = nullptr);

// Returns dx and accumulates parameter gradients (full-sequence tapes only).
Tensor mla_backward(const MlaBlockWeights& w, const MlaConfig& cfg, const MlaTape& tape, const Tensor& dout,
                    MlaBlockWeights& grads);

// SVD factorization of a teacher attention layer:
//   W_Q = U S V^T -> W_QA = S V^T (r_q rows), W_QB / W_QR from the first
//   d_qk_nope and last d_qk_rope rows of U per head.
//   [repeat_kv(W_K); repeat_kv(W_V)] = U S V^T -> W_KVA = S V^T, the key
//   rows of U (first d_qk_nope per head) give W_KB, value rows give W_VB.
//   W_KR = last d_qk_rope rows of the head-averaged W_K.
//   W_O keeps the first d_v columns of each head. Norm gains start at 1, W_gate at 0.
MlaBlockWeights init_mla_from_teacher(const AttentionWeights& teacher, const TransformerConfig& tcfg,
                                      const MlaConfig& cfg);

}  // namespace upcycle
