#pragma once

#include <cstdint>
#include <string>

#include "upcycle/checkpoint.hpp"
#include "upcycle/tensor.hpp"

namespace upcycle {

struct GdnConfig {
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_k = 0;
    std::size_t d_v = 0;
    std::size_t conv_width = 4;
    std::size_t chunk = 64;
    double eps = 1e-6;  // q/k L2 normalization and output RMSNorm

    std::size_t head_k() const { return d_k / n_heads; }
    std::size_t head_v() const { return d_v / n_heads; }
    void validate() const;
    friend bool operator==(const GdnConfig&, const GdnConfig&) = default;
};

// d_k = floor(3d/4), d_v = 2 d_k. With n_heads = 0 the head count is the
// largest divisor of d_k not above d_k / 256 (at least 1).
GdnConfig default_gdn_config(std::size_t d_model, std::size_t n_heads = 0);

struct GdnBlockWeights {
    Tensor wq;       // d_k x d
    Tensor wk;       // d_k x d
    Tensor wv;       // d_v x d
    Tensor wg;       // d_v x d, output gate
    Tensor wo;       // d x d_v
    Tensor w_alpha;  // H x d
    Tensor w_beta;   // H x d
    Tensor a_log;    // H
    Tensor dt_bias;  // H
    Tensor conv_q;   // d_k x W
    Tensor conv_k;   // d_k x W
    Tensor conv_v;   // d_v x W
    Tensor o_norm;   // head_v
};

GdnBlockWeights gdn_skeleton(const GdnConfig& cfg);
void for_each_param(GdnBlockWeights& w, const std::string& prefix, const ParamVisitor& fn);
void for_each_param(const GdnBlockWeights& w, const std::string& prefix, const ConstParamVisitor& fn);

struct GdnParamCount {
    std::size_t projections = 0;  // W_Q, W_K, W_V, W_G, W_O
    std::size_t gates = 0;        // W_alpha, W_beta
    std::size_t decay = 0;        // A_log, dt_bias
    std::size_t conv = 0;
    std::size_t norm = 0;
    std::size_t total() const { return projections + gates + decay + conv + norm; }
};

GdnParamCount gdn_param_count(const GdnConfig& cfg);

// Recurrent state carried across calls: per-head S (H x head_k x head_v)
// and the last W-1 pre-convolution rows of q, k and v.
struct GdnState {
    Tensor s;
    Tensor tail_q, tail_k, tail_v;
    std::size_t elements() const { return s.size() + tail_q.size() + tail_k.size() + tail_v.size(); }
};

GdnState gdn_initial_state(const GdnConfig& cfg);

// ---- gated delta-rule kernel ----------------------------------------------
//
// Per head, with a_t = exp(g_t):
//   S~ = a_t S,  v' = v_t - S~^T k_t,  S = S~ + beta_t k_t v'^T,  o_t = S^T q_t
// q, k: T x (H dk); v: T x (H dv); g, beta: T x H; state: H x dk x dv,
// updated in place. Returns o: T x (H dv).
Tensor gated_delta_sequential(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g,
                              const Tensor& beta, Tensor& state);

// Same recurrence in chunks of `chunk` steps using the WY/UT form: inside a
// chunk the rank-one updates are collapsed by forward substitution on the
// strictly lower-triangular matrix beta_i (k_i . k_j) exp(G_i - G_j).
Tensor gated_delta_chunked(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g,
                           const Tensor& beta, Tensor& state, std::size_t chunk);

enum class GdnMode { sequential, chunked };

struct GdnTape {
    Tensor x;
    Tensor pre_q, pre_k, pre_v;     // before the convolution
    Tensor conv_q, conv_k, conv_v;  // after the convolution, before SiLU
    Tensor act_q, act_k;            // after SiLU, before L2 normalization
    Tensor q, k, v;                 // kernel inputs (q includes 1/sqrt(dk))
    Tensor z_alpha, g, beta;
    Tensor states;                  // S before each step: T x H dk dv
    Tensor o, gate_pre;
    GdnState initial;
};

// x: T x d. state, when given, is continued and updated; otherwise the block
// starts from zeros.
Tensor gdn_forward(const GdnBlockWeights& w, const GdnConfig& cfg, const Tensor& x, GdnState* state = nullptr,
                   GdnMode mode = GdnMode::chunked, GdnTape* tape = nullptr);

// Backpropagation through time over a recorded tape. Returns dx and
// accumulates parameter gradients.
Tensor gdn_backward(const GdnBlockWeights& w, const GdnConfig& cfg, const GdnTape& tape, const Tensor& dout,
                    GdnBlockWeights& grads);

// Reuses the teacher attention projections: with KV heads repeated to the
// query head count, W_Q and W_K keep their first d_k rows, W_V its first
// min(d, d_v) rows and W_O its first min(d, d_v) columns. Everything else is
// drawn from `seed`: A_log = log U[1, 16], dt_bias = softplus^-1(U[1e-3,
// 1e-1]), remaining matrices U(+-1/sqrt(fan_in)), output norm gain 1.
GdnBlockWeights init_gdn_from_teacher(const AttentionWeights& teacher, const TransformerConfig& tcfg,
                                      const GdnConfig& cfg, std::uint64_t seed);

}  // namespace upcycle
