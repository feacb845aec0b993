#pragma once

#include <vector>

#include "upcycle/checkpoint.hpp"
#include "upcycle/tensor.hpp"

namespace upcycle {

// Causal multi-head softmax attention with grouped KV heads.
//   q: Tq x (Hq dqk), k: Tk x (Hkv dqk), v: Tk x (Hkv dv)
// Query row i sits at absolute position q_offset + i and sees keys
// 0 ..= q_offset + i. Query head h reads KV head h / (Hq / Hkv).
struct AttentionShape {
    std::size_t n_q_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t qk_dim = 0;
    std::size_t v_dim = 0;
    double scale = 1.0;
};

// probs, when given, receives Hq x Tq x Tk (masked entries zero).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& s,
                        std::size_t q_offset = 0, Tensor* probs = nullptr);

struct AttentionGrads {
    Tensor dq, dk, dv;
};

AttentionGrads causal_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                         const Tensor& probs, const Tensor& dout, const AttentionShape& s,
                                         std::size_t q_offset = 0);

// down(silu(gate x) * up x)
Tensor swiglu(const MlpWeights& w, const Tensor& x);
// Returns dx; accumulates into grads.
Tensor swiglu_backward(const MlpWeights& w, const Tensor& x, const Tensor& dy, MlpWeights& grads);

Tensor embed_tokens(const Tensor& table, const std::vector<TokenId>& tokens);

// Per-head RMSNorm over contiguous head slices of width gamma.size().
Tensor head_rmsnorm(const Tensor& x, const Tensor& gamma, double eps);

}  // namespace upcycle
