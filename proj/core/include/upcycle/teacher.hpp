#pragma once

#include <optional>
#include <vector>

#include "upcycle/checkpoint.hpp"
#include "upcycle/tensor.hpp"

namespace upcycle {

// Per-layer activations of a pre-norm residual stack.
//   hidden_states[l]  residual stream after block l (T x d)
//   mixer_outputs[l]  token-mixer output of block l before the residual add
//   final_hidden      final RMSNorm applied to the last residual stream
struct ModelTrace {
    std::vector<Tensor> hidden_states;
    std::vector<Tensor> mixer_outputs;
    Tensor final_hidden;
    std::optional<Tensor> logits;  // T x V, only when requested
};

ModelTrace teacher_forward(const TeacherCheckpoint& ckpt, const std::vector<TokenId>& tokens,
                           bool want_logits, bool want_trace);

// Causal GQA self-attention of one layer on already-normalized input.
// probs, when given, receives Hq x T x T attention weights.
Tensor teacher_attention(const AttentionWeights& w, const TransformerConfig& config, const Tensor& x,
                         Tensor* probs = nullptr);

}  // namespace upcycle
