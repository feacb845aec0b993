#pragma once

#include <vector>

#include "upcycle/checkpoint.hpp"
#include "upcycle/tensor.hpp"

namespace upcycle {

struct LossConfig {
    std::size_t kl_chunk = 4096;   // C: token rows per projected slice
    std::size_t vocab_tile = 1024;  // B_V: vocabulary tile for the online path
    bool reverse = false;           // false: KL(p_s || p_t); true: KL(p_t || p_s)
};

// peak_elements counts the multi-token (rows x V) transients that are live at
// the same time; per-row scratch of at most V values is not counted.
struct LossValueAndGrad {
    double value = 0;
    Tensor grad;         // w.r.t. student logits, or student hidden states
    Tensor grad_weight;  // w.r.t. the student LM head (hidden/CE paths)
    std::size_t peak_elements = 0;
};

// Mean over tokens of the KL between per-token softmaxes of z_s and z_t.
LossValueAndGrad kl_naive(const Tensor& z_s, const Tensor& z_t, const LossConfig& cfg = {});
// Same value with log-softmaxes built C rows at a time.
LossValueAndGrad kl_chunked(const Tensor& z_s, const Tensor& z_t, const LossConfig& cfg = {});
// Single pass per token over B_V-wide vocabulary tiles with running-max
// rescaled accumulators; gradient in a second tiled pass.
LossValueAndGrad kl_online(const Tensor& z_s, const Tensor& z_t, const LossConfig& cfg = {});
// KL of softmax(h_s W_s^T) against softmax(h_t W_t^T) without building
// either T x V logit matrix. grad is w.r.t. h_s, grad_weight w.r.t. W_s.
LossValueAndGrad kl_hidden(const Tensor& h_s, const Tensor& w_s, const Tensor& h_t, const Tensor& w_t,
                           const LossConfig& cfg = {});
// Mean cross-entropy of softmax(h W^T) against targets, C rows at a time.
LossValueAndGrad fused_linear_ce(const Tensor& h, const Tensor& w, const std::vector<TokenId>& targets,
                                 const LossConfig& cfg = {});

// Intermediate-layer distillation for one sequence:
//   sum_l |h_l^s - h_l^t|_F + |a_l^s - a_l^t|_F
// with gradients w.r.t. the student activations.
struct IldResult {
    double value = 0;
    std::vector<Tensor> d_hidden;
    std::vector<Tensor> d_mixer;
};

IldResult ild_loss(const std::vector<Tensor>& student_hidden, const std::vector<Tensor>& student_mixer,
                   const std::vector<Tensor>& teacher_hidden, const std::vector<Tensor>& teacher_mixer);

}  // namespace upcycle
