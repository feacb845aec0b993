#include "upcycle/teacher.hpp"

#include <cmath>

#include "upcycle/layers.hpp"
#include "upcycle/numerics.hpp"
#include "upcycle/rope.hpp"

namespace upcycle {

namespace {

void rotate_heads(Tensor& x, std::size_t heads, std::size_t head_dim, const RopeTable& rope) {
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t h = 0; h < heads; ++h) rope.apply(x.row(t).subspan(h * head_dim, head_dim), t);
    }
}

}  // namespace

Tensor teacher_attention(const AttentionWeights& w, const TransformerConfig& c, const Tensor& x, Tensor* probs) {
    const std::size_t T = x.rows(), dh = c.head_dim;
    Tensor q = linear(x, w.wq);
    Tensor k = linear(x, w.wk);
    const Tensor v = linear(x, w.wv);
    if (c.qk_norm) {
        q = head_rmsnorm(q, w.q_norm, c.eps);
        k = head_rmsnorm(k, w.k_norm, c.eps);
    }
    const RopeTable rope(dh, c.rope_theta, std::max<std::size_t>(T, 1));
    rotate_heads(q, c.n_q_heads, dh, rope);
    rotate_heads(k, c.n_kv_heads, dh, rope);
    const AttentionShape shape{c.n_q_heads, c.n_kv_heads, dh, dh, 1.0 / std::sqrt(static_cast<double>(dh))};
    return linear(causal_attention(q, k, v, shape, 0, probs), w.wo);
}

ModelTrace teacher_forward(const TeacherCheckpoint& ckpt, const std::vector<TokenId>& tokens, bool want_logits,
                           bool want_trace) {
    const auto& c = ckpt.config;
    ModelTrace trace;
    Tensor x = embed_tokens(ckpt.embed, tokens);
    for (const auto& layer : ckpt.layers) {
        Tensor a = teacher_attention(layer.attn, c, rmsnorm(x, layer.attn_norm, c.eps));
        add_inplace(x, a);
        add_inplace(x, swiglu(layer.mlp, rmsnorm(x, layer.mlp_norm, c.eps)));
        if (want_trace) {
            trace.mixer_outputs.push_back(std::move(a));
            trace.hidden_states.push_back(x);
        }
    }
    trace.final_hidden = rmsnorm(x, ckpt.final_norm, c.eps);
    if (want_logits) trace.logits = linear(trace.final_hidden, ckpt.lm_head);
    return trace;
}

}  // namespace upcycle
