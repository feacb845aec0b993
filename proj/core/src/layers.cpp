#include "upcycle/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "upcycle/numerics.hpp"

namespace upcycle {

namespace {

void check_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& s,
                     std::size_t q_offset) {
    if (s.n_kv_heads == 0 || s.n_q_heads % s.n_kv_heads != 0) {
        throw std::invalid_argument("attention: query heads must be a multiple of kv heads");
    }
    if (q.cols() != s.n_q_heads * s.qk_dim || k.cols() != s.n_kv_heads * s.qk_dim ||
        v.cols() != s.n_kv_heads * s.v_dim || k.rows() != v.rows()) {
        throw std::invalid_argument("attention: q/k/v widths do not match the head layout");
    }
    if (q_offset + q.rows() > k.rows()) throw std::invalid_argument("attention: queries run past the keys");
}

}  // namespace

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& s,
                        std::size_t q_offset, Tensor* probs) {
    check_attention(q, k, v, s, q_offset);
    const std::size_t tq = q.rows(), tk = k.rows(), group = s.n_q_heads / s.n_kv_heads;
    Tensor out({tq, s.n_q_heads * s.v_dim});
    if (probs) *probs = Tensor({s.n_q_heads, tq, tk});
    std::vector<double> p(tk);
    for (std::size_t h = 0; h < s.n_q_heads; ++h) {
        const std::size_t g = h / group;
        for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t visible = q_offset + i + 1;
            const std::span<const double> qi = q.row(i).subspan(h * s.qk_dim, s.qk_dim);
            double mx = -INFINITY;
            for (std::size_t j = 0; j < visible; ++j) {
                p[j] = s.scale * dot(qi, k.row(j).subspan(g * s.qk_dim, s.qk_dim));
                mx = std::max(mx, p[j]);
            }
            double z = 0;
            for (std::size_t j = 0; j < visible; ++j) z += (p[j] = std::exp(p[j] - mx));
            auto oi = out.row(i).subspan(h * s.v_dim, s.v_dim);
            for (std::size_t j = 0; j < visible; ++j) {
                p[j] /= z;
                axpy(oi, p[j], v.row(j).subspan(g * s.v_dim, s.v_dim));
            }
            if (probs) std::copy_n(p.begin(), visible, probs->data() + (h * tq + i) * tk);
        }
    }
    return out;
}

AttentionGrads causal_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                         const Tensor& probs, const Tensor& dout, const AttentionShape& s,
                                         std::size_t q_offset) {
    check_attention(q, k, v, s, q_offset);
    const std::size_t tq = q.rows(), tk = k.rows(), group = s.n_q_heads / s.n_kv_heads;
    AttentionGrads g{Tensor(q.shape()), Tensor(k.shape()), Tensor(v.shape())};
    std::vector<double> dp(tk);
    for (std::size_t h = 0; h < s.n_q_heads; ++h) {
        const std::size_t kv = h / group;
        for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t visible = q_offset + i + 1;
            const double* pi = probs.data() + (h * tq + i) * tk;
            const auto doi = dout.row(i).subspan(h * s.v_dim, s.v_dim);
            double sum = 0;
            for (std::size_t j = 0; j < visible; ++j) {
                dp[j] = dot(doi, v.row(j).subspan(kv * s.v_dim, s.v_dim));
                sum += pi[j] * dp[j];
                axpy(g.dv.row(j).subspan(kv * s.v_dim, s.v_dim), pi[j], doi);
            }
            const auto qi = q.row(i).subspan(h * s.qk_dim, s.qk_dim);
            auto dqi = g.dq.row(i).subspan(h * s.qk_dim, s.qk_dim);
            for (std::size_t j = 0; j < visible; ++j) {
                const double ds = pi[j] * (dp[j] - sum) * s.scale;
                if (ds == 0.0) continue;
                axpy(dqi, ds, k.row(j).subspan(kv * s.qk_dim, s.qk_dim));
                axpy(g.dk.row(j).subspan(kv * s.qk_dim, s.qk_dim), ds, qi);
            }
        }
    }
    return g;
}

Tensor swiglu(const MlpWeights& w, const Tensor& x) {
    Tensor a = linear(x, w.gate);
    const Tensor b = linear(x, w.up);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = silu(a[i]) * b[i];
    return linear(a, w.down);
}

Tensor swiglu_backward(const MlpWeights& w, const Tensor& x, const Tensor& dy, MlpWeights& grads) {
    const Tensor a = linear(x, w.gate);
    const Tensor b = linear(x, w.up);
    Tensor hidden(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) hidden[i] = silu(a[i]) * b[i];
    const Tensor dh = linear_backward(hidden, w.down, dy, grads.down);
    Tensor da(a.shape()), db(b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        da[i] = dh[i] * b[i] * silu_grad(a[i]);
        db[i] = dh[i] * silu(a[i]);
    }
    Tensor dx = linear_backward(x, w.gate, da, grads.gate);
    add_inplace(dx, linear_backward(x, w.up, db, grads.up));
    return dx;
}

Tensor embed_tokens(const Tensor& table, const std::vector<TokenId>& tokens) {
    const std::size_t vocab = table.rows(), d = table.cols();
    Tensor x({tokens.size(), d});
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const TokenId id = tokens[t];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw std::out_of_range("token id " + std::to_string(id) + " at position " + std::to_string(t) +
                                    " is outside vocabulary of " + std::to_string(vocab));
        }
        std::copy_n(table.row(static_cast<std::size_t>(id)).begin(), d, x.row(t).begin());
    }
    return x;
}

Tensor head_rmsnorm(const Tensor& x, const Tensor& gamma, double eps) {
    const std::size_t hd = gamma.size();
    if (hd == 0 || x.cols() % hd != 0) throw std::invalid_argument("head_rmsnorm: width is not a multiple of head size");
    return rmsnorm(x.reshaped({x.rows() * (x.cols() / hd), hd}), gamma, eps).reshaped(x.shape());
}

}  // namespace upcycle
