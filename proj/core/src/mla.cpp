#include "upcycle/mla.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "upcycle/layers.hpp"
#include "upcycle/numerics.hpp"
#include "upcycle/rope.hpp"

namespace upcycle {

std::size_t MlaConfig::max_positions() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(original_context) * std::max(1.0, yarn_factor)));
}

double MlaConfig::attention_scale() const {
    const double m = yarn_mscale(yarn_factor);
    return m * m / std::sqrt(static_cast<double>(qk_dim()));
}

void MlaConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw std::invalid_argument(std::string("mla config: ") + name + " must be positive");
    };
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(r_q, "r_q");
    positive(r_kv, "r_kv");
    positive(d_v, "d_v");
    positive(original_context, "original_context");
    if (qk_dim() == 0) throw std::invalid_argument("mla config: query/key head width is zero");
    if (d_qk_rope % 2 != 0) throw std::invalid_argument("mla config: d_qk_rope must be even");
    if (!(yarn_factor >= 1.0)) throw std::invalid_argument("mla config: yarn_factor must be >= 1");
    if (!(eps > 0) || !(rope_theta > 0)) throw std::invalid_argument("mla config: eps and rope_theta must be positive");
}

MlaConfig default_mla_config(const TransformerConfig& t, std::size_t cache_per_token) {
    MlaConfig c;
    c.d_model = t.d_model;
    c.n_heads = t.n_q_heads;
    c.d_qk_rope = t.head_dim / 2;
    c.d_qk_nope = t.head_dim - c.d_qk_rope;
    c.d_v = t.head_dim;
    if (cache_per_token <= c.d_qk_rope) {
        throw std::invalid_argument("mla config: cache budget " + std::to_string(cache_per_token) +
                                    " leaves no room for a latent after the rotary key");
    }
    c.r_kv = cache_per_token - c.d_qk_rope;
    c.r_q = std::min(2 * c.r_kv, std::min(t.n_q_heads * t.head_dim, t.d_model));
    c.rope_theta = t.rope_theta;
    c.original_context = t.max_position;
    c.eps = t.eps;
    return c;
}

MlaConfig yarn_scale(const MlaConfig& cfg, double factor) {
    if (!(factor >= 1.0)) throw std::invalid_argument("yarn_scale: factor must be >= 1");
    MlaConfig out = cfg;
    out.yarn_factor = factor;
    return out;
}

MlaBlockWeights mla_skeleton(const MlaConfig& c) {
    c.validate();
    const std::size_t d = c.d_model, H = c.n_heads;
    MlaBlockWeights w;
    w.wqa = Tensor({c.r_q, d});
    w.q_norm = Tensor({c.r_q});
    w.wqb = Tensor({H * c.d_qk_nope, c.r_q});
    w.wqr = Tensor({H * c.d_qk_rope, c.r_q});
    w.wkva = Tensor({c.r_kv, d});
    w.kv_norm = Tensor({c.r_kv});
    w.wkb = Tensor({H * c.d_qk_nope, c.r_kv});
    w.wvb = Tensor({H * c.d_v, c.r_kv});
    w.wkr = Tensor({c.d_qk_rope, d});
    w.wo = Tensor({d, H * c.d_v});
    if (c.gate) w.wgate = Tensor({d, d});
    return w;
}

namespace {

template <typename W, typename Fn>
void visit_mla(W& w, const std::string& p, Fn&& fn) {
    fn(p + "wqa", w.wqa);
    fn(p + "q_norm", w.q_norm);
    fn(p + "wqb", w.wqb);
    fn(p + "wqr", w.wqr);
    fn(p + "wkva", w.wkva);
    fn(p + "kv_norm", w.kv_norm);
    fn(p + "wkb", w.wkb);
    fn(p + "wvb", w.wvb);
    fn(p + "wkr", w.wkr);
    fn(p + "wo", w.wo);
    if (!w.wgate.empty()) fn(p + "wgate", w.wgate);
}

void append_rows(Tensor& dst, const Tensor& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    std::vector<double> values(dst.values().begin(), dst.values().end());
    values.insert(values.end(), src.values().begin(), src.values().end());
    dst = Tensor({dst.rows() + src.rows(), dst.cols()}, std::move(values));
}

RopeTable rope_for(const MlaConfig& c, std::size_t positions) {
    return RopeTable(c.d_qk_rope, c.rope_theta, positions, c.yarn_factor, c.original_context);
}

// Scatters [nope_h ; rope_h] per head into a T x H(dn + dr) matrix. With
// shared_rope the same rope row is used by every head.
Tensor assemble_heads(const Tensor& nope, const Tensor& rope, std::size_t H, std::size_t dn, std::size_t dr,
                      bool shared_rope) {
    const std::size_t T = nope.rows(), w = dn + dr;
    Tensor out({T, H * w});
    for (std::size_t t = 0; t < T; ++t) {
        auto o = out.row(t);
        for (std::size_t h = 0; h < H; ++h) {
            std::copy_n(nope.row(t).begin() + h * dn, dn, o.begin() + h * w);
            std::copy_n(rope.row(t).begin() + (shared_rope ? 0 : h * dr), dr, o.begin() + h * w + dn);
        }
    }
    return out;
}

}  // namespace

void for_each_param(MlaBlockWeights& w, const std::string& prefix, const ParamVisitor& fn) {
    visit_mla(w, prefix, fn);
}

void for_each_param(const MlaBlockWeights& w, const std::string& prefix, const ConstParamVisitor& fn) {
    visit_mla(w, prefix, fn);
}

std::size_t mla_param_count(const MlaConfig& c) {
    const std::size_t d = c.d_model, H = c.n_heads;
    std::size_t n = c.r_q * d + c.r_q + H * c.qk_dim() * c.r_q;
    n += c.r_kv * d + c.r_kv + H * (c.d_qk_nope + c.d_v) * c.r_kv;
    n += c.d_qk_rope * d + d * H * c.d_v;
    if (c.gate) n += d * d;
    return n;
}

Tensor mla_forward(const MlaBlockWeights& w, const MlaConfig& c, const Tensor& x, MlaCache* cache,
                   std::size_t position_offset, MlaTape* tape) {
    const std::size_t T = x.rows(), H = c.n_heads, dn = c.d_qk_nope, dr = c.d_qk_rope;
    if (x.cols() != c.d_model) throw std::invalid_argument("mla_forward: input width does not match d_model");
    if (tape && (cache || position_offset != 0)) {
        throw std::invalid_argument("mla_forward: tapes are only recorded for full-sequence calls");
    }
    if (cache && position_offset != cache->length()) {
        throw std::invalid_argument("mla_forward: position offset " + std::to_string(position_offset) +
                                    " does not continue a cache of " + std::to_string(cache->length()));
    }
    std::optional<RopeTable> rope;
    if (!c.nope_mode && dr > 0) {
        if (position_offset + T > c.max_positions()) {
            throw std::out_of_range("mla_forward: position " + std::to_string(position_offset + T - 1) +
                                    " exceeds the rope table of " + std::to_string(c.max_positions()));
        }
        rope.emplace(rope_for(c, position_offset + T));
    }

    const Tensor cq_pre = linear(x, w.wqa);
    const Tensor cq = rmsnorm(cq_pre, w.q_norm, c.eps);
    const Tensor q_nope = linear(cq, w.wqb);
    Tensor q_rope = linear(cq, w.wqr);
    Tensor ckv = linear(x, w.wkva);
    Tensor k_rope = linear(x, w.wkr);
    if (rope) {
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t h = 0; h < H; ++h) rope->apply(q_rope.row(t).subspan(h * dr, dr), position_offset + t);
            rope->apply(k_rope.row(t), position_offset + t);
        }
    }
    if (cache) {
        append_rows(cache->latents, ckv);
        append_rows(cache->rope_keys, k_rope);
        ckv = cache->latents;
        k_rope = cache->rope_keys;
    }
    const Tensor kv_n = rmsnorm(ckv, w.kv_norm, c.eps);
    const Tensor k = assemble_heads(linear(kv_n, w.wkb), k_rope, H, dn, dr, true);
    const Tensor v = linear(kv_n, w.wvb);
    const Tensor q = assemble_heads(q_nope, q_rope, H, dn, dr, false);

    const AttentionShape shape{H, H, c.qk_dim(), c.d_v, c.attention_scale()};
    Tensor probs;
    Tensor attn = causal_attention(q, k, v, shape, cache ? position_offset : 0, tape ? &probs : nullptr);
    Tensor mixed = linear(attn, w.wo);
    Tensor out = mixed;
    Tensor gate;
    if (c.gate) {
        gate = sigmoid(linear(x, w.wgate));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= gate[i];
    }
    if (tape) {
        *tape = MlaTape{x, cq_pre, cq, ckv, kv_n, q, k, v, std::move(probs), std::move(attn), std::move(mixed),
                        std::move(gate)};
    }
    return out;
}

Tensor mla_backward(const MlaBlockWeights& w, const MlaConfig& c, const MlaTape& tp, const Tensor& dout,
                    MlaBlockWeights& g) {
    const std::size_t T = tp.x.rows(), H = c.n_heads, dn = c.d_qk_nope, dr = c.d_qk_rope, qk = c.qk_dim();
    Tensor dx(tp.x.shape());
    Tensor dmixed = dout;
    if (c.gate) {
        Tensor dgate_pre(dout.shape());
        for (std::size_t i = 0; i < dout.size(); ++i) {
            const double s = tp.gate[i];
            dmixed[i] = dout[i] * s;
            dgate_pre[i] = dout[i] * tp.mixed[i] * s * (1.0 - s);
        }
        add_inplace(dx, linear_backward(tp.x, w.wgate, dgate_pre, g.wgate));
    }
    const Tensor dattn = linear_backward(tp.attn, w.wo, dmixed, g.wo);
    const AttentionShape shape{H, H, qk, c.d_v, c.attention_scale()};
    const auto ag = causal_attention_backward(tp.q, tp.k, tp.v, tp.probs, dattn, shape, 0);

    std::optional<RopeTable> rope;
    if (!c.nope_mode && dr > 0) rope.emplace(rope_for(c, T));
    Tensor dq_nope({T, H * dn}), dq_rope({T, H * dr}), dk_nope({T, H * dn}), dk_rope({T, dr});
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t h = 0; h < H; ++h) {
            const auto dq = ag.dq.row(t).subspan(h * qk, qk);
            const auto dk = ag.dk.row(t).subspan(h * qk, qk);
            std::copy_n(dq.begin(), dn, dq_nope.row(t).begin() + h * dn);
            std::copy_n(dq.begin() + dn, dr, dq_rope.row(t).begin() + h * dr);
            std::copy_n(dk.begin(), dn, dk_nope.row(t).begin() + h * dn);
            axpy(dk_rope.row(t), 1.0, dk.subspan(dn, dr));
            if (rope) rope->apply_inverse(dq_rope.row(t).subspan(h * dr, dr), t);
        }
        if (rope) rope->apply_inverse(dk_rope.row(t), t);
    }

    add_inplace(dx, linear_backward(tp.x, w.wkr, dk_rope, g.wkr));
    Tensor dkv_n = linear_backward(tp.kv_n, w.wkb, dk_nope, g.wkb);
    add_inplace(dkv_n, linear_backward(tp.kv_n, w.wvb, ag.dv, g.wvb));
    const Tensor dckv = rmsnorm_backward(tp.ckv, w.kv_norm, c.eps, dkv_n, g.kv_norm);
    add_inplace(dx, linear_backward(tp.x, w.wkva, dckv, g.wkva));

    Tensor dcq = linear_backward(tp.cq, w.wqb, dq_nope, g.wqb);
    add_inplace(dcq, linear_backward(tp.cq, w.wqr, dq_rope, g.wqr));
    const Tensor dcq_pre = rmsnorm_backward(tp.cq_pre, w.q_norm, c.eps, dcq, g.q_norm);
    add_inplace(dx, linear_backward(tp.x, w.wqa, dcq_pre, g.wqa));
    return dx;
}

MlaBlockWeights init_mla_from_teacher(const AttentionWeights& t, const TransformerConfig& tc, const MlaConfig& c) {
    c.validate();
    const std::size_t d = tc.d_model, dh = tc.head_dim, H = c.n_heads, dn = c.d_qk_nope, dr = c.d_qk_rope;
    if (c.d_model != d) throw std::invalid_argument("init_mla_from_teacher: d_model differs from the teacher");
    if (H != tc.n_q_heads) {
        throw std::invalid_argument("init_mla_from_teacher: n_heads must equal the teacher's query heads (" +
                                    std::to_string(tc.n_q_heads) + ")");
    }
    if (dn + dr > dh || c.d_v > dh) {
        throw std::invalid_argument("init_mla_from_teacher: MLA head widths exceed the teacher head_dim");
    }
    const std::size_t q_rank = std::min(H * dh, d), kv_rank = std::min(2 * H * dh, d);
    if (c.r_q > q_rank) {
        throw std::invalid_argument("init_mla_from_teacher: r_q " + std::to_string(c.r_q) + " exceeds rank bound " +
                                    std::to_string(q_rank));
    }
    if (c.r_kv > kv_rank) {
        throw std::invalid_argument("init_mla_from_teacher: r_kv " + std::to_string(c.r_kv) +
                                    " exceeds rank bound " + std::to_string(kv_rank));
    }

    MlaBlockWeights w = mla_skeleton(c);
    w.q_norm.fill(1.0);
    w.kv_norm.fill(1.0);

    auto down_from = [](const SvdResult& s, Tensor& down) {
        for (std::size_t i = 0; i < down.rows(); ++i)
            for (std::size_t j = 0; j < down.cols(); ++j) down(i, j) = s.sigma[i] * s.v(j, i);
    };

    const SvdResult sq = svd(t.wq, c.r_q);
    down_from(sq, w.wqa);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < dn; ++i)
            std::copy_n(sq.u.row(h * dh + i).begin(), c.r_q, w.wqb.row(h * dn + i).begin());
        for (std::size_t i = 0; i < dr; ++i)
            std::copy_n(sq.u.row(h * dh + dh - dr + i).begin(), c.r_q, w.wqr.row(h * dr + i).begin());
    }

    const std::size_t group = H / tc.n_kv_heads;
    const Tensor k_exp = repeat_kv(t.wk, dh, group);
    const Tensor v_exp = repeat_kv(t.wv, dh, group);
    Tensor kv({2 * H * dh, d});
    std::copy_n(k_exp.data(), k_exp.size(), kv.data());
    std::copy_n(v_exp.data(), v_exp.size(), kv.data() + k_exp.size());
    const SvdResult skv = svd(kv, c.r_kv);
    down_from(skv, w.wkva);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < dn; ++i)
            std::copy_n(skv.u.row(h * dh + i).begin(), c.r_kv, w.wkb.row(h * dn + i).begin());
        for (std::size_t i = 0; i < c.d_v; ++i)
            std::copy_n(skv.u.row(H * dh + h * dh + i).begin(), c.r_kv, w.wvb.row(h * c.d_v + i).begin());
    }

    const double inv_heads = 1.0 / static_cast<double>(tc.n_kv_heads);
    for (std::size_t g = 0; g < tc.n_kv_heads; ++g) {
        for (std::size_t i = 0; i < dr; ++i) axpy(w.wkr.row(i), inv_heads, t.wk.row(g * dh + dh - dr + i));
    }

    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t h = 0; h < H; ++h)
            std::copy_n(t.wo.row(r).begin() + h * dh, c.d_v, w.wo.row(r).begin() + h * c.d_v);
    }
    return w;
}

}  // namespace upcycle
