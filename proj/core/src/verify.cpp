#include "upcycle/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "upcycle/losses.hpp"
#include "upcycle/numerics.hpp"
#include "upcycle/train.hpp"

namespace upcycle {

double max_relative_error(const Tensor& a, const Tensor& b) {
    const double scale = max_abs(b);
    const double diff = max_abs_diff(a, b);
    return scale > 0 ? diff / scale : diff;
}

namespace {

MlaConfig full_rank_mla(const TransformerConfig& t) {
    MlaConfig m = default_mla_config(t, t.head_dim);
    m.r_q = std::min(t.n_q_heads * t.head_dim, t.d_model);
    m.r_kv = std::min(2 * t.n_q_heads * t.head_dim, t.d_model);
    return m;
}

// Squared Frobenius distance and squared norm of the reference, accumulated
// over selected rows: rec row `ri` against ref row `fi`.
struct FrobAcc {
    double diff = 0, ref = 0;
    void add(std::span<const double> rec, std::span<const double> want) {
        for (std::size_t j = 0; j < want.size(); ++j) {
            diff += (rec[j] - want[j]) * (rec[j] - want[j]);
            ref += want[j] * want[j];
        }
    }
    double rel() const { return ref > 0 ? std::sqrt(diff / ref) : std::sqrt(diff); }
};

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << v;
    return os.str();
}

Tensor random_input(Rng& rng, std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    for (double& v : t.values()) v = rng.uniform(-1, 1);
    return t;
}

}  // namespace

double svd_reconstruction_error(const TeacherCheckpoint& teacher) {
    const auto& c = teacher.config;
    const MlaConfig m = full_rank_mla(c);
    const std::size_t dh = c.head_dim, dn = m.d_qk_nope, dr = m.d_qk_rope, H = c.n_q_heads;
    double worst = 0;
    for (const auto& layer : teacher.layers) {
        const MlaBlockWeights w = init_mla_from_teacher(layer.attn, c, m);
        const Tensor qn = matmul(w.wqb, w.wqa), qr = matmul(w.wqr, w.wqa);
        FrobAcc q;
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < dn; ++i) q.add(qn.row(h * dn + i), layer.attn.wq.row(h * dh + i));
            for (std::size_t i = 0; i < dr; ++i) q.add(qr.row(h * dr + i), layer.attn.wq.row(h * dh + dn + i));
        }
        const Tensor k_rep = repeat_kv(layer.attn.wk, dh, c.group());
        const Tensor v_rep = repeat_kv(layer.attn.wv, dh, c.group());
        const Tensor kn = matmul(w.wkb, w.wkva), vv = matmul(w.wvb, w.wkva);
        FrobAcc kv;
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < dn; ++i) kv.add(kn.row(h * dn + i), k_rep.row(h * dh + i));
            for (std::size_t i = 0; i < m.d_v; ++i) kv.add(vv.row(h * m.d_v + i), v_rep.row(h * dh + i));
        }
        worst = std::max({worst, q.rel(), kv.rel()});
    }
    return worst;
}

std::vector<VerifyCheck> verify_suite(const HybridModel& model, const TeacherCheckpoint& teacher,
                                      const VerifyOptions& opts) {
    std::vector<VerifyCheck> out;
    Rng rng(opts.seed);
    const auto& c = model.base;

    {
        const bool same = c == teacher.config;
        out.push_back({"base-config", same, same ? 0.0 : 1.0, 0.0,
                       same ? "student and teacher share the base config" : "base configs differ"});
        if (!same) return out;
    }

    const double svd_err = svd_reconstruction_error(teacher);
    out.push_back({"svd-reconstruction", svd_err < 1e-5, svd_err, 1e-5,
                   "full-rank factor products vs teacher W_Q, W_K (nope rows), W_V"});

    {
        double worst = 0;
        std::size_t n = 0;
        for (const auto& layer : model.layers) {
            if (layer.is_mla()) continue;
            for (std::size_t T : {std::size_t{64}, std::size_t{70}}) {
                const Tensor x = random_input(rng, T, c.d_model);
                const Tensor a = gdn_forward(layer.gdn(), model.gdn, x, nullptr, GdnMode::chunked);
                const Tensor b = gdn_forward(layer.gdn(), model.gdn, x, nullptr, GdnMode::sequential);
                worst = std::max(worst, max_relative_error(a, b));
            }
            ++n;
        }
        out.push_back({"gdn-chunked-vs-sequential", worst < 1e-4, worst, 1e-4,
                       std::to_string(n) + " GDN layers, T in {64, 70}"});
    }

    {
        std::vector<TokenId> tokens(opts.tokens);
        for (auto& t : tokens) t = static_cast<TokenId>(rng.below(c.vocab));
        const Tensor hs = hybrid_forward(model, tokens, false, false).final_hidden;
        const Tensor ht = teacher_forward(teacher, tokens, false, false).final_hidden;
        const Tensor zs = linear(hs, model.lm_head), zt = linear(ht, teacher.lm_head);
        const LossConfig lc{.kl_chunk = std::max<std::size_t>(1, opts.tokens / 3), .vocab_tile = 16};
        const auto naive = kl_naive(zs, zt, lc);
        double value_err = 0, grad_err = 0;
        for (const auto& r : {kl_chunked(zs, zt, lc), kl_online(zs, zt, lc)}) {
            value_err = std::max(value_err, std::abs(r.value - naive.value));
            grad_err = std::max(grad_err, max_abs_diff(r.grad, naive.grad));
        }
        const auto hidden = kl_hidden(hs, model.lm_head, ht, teacher.lm_head, lc);
        value_err = std::max(value_err, std::abs(hidden.value - naive.value));
        grad_err = std::max(grad_err, max_abs_diff(hidden.grad, matmul(naive.grad, model.lm_head)));
        out.push_back({"kl-path-agreement", value_err < 1e-5 && grad_err < 1e-4, std::max(value_err, grad_err),
                       1e-5, "value diff " + fmt(value_err) + " (tol 1e-5), grad diff " + fmt(grad_err) +
                                 " (tol 1e-4), KL " + fmt(naive.value)});
    }

    {
        const auto audit = audit_model_kd(model, teacher, std::min<std::size_t>(opts.tokens, 24), opts.seed,
                                          opts.probes);
        out.push_back({"grad-audit", audit.max_rel_error < 1e-2, audit.max_rel_error, 1e-2,
                       std::to_string(audit.probes) + " probes, worst " + audit.worst});
    }

    {
        const std::size_t prefill = opts.tokens, total = prefill + opts.decode_steps;
        std::vector<TokenId> tokens(total);
        for (auto& t : tokens) t = static_cast<TokenId>(rng.below(c.vocab));
        const Tensor full = *hybrid_forward(model, tokens, true, false).logits;
        DecodeSession s(model);
        const Tensor pre = s.logits({tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(prefill)});
        double diff = 0;
        for (std::size_t i = 0; i < prefill; ++i) {
            for (std::size_t j = 0; j < full.cols(); ++j) diff = std::max(diff, std::abs(pre(i, j) - full(i, j)));
        }
        for (std::size_t i = prefill; i < total; ++i) {
            const Tensor z = s.logits({tokens[i]});
            for (std::size_t j = 0; j < full.cols(); ++j) diff = std::max(diff, std::abs(z[j] - full(i, j)));
        }
        out.push_back({"decode-consistency", diff < 1e-5, diff, 1e-5,
                       std::to_string(prefill) + "-token prefill + " + std::to_string(opts.decode_steps) +
                           " decode steps vs one-shot"});
        const std::size_t want = model.layout.n_mla() * model.mla.cache_elements_per_token() * total;
        const std::size_t got = s.mla_cache_elements();
        out.push_back({"mla-cache-size", got == want, static_cast<double>(got), static_cast<double>(want),
                       std::to_string(model.layout.n_mla()) + " MLA layers x " +
                           std::to_string(model.layout.n_mla() ? model.mla.cache_elements_per_token() : 0) +
                           " elements/token x " + std::to_string(total) + " tokens"});
    }
    return out;
}

}  // namespace upcycle
