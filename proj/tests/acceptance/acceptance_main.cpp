// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 only if
// every criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "upcycle/gdn.hpp"
#include "upcycle/hybrid.hpp"
#include "upcycle/losses.hpp"
#include "upcycle/numerics.hpp"
#include "upcycle/teacher.hpp"
#include "upcycle/train.hpp"

using namespace upcycle;
using oracle::Mat;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_seconds;
    std::function<Outcome()> run;
};

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

HybridLayout layout_of(std::size_t n, std::vector<std::size_t> idx) { return HybridLayout{n, std::move(idx), "gdn"}; }

// ---- 1 ---------------------------------------------------------------------

TransformerConfig named_config(std::size_t d, std::size_t L, std::size_t hq, std::size_t hkv, std::size_t dh) {
    TransformerConfig c;
    c.d_model = d;
    c.n_layers = L;
    c.n_q_heads = hq;
    c.n_kv_heads = hkv;
    c.head_dim = dh;
    c.vocab = 128256;
    c.mlp_hidden = 8192;
    return c;
}

Outcome kv_accounting() {
    struct Row {
        const char* model;
        TransformerConfig cfg;
        std::size_t per_token;
        HybridLayout layout;
        const char* stated;
    };
    const auto llama1 = named_config(2048, 16, 32, 8, 64);
    const auto llama3 = named_config(3072, 28, 24, 8, 128);
    const auto qwen = named_config(2048, 28, 16, 8, 128);
    const std::vector<Row> rows = {
        {"llama-3.2-1b sparse", llama1, 160, layout_of(16, {1, 5, 10, 14}), "3.9%"},
        {"llama-3.2-1b alternating", llama1, 160, HybridLayout::every(16, 2, 0), "7.8%"},
        {"llama-3.2-3b sparse", llama3, 192, layout_of(28, {0, 5, 10, 16, 21, 26}), "2.0%"},
        {"llama-3.2-3b alternating", llama3, 192, HybridLayout::every(28, 2, 0), "4.7%"},
        {"qwen3-1.7b sparse", qwen, 320, layout_of(28, {1, 5, 9, 13, 17, 21, 25}), "3.9%"},
        {"qwen3-1.7b alternating", qwen, 320, HybridLayout::every(28, 2, 0), "7.8%"},
    };
    bool ok = true;
    std::string detail;
    for (const auto& r : rows) {
        const auto rep = kv_cache_report(r.layout, r.cfg, default_mla_config(r.cfg, r.per_token));
        // Independent arithmetic: L * 2 * H_kv * d_h against |MLA| * constant.
        const double teacher = double(r.cfg.n_layers * 2 * r.cfg.n_kv_heads * r.cfg.head_dim);
        const double hybrid = double(r.layout.mla_indices.size() * r.per_token);
        const std::string hand = fmt("%.1f%%", 100.0 * hybrid / teacher);
        const bool row_ok = rep.percent() == r.stated && hand == r.stated &&
                            std::abs(rep.ratio - hybrid / teacher) < 1e-15;
        ok &= row_ok;
        if (!detail.empty()) detail += ", ";
        detail += rep.percent() + (row_ok ? "" : std::string(" (want ") + r.stated + ")");
    }
    return {ok, detail};
}

// ---- 2 ---------------------------------------------------------------------

Outcome logit_memory() {
    constexpr std::size_t T = 65536, V = 128256, stated = 16810934272ULL;
    const auto plan = memory_plan(T, V);
    const std::size_t hand = T * V * 2;
    const bool formula = plan.logit_tensor_bytes == hand;
    const std::string shown = approx_bytes(plan.logit_tensor_bytes);
    const bool display = shown == "≈16 GB" && approx_bytes(stated) == "≈16 GB";
    std::string detail = "T*V*2 = " + group_thousands(plan.logit_tensor_bytes) + " bytes " + shown + "; stated " +
                         group_thousands(stated) + " (differs by " + group_thousands(stated - hand) +
                         " bytes)";
    return {formula && display, detail};
}

// ---- 3 ---------------------------------------------------------------------

Outcome gdn_params() {
    const auto cfg = default_gdn_config(2048, 6);
    const auto n = gdn_param_count(cfg);
    const double m = double(n.total()) / 1e6;
    return {std::abs(m - 25.19) <= 0.05, fmt("%.4fM", m) + " at d=2048, H=6 (d_k=" + std::to_string(cfg.d_k) +
                                             ", d_v=" + std::to_string(cfg.d_v) + ")"};
}

// ---- 4 ---------------------------------------------------------------------

Outcome gdn_chunked() {
    const auto c = fixture::toy_teacher_config();
    double worst = 0;
    std::size_t runs = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto teacher = gen_toy_teacher(c, 1000 + seed);
        const GdnConfig gc = default_gdn_config(c.d_model, 1 + seed % 2);
        const auto w = init_gdn_from_teacher(teacher.layers[seed % c.n_layers].attn, c, gc, seed);
        Rng rng(seed);
        for (std::size_t T : {64, 70, 256, 512}) {
            const Tensor x = oracle::random_matrix(rng, T, c.d_model);
            const Tensor a = gdn_forward(w, gc, x, nullptr, GdnMode::chunked);
            const Tensor b = gdn_forward(w, gc, x, nullptr, GdnMode::sequential);
            worst = std::max(worst, max_abs_diff(a, b) / max_abs(b));
            ++runs;
        }
    }
    return {worst < 1e-4, "max rel err " + fmt("%.3e", worst) + " over " + std::to_string(runs) + " runs"};
}

// ---- 5 ---------------------------------------------------------------------

// KL(p_s || p_t) per token, averaged, in Eigen.
double oracle_kl(const Mat& zs, const Mat& zt) {
    double total = 0;
    for (Eigen::Index i = 0; i < zs.rows(); ++i) {
        const Eigen::VectorXd a = zs.row(i).transpose().array() - zs.row(i).maxCoeff();
        const Eigen::VectorXd b = zt.row(i).transpose().array() - zt.row(i).maxCoeff();
        const Eigen::VectorXd ls = a.array() - std::log(a.array().exp().sum());
        const Eigen::VectorXd lt = b.array() - std::log(b.array().exp().sum());
        total += (ls.array().exp() * (ls - lt).array()).sum();
    }
    return total / double(zs.rows());
}

Outcome kl_paths() {
    Rng rng(2024);
    double value_err = 0, grad_err = 0, oracle_err = 0;
    std::size_t checked_peaks = 0;
    bool peaks_ok = true;
    for (int inst = 0; inst < 50; ++inst) {
        const std::size_t T = 2 + rng.below(2047), V = 32 + rng.below(481);
        const std::size_t ds = 8 + rng.below(17), dt = 8 + rng.below(17);
        LossConfig lc;
        lc.kl_chunk = 16 + rng.below(497);
        lc.vocab_tile = 8 + rng.below(121);
        const Tensor hs = oracle::random_matrix(rng, T, ds), ws = oracle::random_matrix(rng, V, ds, 0.6);
        const Tensor ht = oracle::random_matrix(rng, T, dt), wt = oracle::random_matrix(rng, V, dt, 0.6);
        const Tensor zs = linear(hs, ws), zt = linear(ht, wt);

        const auto naive = kl_naive(zs, zt, lc);
        oracle_err = std::max(oracle_err, std::abs(naive.value - oracle_kl(oracle::to_eigen(zs), oracle::to_eigen(zt))));
        const auto chunked = kl_chunked(zs, zt, lc);
        const auto online = kl_online(zs, zt, lc);
        AllocationScope scope;
        const auto hidden = kl_hidden(hs, ws, ht, wt, lc);
        const bool hidden_clean = !scope.saw_matrix(T, V) && scope.count_at_least(T * V) == 0;

        for (const auto* r : {&chunked, &online}) {
            value_err = std::max(value_err, std::abs(r->value - naive.value));
            grad_err = std::max(grad_err, max_abs_diff(r->grad, naive.grad));
        }
        value_err = std::max(value_err, std::abs(hidden.value - naive.value));
        grad_err = std::max(grad_err, max_abs_diff(hidden.grad, matmul(naive.grad, ws)));
        grad_err = std::max(grad_err, max_abs_diff(hidden.grad_weight, matmul_tn(naive.grad, hs)));
        if (T > lc.kl_chunk) {
            ++checked_peaks;
            for (const auto* r : {&chunked, &online, &hidden}) peaks_ok &= r->peak_elements < T * V;
            peaks_ok &= hidden_clean;
        }
    }
    const bool ok = value_err < 1e-5 && grad_err < 1e-4 && oracle_err < 1e-10 && peaks_ok && checked_peaks > 0;
    return {ok, "value " + fmt("%.2e", value_err) + ", grad " + fmt("%.2e", grad_err) + ", naive vs oracle " +
                    fmt("%.2e", oracle_err) + ", peak < T*V on " + std::to_string(checked_peaks) +
                    " instances with T > C" + (peaks_ok ? "" : " (VIOLATED)")};
}

// ---- 6 ---------------------------------------------------------------------

Outcome grad_audits() {
    struct Target {
        AuditTarget t;
        const char* name;
        double tol;
    };
    const Target targets[] = {{AuditTarget::kl_naive, "kl_naive", 1e-3},
                              {AuditTarget::fused_linear_ce, "fused_linear_ce", 1e-3},
                              {AuditTarget::mla_block, "mla_block", 1e-2},
                              {AuditTarget::gdn_block, "gdn_block", 1e-2},
                              {AuditTarget::hybrid_model, "hybrid_model", 1e-2}};
    bool ok = true;
    std::string detail;
    for (const auto& t : targets) {
        const auto r = audit_target(t.t, 11, 48);
        ok &= r.max_rel_error < t.tol && r.probes >= 32;
        if (!detail.empty()) detail += ", ";
        detail += std::string(t.name) + " " + fmt("%.1e", r.max_rel_error) + "/" + std::to_string(r.probes);
    }
    return {ok, detail};
}

// ---- 7 ---------------------------------------------------------------------

double rel_frob(const Mat& got, const Mat& want) { return (got - want).norm() / want.norm(); }

Outcome svd_init() {
    double worst = 0;
    std::size_t layers = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        TransformerConfig c = fixture::toy_teacher_config();
        if (seed % 2) {
            c.d_model = 48;
            c.n_q_heads = 6;
            c.n_kv_heads = 3;
        }
        c.n_layers = 2;
        const auto teacher = gen_toy_teacher(c, 500 + seed);
        MlaConfig m = default_mla_config(c, c.head_dim);
        m.r_q = c.d_model;
        m.r_kv = c.d_model;
        const std::size_t H = c.n_q_heads, dh = c.head_dim, dn = m.d_qk_nope, dr = m.d_qk_rope, g = c.group();
        if (dn + dr != dh || m.d_v != dh) return {false, "full-rank config does not split d_h"};
        for (const auto& layer : teacher.layers) {
            const auto w = init_mla_from_teacher(layer.attn, c, m);
            const Mat qa = oracle::to_eigen(w.wqa), kva = oracle::to_eigen(w.wkva);
            const Mat qn = oracle::to_eigen(w.wqb) * qa, qr = oracle::to_eigen(w.wqr) * qa;
            const Mat kn = oracle::to_eigen(w.wkb) * kva, vv = oracle::to_eigen(w.wvb) * kva;
            const Mat wq = oracle::to_eigen(layer.attn.wq), wk = oracle::to_eigen(layer.attn.wk),
                      wv = oracle::to_eigen(layer.attn.wv);
            Mat q_rec(H * dh, c.d_model), kv_rec(H * (dn + dh), c.d_model), kv_want(H * (dn + dh), c.d_model);
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t j = h / g;
                q_rec.middleRows(h * dh, dn) = qn.middleRows(h * dn, dn);
                q_rec.middleRows(h * dh + dn, dr) = qr.middleRows(h * dr, dr);
                kv_rec.middleRows(h * dn, dn) = kn.middleRows(h * dn, dn);
                kv_want.middleRows(h * dn, dn) = wk.middleRows(j * dh, dn);
                kv_rec.middleRows(H * dn + h * dh, dh) = vv.middleRows(h * dh, dh);
                kv_want.middleRows(H * dn + h * dh, dh) = wv.middleRows(j * dh, dh);
            }
            worst = std::max({worst, rel_frob(q_rec, wq), rel_frob(kv_rec, kv_want)});
            ++layers;
        }
    }
    return {worst < 1e-5, "max rel Frobenius " + fmt("%.2e", worst) + " over " + std::to_string(layers) +
                              " layers of 20 teachers"};
}

// ---- 8 ---------------------------------------------------------------------

Outcome gqa_fidelity() {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto c = fixture::toy_teacher_config();
        const auto gqa = gen_toy_teacher(c, 70 + seed);
        TeacherCheckpoint mha = gqa;
        mha.config.n_kv_heads = c.n_q_heads;
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            const auto& src = gqa.layers[l].attn;
            auto& dst = mha.layers[l].attn;
            Mat wk(c.n_q_heads * c.head_dim, c.d_model), wv(c.n_q_heads * c.head_dim, c.d_model);
            for (std::size_t h = 0; h < c.n_q_heads; ++h) {
                const std::size_t j = h / c.group();
                wk.middleRows(h * c.head_dim, c.head_dim) = oracle::to_eigen(src.wk).middleRows(j * c.head_dim, c.head_dim);
                wv.middleRows(h * c.head_dim, c.head_dim) = oracle::to_eigen(src.wv).middleRows(j * c.head_dim, c.head_dim);
            }
            dst.wk = oracle::from_eigen(wk);
            dst.wv = oracle::from_eigen(wv);
        }
        Rng rng(seed);
        const auto tokens = fixture::random_tokens(rng, 48, c.vocab);
        const Tensor a = *teacher_forward(gqa, tokens, true, false).logits;
        const Tensor b = *teacher_forward(mha, tokens, true, false).logits;
        worst = std::max(worst, max_abs_diff(a, b));
    }
    return {worst < 1e-6, "max abs diff " + fmt("%.2e", worst) + " over 10 seeds"};
}

// ---- 9 ---------------------------------------------------------------------

Outcome decode_consistency() {
    const auto c = fixture::toy_teacher_config();
    const auto teacher = gen_toy_teacher(c, 9);
    const auto mla = default_mla_config(c, 20);
    const auto model = convert_teacher(teacher, mla, default_gdn_config(c.d_model), layout_of(4, {1, 3}), 9);
    Rng rng(9);
    const std::size_t prefill = 100, steps = 64;
    const auto tokens = fixture::random_tokens(rng, prefill + steps, c.vocab);
    const Tensor full = *hybrid_forward(model, tokens, true, false).logits;
    DecodeSession s(model);
    const Tensor pre = s.logits({tokens.begin(), tokens.begin() + prefill});
    double diff = 0;
    for (std::size_t i = 0; i < prefill; ++i)
        for (std::size_t j = 0; j < c.vocab; ++j) diff = std::max(diff, std::abs(pre(i, j) - full(i, j)));
    for (std::size_t i = prefill; i < prefill + steps; ++i) {
        const Tensor z = s.logits({tokens[i]});
        for (std::size_t j = 0; j < c.vocab; ++j) diff = std::max(diff, std::abs(z[j] - full(i, j)));
    }
    bool cache_ok = true;
    for (std::size_t l : model.layout.mla_indices) {
        const auto& cache = s.mla_cache(l);
        cache_ok &= cache.latents.cols() == mla.r_kv && cache.rope_keys.cols() == mla.d_qk_rope &&
                    cache.elements() == (mla.r_kv + mla.d_qk_rope) * (prefill + steps);
    }
    return {diff < 1e-5 && cache_ok, "max abs diff " + fmt("%.2e", diff) + "; cache " + std::to_string(mla.r_kv) +
                                         " + " + std::to_string(mla.d_qk_rope) + " elements/token" +
                                         (cache_ok ? "" : " (MISMATCH)")};
}

// ---- 10 --------------------------------------------------------------------

HybridModel toy_hybrid(const TeacherCheckpoint& teacher) {
    const auto& c = teacher.config;
    return convert_teacher(teacher, default_mla_config(c, 20), default_gdn_config(c.d_model), layout_of(4, {1}), 5);
}

Outcome desk_training() {
    const auto c = fixture::toy_teacher_config();
    const auto teacher = gen_toy_teacher(c, 1);
    const MarkovCorpus data(c.vocab, 7);
    std::string detail;
    bool ok = true;

    TrainConfig s1;
    s1.steps = 200;
    s1.context = 128;
    s1.lr = 5e-3;
    auto a = toy_hybrid(teacher), b = toy_hybrid(teacher);
    const auto r1 = train_stage1_ild(a, teacher, data, s1);
    train_stage1_ild(b, teacher, data, s1);
    const bool deterministic = weights_hash(a) == weights_hash(b);
    const double ild_drop = r1.smoothed_reduction();
    ok &= ild_drop >= 0.5 && deterministic;
    detail += "ILD drop " + fmt("%.1f%%", 100 * ild_drop) + (deterministic ? " (reproducible)" : " (NOT reproducible)");

    TrainConfig s2;
    s2.steps = 500;
    s2.context = 512;
    s2.lr = 3e-3;
    s2.path = KlPath::hidden;
    auto student = toy_hybrid(teacher);
    Rng held_rng(99);
    std::vector<std::vector<TokenId>> held;
    for (int i = 0; i < 8; ++i) held.push_back(data.sample(512, held_rng));
    const auto before = evaluate_kd(student, teacher, held);
    train_stage2_kd(student, teacher, data, s2);
    const auto after = evaluate_kd(student, teacher, held);
    const double kl_drop = 1 - after.kl / before.kl;
    ok &= kl_drop >= 0.6 && after.argmax_agreement >= 0.8;
    detail += "; held-out KL drop " + fmt("%.1f%%", 100 * kl_drop) + ", argmax agreement " +
              fmt("%.1f%%", 100 * after.argmax_agreement);

    const auto niah_teacher = gen_toy_teacher(c, 3);
    auto niah_model = toy_hybrid(niah_teacher);
    const auto task = niah_task(c.vocab);
    NiahTrainConfig nt;
    nt.train.steps = 2000;
    nt.train.context = 128;
    nt.train.lr = 3e-3;
    nt.train.batch = 8;
    const auto test = niah_generate(task, 128, 1, 200, 12345);
    train_niah(niah_model, task, nt);
    const double acc = niah_eval(niah_model, test);
    ok &= acc >= 0.9;
    detail += "; NIAH T=128 " + fmt("%.1f%%", 100 * acc);
    return {ok, detail};
}

}  // namespace

int main() {
    using Clock = std::chrono::steady_clock;
    const std::vector<Criterion> criteria = {
        {1, "kv-cache-accounting", 1, kv_accounting},
        {2, "logit-memory-accounting", 1, logit_memory},
        {3, "gdn-param-count", 1, gdn_params},
        {4, "gdn-chunked-equals-sequential", 60, gdn_chunked},
        {5, "kl-path-agreement", 120, kl_paths},
        {6, "gradient-audits", 120, grad_audits},
        {7, "svd-init-reconstruction", 60, svd_init},
        {8, "gqa-fidelity", 30, gqa_fidelity},
        {9, "decode-consistency", 60, decode_consistency},
        {10, "desk-training", 900, desk_training},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        const bool in_time = secs < c.budget_seconds;
        const bool pass = o.passed && in_time;
        failed += !pass;
        std::printf("%s %2d %-30s %s [%.2f s / %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                    o.detail.c_str(), secs, c.budget_seconds, in_time ? "" : " OVER BUDGET");
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
