#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "upcycle/mla.hpp"
#include "upcycle/numerics.hpp"

using namespace upcycle;

namespace {

MlaConfig small_config(bool gate = false, bool nope = false) {
    MlaConfig c;
    c.d_model = 12;
    c.n_heads = 2;
    c.r_q = 6;
    c.r_kv = 5;
    c.d_qk_nope = 3;
    c.d_qk_rope = 4;
    c.d_v = 3;
    c.gate = gate;
    c.nope_mode = nope;
    c.original_context = 64;
    return c;
}

MlaBlockWeights random_weights(const MlaConfig& c, Rng& rng) {
    MlaBlockWeights w = mla_skeleton(c);
    for_each_param(w, "", [&](const std::string& name, Tensor& t) {
        const bool norm = name.find("norm") != std::string::npos;
        for (double& v : t.values()) v = norm ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5);
    });
    return w;
}

// Row block helper: rows [r0, r0 + n) of every head of width `stride`.
Tensor head_rows(const Tensor& w, std::size_t heads, std::size_t stride, std::size_t r0, std::size_t n) {
    Tensor out({heads * n, w.cols()});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w.cols(); ++j) out(h * n + i, j) = w(h * stride + r0 + i, j);
    return out;
}

}  // namespace

TEST_CASE("zero input gives zero output") {
    Rng rng(1);
    const auto c = small_config(true);
    const auto w = random_weights(c, rng);
    const Tensor y = mla_forward(w, c, Tensor({5, 12}));
    CHECK(max_abs(y) == 0.0);
}

TEST_CASE("single token single head reduces to the value path") {
    auto c = small_config(false, true);
    c.n_heads = 1;
    Rng rng(2);
    const auto w = random_weights(c, rng);
    const Tensor x = oracle::random_matrix(rng, 1, 12);
    const Tensor expect = linear(linear(rmsnorm(linear(x, w.wkva), w.kv_norm, c.eps), w.wvb), w.wo);
    CHECK(max_abs_diff(mla_forward(w, c, x), expect) < 1e-12);
}

TEST_CASE("prefill plus decode matches one-shot prefill") {
    for (bool gate : {false, true}) {
        const auto c = small_config(gate);
        Rng rng(3);
        const auto w = random_weights(c, rng);
        const Tensor x = oracle::random_matrix(rng, 16, 12);
        const Tensor full = mla_forward(w, c, x);

        MlaCache cache;
        Tensor head({8, 12});
        std::copy_n(x.data(), 8 * 12, head.data());
        const Tensor first = mla_forward(w, c, head, &cache, 0);
        for (std::size_t t = 0; t < 8; ++t)
            for (std::size_t j = 0; j < 12; ++j) CHECK(std::abs(first(t, j) - full(t, j)) < 1e-5);
        for (std::size_t t = 8; t < 16; ++t) {
            Tensor step({1, 12});
            std::copy_n(x.row(t).begin(), 12, step.data());
            const Tensor y = mla_forward(w, c, step, &cache, t);
            for (std::size_t j = 0; j < 12; ++j) CHECK(std::abs(y(0, j) - full(t, j)) < 1e-5);
        }
        CHECK(cache.length() == 16);
        CHECK(cache.elements() == 16 * c.cache_elements_per_token());
        CHECK(cache.latents.shape() == Shape{16, 5});
        CHECK(cache.rope_keys.shape() == Shape{16, 4});
        CHECK_THROWS_AS(mla_forward(w, c, Tensor({1, 12}), &cache, 3), std::invalid_argument);
    }
}

TEST_CASE("nope mode is equivariant to position shifts") {
    const auto c = small_config(false, true);
    Rng rng(4);
    const auto w = random_weights(c, rng);
    const Tensor x = oracle::random_matrix(rng, 6, 12);
    CHECK(max_abs_diff(mla_forward(w, c, x, nullptr, 0), mla_forward(w, c, x, nullptr, 37)) < 1e-5);

    // rotations change the scores, but only through relative offsets
    const auto rc = small_config();
    CHECK(max_abs_diff(mla_forward(w, rc, x), mla_forward(w, c, x)) > 1e-6);
    CHECK(max_abs_diff(mla_forward(w, rc, x, nullptr, 0), mla_forward(w, rc, x, nullptr, 37)) < 1e-9);
}

TEST_CASE("zero gate halves the output") {
    auto c = small_config(true);
    Rng rng(5);
    auto w = random_weights(c, rng);
    w.wgate.fill(0.0);
    const Tensor x = oracle::random_matrix(rng, 4, 12);
    auto c_plain = c;
    c_plain.gate = false;
    Tensor half = mla_forward(w, c_plain, x);
    scale_inplace(half, 0.5);
    CHECK(max_abs_diff(mla_forward(w, c, x), half) < 1e-12);
}

TEST_CASE("rope table overflow is an error") {
    const auto c = small_config();
    Rng rng(6);
    const auto w = random_weights(c, rng);
    CHECK_THROWS_AS(mla_forward(w, c, Tensor({4, 12}), nullptr, 61), std::out_of_range);
    CHECK_NOTHROW(mla_forward(w, c, Tensor({4, 12}), nullptr, 60));
    CHECK_NOTHROW(mla_forward(w, small_config(false, true), Tensor({4, 12}), nullptr, 1000));
}

TEST_CASE("mla backward matches finite differences") {
    for (bool gate : {false, true}) {
        const auto c = small_config(gate);
        Rng rng(7);
        auto w = random_weights(c, rng);
        Tensor x = oracle::random_matrix(rng, 5, 12);
        const Tensor dy = oracle::random_matrix(rng, 5, 12);
        MlaTape tape;
        mla_forward(w, c, x, nullptr, 0, &tape);
        MlaBlockWeights g = mla_skeleton(c);
        const Tensor dx = mla_backward(w, c, tape, dy, g);
        auto loss = [&] { return dot(mla_forward(w, c, x).values(), dy.values()); };
        const double h = 1e-6;
        auto probe = [&](Tensor& p, const Tensor& grad) {
            for (std::size_t i = 0; i < p.size(); i += 3) {
                const double keep = p[i];
                p[i] = keep + h;
                const double up = loss();
                p[i] = keep - h;
                const double dn = loss();
                p[i] = keep;
                CHECK(std::abs((up - dn) / (2 * h) - grad[i]) < 1e-6);
            }
        };
        probe(x, dx);
        std::vector<Tensor*> params, grads;
        for_each_param(w, "", [&](const std::string&, Tensor& t) { params.push_back(&t); });
        for_each_param(g, "", [&](const std::string&, Tensor& t) { grads.push_back(&t); });
        for (std::size_t i = 0; i < params.size(); ++i) probe(*params[i], *grads[i]);
    }
}

TEST_CASE("svd init reproduces a rank-1 teacher exactly") {
    const auto tc = fixture::toy_teacher_config();
    Rng rng(8);
    AttentionWeights a;
    auto outer = [&](std::size_t rows) {
        const Tensor u = oracle::random_matrix(rng, rows, 1), v = oracle::random_matrix(rng, 1, 32);
        return matmul(u, v);
    };
    a.wq = outer(32);
    // K and V share the right factor so the stacked matrix stays rank 1
    const Tensor right = oracle::random_matrix(rng, 1, 32);
    a.wk = matmul(oracle::random_matrix(rng, 16, 1), right);
    a.wv = matmul(oracle::random_matrix(rng, 16, 1), right);
    a.wo = oracle::random_matrix(rng, 32, 32);
    auto c = default_mla_config(tc, 12);
    c.r_q = 1;
    c.r_kv = 1;
    const auto w = init_mla_from_teacher(a, tc, c);
    CHECK(max_abs_diff(matmul(w.wqb, w.wqa), head_rows(a.wq, 4, 8, 0, 4)) < 1e-6);
    CHECK(max_abs_diff(matmul(w.wqr, w.wqa), head_rows(a.wq, 4, 8, 4, 4)) < 1e-6);
    CHECK(max_abs_diff(matmul(w.wkb, w.wkva), head_rows(repeat_kv(a.wk, 8, 2), 4, 8, 0, 4)) < 1e-6);
    CHECK(max_abs_diff(matmul(w.wvb, w.wkva), repeat_kv(a.wv, 8, 2)) < 1e-6);
}

TEST_CASE("full-rank svd init reconstructs the teacher projections") {
    const auto tc = fixture::toy_teacher_config();
    const auto t = gen_toy_teacher(tc, 9);
    auto c = default_mla_config(tc, 36);  // r_kv = 32 = d
    c.r_q = 32;
    const auto& a = t.layers[1].attn;
    const auto w = init_mla_from_teacher(a, tc, c);
    CHECK(max_abs_diff(matmul(w.wqb, w.wqa), head_rows(a.wq, 4, 8, 0, 4)) < 1e-5);
    CHECK(max_abs_diff(matmul(w.wqr, w.wqa), head_rows(a.wq, 4, 8, 4, 4)) < 1e-5);
    CHECK(max_abs_diff(matmul(w.wkb, w.wkva), head_rows(repeat_kv(a.wk, 8, 2), 4, 8, 0, 4)) < 1e-5);
    CHECK(max_abs_diff(matmul(w.wvb, w.wkva), repeat_kv(a.wv, 8, 2)) < 1e-5);
    CHECK(w.wo == a.wo);

    Tensor avg({4, 32});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 32; ++j) avg(i, j) = 0.5 * (a.wk(4 + i, j) + a.wk(12 + i, j));
    CHECK(max_abs_diff(w.wkr, avg) < 1e-15);
    for (double g : w.q_norm.values()) CHECK(g == 1.0);
}

TEST_CASE("svd init rejects impossible ranks") {
    const auto tc = fixture::toy_teacher_config();
    const auto t = gen_toy_teacher(tc, 10);
    auto c = default_mla_config(tc, 12);
    c.r_kv = 33;
    CHECK_THROWS_AS(init_mla_from_teacher(t.layers[0].attn, tc, c), std::invalid_argument);
    c = default_mla_config(tc, 12);
    c.r_q = 40;
    CHECK_THROWS_AS(init_mla_from_teacher(t.layers[0].attn, tc, c), std::invalid_argument);
    c = default_mla_config(tc, 12);
    c.n_heads = 2;
    CHECK_THROWS_AS(init_mla_from_teacher(t.layers[0].attn, tc, c), std::invalid_argument);
}

TEST_CASE("default configs") {
    const auto c = default_mla_config(fixture::llama_1b_config(), 160);
    CHECK(c.cache_elements_per_token() == 160);
    CHECK(c.d_qk_rope == 32);
    CHECK(c.d_qk_nope == 32);
    CHECK(c.r_kv == 128);
    CHECK(c.r_q == 256);
}

TEST_CASE("yarn scaling") {
    auto c = default_mla_config(fixture::llama_1b_config(), 160);
    CHECK(yarn_scale(c, 1.0) == c);
    CHECK(c.max_positions() == 2048);
    CHECK(yarn_scale(c, 4.0).max_positions() == 8192);
    CHECK(yarn_scale(c, 32.0).max_positions() == 65536);
    CHECK(c.attention_scale() == doctest::Approx(1.0 / 8.0));
    const double m = 0.1 * std::log(4.0) + 1.0;
    CHECK(yarn_scale(c, 4.0).attention_scale() == doctest::Approx(m * m / 8.0));
    CHECK_THROWS_AS(yarn_scale(c, 0.5), std::invalid_argument);
}
