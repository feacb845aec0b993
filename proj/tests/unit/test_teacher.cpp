#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "upcycle/layers.hpp"
#include "upcycle/numerics.hpp"
#include "upcycle/teacher.hpp"

using namespace upcycle;
using oracle::Mat;

namespace {

TransformerConfig toy_config(bool qk_norm = false) {
    TransformerConfig c;
    c.d_model = 32;
    c.n_layers = 4;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.vocab = 64;
    c.mlp_hidden = 48;
    c.qk_norm = qk_norm;
    return c;
}

Mat rms(const Mat& x, const Tensor& gamma, double eps) {
    Mat y = x;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double inv = 1.0 / std::sqrt(x.row(r).squaredNorm() / double(x.cols()) + eps);
        for (Eigen::Index c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) * inv * gamma[std::size_t(c)];
    }
    return y;
}

void rope_rows(Mat& m, Eigen::Index col0, std::size_t dh, double theta) {
    const std::size_t half = dh / 2;
    for (Eigen::Index t = 0; t < m.rows(); ++t) {
        for (std::size_t i = 0; i < half; ++i) {
            const double ang = double(t) * std::pow(theta, -2.0 * double(i) / double(dh));
            const double a = m(t, col0 + Eigen::Index(i)), b = m(t, col0 + Eigen::Index(i + half));
            m(t, col0 + Eigen::Index(i)) = a * std::cos(ang) - b * std::sin(ang);
            m(t, col0 + Eigen::Index(i + half)) = b * std::cos(ang) + a * std::sin(ang);
        }
    }
}

// Straightforward dense reference with KV heads expanded to every query head.
Mat reference_logits(const TeacherCheckpoint& t, const std::vector<TokenId>& tokens) {
    const auto& c = t.config;
    const auto T = Eigen::Index(tokens.size());
    const auto dh = Eigen::Index(c.head_dim);
    Mat x(T, Eigen::Index(c.d_model));
    const Mat emb = oracle::to_eigen(t.embed);
    for (Eigen::Index i = 0; i < T; ++i) x.row(i) = emb.row(tokens[std::size_t(i)]);
    for (const auto& l : t.layers) {
        const Mat h = rms(x, l.attn_norm, c.eps);
        Mat q = h * oracle::to_eigen(l.attn.wq).transpose();
        Mat k = h * oracle::to_eigen(repeat_kv(l.attn.wk, c.head_dim, c.group())).transpose();
        Mat v = h * oracle::to_eigen(repeat_kv(l.attn.wv, c.head_dim, c.group())).transpose();
        Mat o = Mat::Zero(T, q.cols());
        for (Eigen::Index hh = 0; hh < Eigen::Index(c.n_q_heads); ++hh) {
            Mat qh = q.middleCols(hh * dh, dh), kh = k.middleCols(hh * dh, dh);
            if (c.qk_norm) {
                qh = rms(qh, l.attn.q_norm, c.eps);
                kh = rms(kh, l.attn.k_norm, c.eps);
            }
            rope_rows(qh, 0, c.head_dim, c.rope_theta);
            rope_rows(kh, 0, c.head_dim, c.rope_theta);
            Mat s = qh * kh.transpose() / std::sqrt(double(dh));
            for (Eigen::Index i = 0; i < T; ++i) {
                for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = -INFINITY;
                const double mx = s.row(i).maxCoeff();
                s.row(i) = (s.row(i).array() - mx).exp();
                s.row(i) /= s.row(i).sum();
            }
            o.middleCols(hh * dh, dh) = s * v.middleCols(hh * dh, dh);
        }
        x += o * oracle::to_eigen(l.attn.wo).transpose();
        const Mat m = rms(x, l.mlp_norm, c.eps);
        Mat g = m * oracle::to_eigen(l.mlp.gate).transpose();
        const Mat u = m * oracle::to_eigen(l.mlp.up).transpose();
        g = (g.array() / (1.0 + (-g.array()).exp())) * u.array();
        x += g * oracle::to_eigen(l.mlp.down).transpose();
    }
    return rms(x, t.final_norm, c.eps) * oracle::to_eigen(t.lm_head).transpose();
}

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<TokenId> t(n);
    for (auto& id : t) id = TokenId(rng.below(vocab));
    return t;
}

}  // namespace

TEST_CASE("teacher forward matches a dense reference") {
    for (bool qk : {false, true}) {
        const auto t = gen_toy_teacher(toy_config(qk), 5);
        Rng rng(1);
        const auto tokens = random_tokens(rng, 12, 64);
        const auto trace = teacher_forward(t, tokens, true, true);
        REQUIRE(trace.logits.has_value());
        CHECK(oracle::max_abs(oracle::to_eigen(*trace.logits) - reference_logits(t, tokens)) < 1e-9);
        CHECK(trace.hidden_states.size() == 4);
        CHECK(trace.mixer_outputs.size() == 4);
        CHECK(trace.final_hidden.shape() == Shape{12, 32});
    }
}

TEST_CASE("single-token attention is W_O applied to the value") {
    const auto c = toy_config();
    const auto t = gen_toy_teacher(c, 6);
    Rng rng(2);
    const Tensor x = oracle::random_matrix(rng, 1, 32);
    const Tensor out = teacher_attention(t.layers[0].attn, c, x);
    const Tensor v = linear(x, repeat_kv(t.layers[0].attn.wv, c.head_dim, c.group()));
    CHECK(max_abs_diff(out, linear(v, t.layers[0].attn.wo)) < 1e-12);
}

TEST_CASE("teacher attention is causal and normalized") {
    const auto c = toy_config();
    const auto t = gen_toy_teacher(c, 7);
    Rng rng(3);
    auto tokens = random_tokens(rng, 10, 64);
    const auto base = teacher_forward(t, tokens, true, true);
    tokens[6] = (tokens[6] + 1) % 64;
    const auto changed = teacher_forward(t, tokens, true, true);
    for (std::size_t r = 0; r < 6; ++r) {
        for (std::size_t v = 0; v < 64; ++v) CHECK((*base.logits)(r, v) == (*changed.logits)(r, v));
    }
    CHECK((*base.logits)(6, 0) != (*changed.logits)(6, 0));

    Tensor probs;
    teacher_attention(t.layers[1].attn, c, oracle::random_matrix(rng, 10, 32), &probs);
    for (std::size_t h = 0; h < 4; ++h) {
        for (std::size_t i = 0; i < 10; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 10; ++j) {
                const double p = probs[(h * 10 + i) * 10 + j];
                if (j > i) CHECK(p == 0.0);
                s += p;
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("logit-free teacher forward never builds tokens x vocab") {
    const auto t = gen_toy_teacher(toy_config(), 8);
    Rng rng(4);
    const auto tokens = random_tokens(rng, 20, 64);
    AllocationScope scope;
    const auto trace = teacher_forward(t, tokens, false, true);
    CHECK_FALSE(trace.logits.has_value());
    CHECK_FALSE(scope.saw_matrix(20, 64));
}

TEST_CASE("token ids outside the vocabulary are rejected") {
    const auto t = gen_toy_teacher(toy_config(), 9);
    CHECK_THROWS_AS(teacher_forward(t, {1, 64}, true, false), std::out_of_range);
    CHECK_THROWS_AS(teacher_forward(t, {-1}, true, false), std::out_of_range);
}

TEST_CASE("attention backward matches finite differences") {
    Rng rng(10);
    const AttentionShape s{4, 2, 3, 2, 0.7};
    Tensor q = oracle::random_matrix(rng, 3, 12);
    Tensor k = oracle::random_matrix(rng, 5, 6);
    Tensor v = oracle::random_matrix(rng, 5, 4);
    const Tensor dout = oracle::random_matrix(rng, 3, 8);
    Tensor probs;
    causal_attention(q, k, v, s, 2, &probs);
    const auto g = causal_attention_backward(q, k, v, probs, dout, s, 2);
    auto loss = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv) {
        return dot(causal_attention(qq, kk, vv, s, 2).values(), dout.values());
    };
    const double h = 1e-6;
    auto probe = [&](Tensor& which, const Tensor& grad) {
        for (std::size_t i = 0; i < which.size(); ++i) {
            const double keep = which[i];
            which[i] = keep + h;
            const double up = loss(q, k, v);
            which[i] = keep - h;
            const double dn = loss(q, k, v);
            which[i] = keep;
            CHECK(std::abs((up - dn) / (2 * h) - grad[i]) < 1e-7);
        }
    };
    probe(q, g.dq);
    probe(k, g.dk);
    probe(v, g.dv);
}

TEST_CASE("swiglu backward matches finite differences") {
    Rng rng(11);
    MlpWeights w{oracle::random_matrix(rng, 6, 4), oracle::random_matrix(rng, 6, 4), oracle::random_matrix(rng, 4, 6)};
    MlpWeights g{Tensor({6, 4}), Tensor({6, 4}), Tensor({4, 6})};
    Tensor x = oracle::random_matrix(rng, 3, 4);
    const Tensor dy = oracle::random_matrix(rng, 3, 4);
    const Tensor dx = swiglu_backward(w, x, dy, g);
    auto loss = [&] { return dot(swiglu(w, x).values(), dy.values()); };
    const double h = 1e-6;
    auto probe = [&](Tensor& p, const Tensor& grad) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double keep = p[i];
            p[i] = keep + h;
            const double up = loss();
            p[i] = keep - h;
            const double dn = loss();
            p[i] = keep;
            CHECK(std::abs((up - dn) / (2 * h) - grad[i]) < 1e-7);
        }
    };
    probe(x, dx);
    probe(w.gate, g.gate);
    probe(w.up, g.up);
    probe(w.down, g.down);
}
