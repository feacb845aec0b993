#include "upcycle/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "upcycle/numerics.hpp"

namespace upcycle {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
    if (a.rank() != 2 || a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(what) + ": logits must be equal-shaped T x V matrices, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
}

// Given a row of student log-probs (overwritten in place with the gradient)
// and the matching teacher log-probs, returns the token KL. Gradient is
// scaled by inv_t.
double kl_row_inplace(std::span<double> ls, std::span<const double> lt, bool reverse, double inv_t) {
    const std::size_t V = ls.size();
    double D = 0;
    if (!reverse) {
        for (std::size_t j = 0; j < V; ++j) D += std::exp(ls[j]) * (ls[j] - lt[j]);
        for (std::size_t j = 0; j < V; ++j) {
            const double p = std::exp(ls[j]);
            ls[j] = p * (ls[j] - lt[j] - D) * inv_t;
        }
    } else {
        for (std::size_t j = 0; j < V; ++j) D += std::exp(lt[j]) * (lt[j] - ls[j]);
        for (std::size_t j = 0; j < V; ++j) ls[j] = (std::exp(ls[j]) - std::exp(lt[j])) * inv_t;
    }
    return D;
}

void log_softmax_row(std::span<double> out, std::span<const double> z) {
    const double lse = logsumexp(z);
    for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] - lse;
}

}  // namespace

LossValueAndGrad kl_naive(const Tensor& z_s, const Tensor& z_t, const LossConfig& cfg) {
    require_same(z_s, z_t, "kl_naive");
    const std::size_t T = z_s.rows();
    LossValueAndGrad r;
    if (T == 0) return r;
    const Tensor ls = log_softmax(z_s);
    const Tensor lt = log_softmax(z_t);
    r.grad = ls;
    double total = 0;
    for (std::size_t t = 0; t < T; ++t) total += kl_row_inplace(r.grad.row(t), lt.row(t), cfg.reverse, 1.0 / T);
    r.value = total / static_cast<double>(T);
    r.peak_elements = ls.size() + lt.size();
    return r;
}

LossValueAndGrad kl_chunked(const Tensor& z_s, const Tensor& z_t, const LossConfig& cfg) {
    require_same(z_s, z_t, "kl_chunked");
    if (cfg.kl_chunk == 0) throw std::invalid_argument("kl_chunked: chunk must be positive");
    const std::size_t T = z_s.rows(), V = z_s.cols(), C = cfg.kl_chunk;
    LossValueAndGrad r;
    if (T == 0) return r;
    // student log-probs are written straight into the gradient rows
    r.grad = Tensor(z_s.shape());
    Tensor teacher({std::min(C, T), V});
    double total = 0;
    for (std::size_t t0 = 0; t0 < T; t0 += C) {
        const std::size_t rows = std::min(C, T - t0);
        for (std::size_t i = 0; i < rows; ++i) {
            log_softmax_row(r.grad.row(t0 + i), z_s.row(t0 + i));
            log_softmax_row(teacher.row(i), z_t.row(t0 + i));
        }
        for (std::size_t i = 0; i < rows; ++i) {
            total += kl_row_inplace(r.grad.row(t0 + i), teacher.row(i), cfg.reverse, 1.0 / T);
        }
    }
    r.value = total / static_cast<double>(T);
    r.peak_elements = teacher.size();
    return r;
}

LossValueAndGrad kl_online(const Tensor& z_s, const Tensor& z_t, const LossConfig& cfg) {
    require_same(z_s, z_t, "kl_online");
    if (cfg.vocab_tile == 0) throw std::invalid_argument("kl_online: vocab tile must be positive");
    const std::size_t T = z_s.rows(), V = z_s.cols(), B = cfg.vocab_tile;
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    LossValueAndGrad r;
    if (T == 0) return r;
    r.grad = Tensor(z_s.shape());
    double total = 0;
    for (std::size_t t = 0; t < T; ++t) {
        const auto s = z_s.row(t);
        const auto u = z_t.row(t);
        // running maxima, partition sums and the weighted log-ratio sum
        double ms = kNegInf, mt = kNegInf, zs = 0, zt = 0, acc = 0;
        for (std::size_t b0 = 0; b0 < V; b0 += B) {
            const std::size_t b1 = std::min(V, b0 + B);
            double tile_s = kNegInf, tile_t = kNegInf;
            for (std::size_t j = b0; j < b1; ++j) {
                tile_s = std::max(tile_s, s[j]);
                tile_t = std::max(tile_t, u[j]);
            }
            const double ns = std::max(ms, tile_s), nt = std::max(mt, tile_t);
            const double rs = ms == kNegInf ? 0.0 : std::exp(ms - ns);
            const double rt = mt == kNegInf ? 0.0 : std::exp(mt - nt);
            zs *= rs;
            zt *= rt;
            acc *= cfg.reverse ? rt : rs;
            for (std::size_t j = b0; j < b1; ++j) {
                const double es = std::exp(s[j] - ns), et = std::exp(u[j] - nt);
                zs += es;
                zt += et;
                acc += cfg.reverse ? et * (u[j] - s[j]) : es * (s[j] - u[j]);
            }
            ms = ns;
            mt = nt;
        }
        const double lse_s = ms + std::log(zs), lse_t = mt + std::log(zt);
        const double D = cfg.reverse ? acc / zt - lse_t + lse_s : acc / zs - lse_s + lse_t;
        total += D;
        auto g = r.grad.row(t);
        for (std::size_t b0 = 0; b0 < V; b0 += B) {
            const std::size_t b1 = std::min(V, b0 + B);
            for (std::size_t j = b0; j < b1; ++j) {
                const double lp = s[j] - lse_s, lq = u[j] - lse_t;
                const double p = std::exp(lp);
                g[j] = (cfg.reverse ? p - std::exp(lq) : p * (lp - lq - D)) / static_cast<double>(T);
            }
        }
    }
    r.value = total / static_cast<double>(T);
    r.peak_elements = 0;
    return r;
}

LossValueAndGrad kl_hidden(const Tensor& h_s, const Tensor& w_s, const Tensor& h_t, const Tensor& w_t,
                           const LossConfig& cfg) {
    if (w_s.rows() != w_t.rows()) {
        throw std::invalid_argument("kl_hidden: student vocabulary " + std::to_string(w_s.rows()) +
                                    " differs from teacher vocabulary " + std::to_string(w_t.rows()));
    }
    if (h_s.cols() != w_s.cols() || h_t.cols() != w_t.cols() || h_s.rows() != h_t.rows()) {
        throw std::invalid_argument("kl_hidden: hidden states do not match the LM head widths");
    }
    if (cfg.kl_chunk == 0) throw std::invalid_argument("kl_hidden: chunk must be positive");
    const std::size_t T = h_s.rows(), V = w_s.rows(), ds = h_s.cols(), C = cfg.kl_chunk;
    LossValueAndGrad r;
    r.grad = Tensor(h_s.shape());
    r.grad_weight = Tensor(w_s.shape());
    if (T == 0) return r;
    Tensor teacher_row({V});
    double total = 0;
    for (std::size_t t0 = 0; t0 < T; t0 += C) {
        const std::size_t rows = std::min(C, T - t0);
        Tensor hs({rows, ds});
        std::copy_n(h_s.row(t0).begin(), rows * ds, hs.data());
        Tensor slice = linear(hs, w_s);  // rows x V, becomes the logit gradient
        r.peak_elements = std::max(r.peak_elements, slice.size());
        for (std::size_t i = 0; i < rows; ++i) {
            auto ls = slice.row(i);
            log_softmax_row(ls, std::span<const double>(ls.data(), V));
            const auto ht = h_t.row(t0 + i);
            for (std::size_t j = 0; j < V; ++j) teacher_row[j] = dot(w_t.row(j), ht);
            log_softmax_row(teacher_row.values(), teacher_row.values());
            total += kl_row_inplace(ls, teacher_row.values(), cfg.reverse, 1.0 / T);
        }
        const Tensor dh = matmul(slice, w_s);
        std::copy_n(dh.data(), dh.size(), r.grad.row(t0).begin());
        add_matmul_tn(r.grad_weight, slice, hs);
    }
    r.value = total / static_cast<double>(T);
    return r;
}

LossValueAndGrad fused_linear_ce(const Tensor& h, const Tensor& w, const std::vector<TokenId>& targets,
                                 const LossConfig& cfg) {
    const std::size_t T = h.rows(), V = w.rows(), d = h.cols(), C = cfg.kl_chunk;
    if (targets.size() != T) throw std::invalid_argument("fused_linear_ce: need one target per row");
    if (w.cols() != d) throw std::invalid_argument("fused_linear_ce: hidden width does not match the LM head");
    if (C == 0) throw std::invalid_argument("fused_linear_ce: chunk must be positive");
    for (std::size_t t = 0; t < T; ++t) {
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V) {
            throw std::out_of_range("fused_linear_ce: target " + std::to_string(targets[t]) + " at row " +
                                    std::to_string(t) + " is outside vocabulary of " + std::to_string(V));
        }
    }
    LossValueAndGrad r;
    r.grad = Tensor(h.shape());
    r.grad_weight = Tensor(w.shape());
    if (T == 0) return r;
    double total = 0;
    const double inv_t = 1.0 / static_cast<double>(T);
    for (std::size_t t0 = 0; t0 < T; t0 += C) {
        const std::size_t rows = std::min(C, T - t0);
        Tensor hs({rows, d});
        std::copy_n(h.row(t0).begin(), rows * d, hs.data());
        Tensor slice = linear(hs, w);
        r.peak_elements = std::max(r.peak_elements, slice.size());
        for (std::size_t i = 0; i < rows; ++i) {
            auto z = slice.row(i);
            const double lse = logsumexp(z);
            const auto y = static_cast<std::size_t>(targets[t0 + i]);
            total += lse - z[y];
            for (double& e : z) e = std::exp(e - lse) * inv_t;
            z[y] -= inv_t;
        }
        const Tensor dh = matmul(slice, w);
        std::copy_n(dh.data(), dh.size(), r.grad.row(t0).begin());
        add_matmul_tn(r.grad_weight, slice, hs);
    }
    r.value = total * inv_t;
    return r;
}

IldResult ild_loss(const std::vector<Tensor>& sh, const std::vector<Tensor>& sa, const std::vector<Tensor>& th,
                   const std::vector<Tensor>& ta) {
    if (sh.size() != th.size() || sa.size() != ta.size() || sh.size() != sa.size()) {
        throw std::invalid_argument("ild_loss: student and teacher layer counts differ");
    }
    IldResult r;
    auto term = [](const Tensor& s, const Tensor& t, std::vector<Tensor>& grads) {
        if (s.shape() != t.shape()) {
            throw std::invalid_argument("ild_loss: activation shapes differ " + shape_str(s.shape()) + " vs " +
                                        shape_str(t.shape()));
        }
        Tensor diff = s;
        for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= t[i];
        const double n = frobenius_norm(diff);
        if (n > 0) {
            scale_inplace(diff, 1.0 / n);
        } else {
            diff.fill(0.0);
        }
        grads.push_back(std::move(diff));
        return n;
    };
    for (std::size_t l = 0; l < sh.size(); ++l) {
        r.value += term(sh[l], th[l], r.d_hidden);
        r.value += term(sa[l], ta[l], r.d_mixer);
    }
    return r;
}

}  // namespace upcycle
