#include "upcycle/numerics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace upcycle {

namespace {

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(what) + " must be a matrix, got shape " +
                                    shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size();
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

void axpy(std::span<double> a, double alpha, std::span<const double> b) {
    double* __restrict pa = a.data();
    const double* __restrict pb = b.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) pa[i] += alpha * pb[i];
}

double logsumexp(std::span<const double> x) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double s = 0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose input");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw std::invalid_argument("matmul: inner dimensions differ " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    }
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        auto ci = c.row(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            if (av != 0.0) axpy(ci, av, b.row(p));
        }
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(b, "matmul_nt rhs");
    const std::size_t k = a.cols();
    if (b.dim(1) != k) {
        throw std::invalid_argument("matmul_nt: inner dimensions differ " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.rows(), n = b.dim(0);
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        auto ai = a.row(i);
        double* ci = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] = dot(ai, b.row(j));
    }
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    Tensor c({a.cols(), b.cols()});
    add_matmul_tn(c, a, b);
    return c;
}

void add_matmul_tn(Tensor& c, const Tensor& a, const Tensor& b) {
    const std::size_t k = a.rows();
    if (b.rows() != k || c.rows() != a.cols() || c.cols() != b.cols()) {
        throw std::invalid_argument("matmul_tn: shape mismatch " + shape_str(a.shape()) + "^T x " +
                                    shape_str(b.shape()) + " -> " + shape_str(c.shape()));
    }
    const std::size_t m = a.cols();
    for (std::size_t p = 0; p < k; ++p) {
        auto ap = a.row(p);
        auto bp = b.row(p);
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            if (av != 0.0) axpy(c.row(i), av, bp);
        }
    }
}

Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw) {
    add_matmul_tn(dw, dy, x);
    return matmul(dy.reshaped({dy.rows(), dy.cols()}), w);
}

void add_inplace(Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) require_same_shape(a, b, "add_inplace");
    axpy(a.values(), 1.0, b.values());
}

void scale_inplace(Tensor& a, double s) {
    for (double& v : a.values()) v *= s;
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    add_inplace(out, b);
    return out;
}

double frobenius_norm(const Tensor& a) { return std::sqrt(dot(a.values(), a.values())); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_abs(const Tensor& a) {
    double m = 0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gamma, double eps) {
    const std::size_t d = x.cols();
    if (gamma.size() != d) {
        throw std::invalid_argument("rmsnorm: gamma has " + std::to_string(gamma.size()) +
                                    " entries, expected " + std::to_string(d));
    }
    if (!(eps >= 0)) throw std::invalid_argument("rmsnorm: eps must be non-negative");
    Tensor y(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto yr = y.row(r);
        const double ms = dot(xr, xr) / static_cast<double>(d) + eps;
        const double inv = ms > 0 ? 1.0 / std::sqrt(ms) : 0.0;
        for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * gamma[j];
    }
    return y;
}

Tensor rmsnorm_backward(const Tensor& x, const Tensor& gamma, double eps, const Tensor& dy,
                        Tensor& dgamma) {
    const std::size_t d = x.cols();
    Tensor dx(x.shape());
    std::vector<double> u(d);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto gr = dy.row(r);
        auto dr = dx.row(r);
        const double ms = dot(xr, xr) / static_cast<double>(d) + eps;
        const double inv = ms > 0 ? 1.0 / std::sqrt(ms) : 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dgamma[j] += gr[j] * xr[j] * inv;
            u[j] = gr[j] * gamma[j];
        }
        const double proj = dot(u, xr) / static_cast<double>(d);
        const double inv3 = inv * inv * inv;
        for (std::size_t j = 0; j < d; ++j) dr[j] = inv * u[j] - inv3 * xr[j] * proj;
    }
    return dx;
}

Tensor silu(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = silu(x[i]);
    return y;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
    return y;
}

Tensor softplus(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = softplus(x[i]);
    return y;
}

Tensor log_softmax(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto yr = y.row(r);
        const double lse = logsumexp(xr);
        for (std::size_t j = 0; j < xr.size(); ++j) yr[j] = xr[j] - lse;
    }
    return y;
}

Tensor softmax(const Tensor& x) {
    Tensor y = log_softmax(x);
    for (double& v : y.values()) v = std::exp(v);
    return y;
}

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, const Tensor* history) {
    const std::size_t t_len = x.rows(), c = x.cols();
    require_matrix(kernel, "conv kernel");
    if (kernel.dim(0) != c) {
        throw std::invalid_argument("causal_conv1d: kernel has " + std::to_string(kernel.dim(0)) +
                                    " channels, input has " + std::to_string(c));
    }
    const std::size_t w = kernel.dim(1);
    if (history && (history->cols() != c || history->rows() != w - 1)) {
        throw std::invalid_argument("causal_conv1d: history must be " + std::to_string(w - 1) +
                                    " x " + std::to_string(c));
    }
    Tensor y({t_len, c});
    for (std::size_t t = 0; t < t_len; ++t) {
        auto yt = y.row(t);
        for (std::size_t k = 0; k < w; ++k) {
            // tap k reads position t - (w-1) + k
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(w - 1);
            std::span<const double> xs;
            if (src >= 0) {
                xs = x.row(static_cast<std::size_t>(src));
            } else if (history) {
                xs = history->row(static_cast<std::size_t>(static_cast<std::ptrdiff_t>(w - 1) + src));
            } else {
                continue;
            }
            for (std::size_t ch = 0; ch < c; ++ch) yt[ch] += kernel(ch, k) * xs[ch];
        }
    }
    return y;
}

Tensor causal_conv1d_backward(const Tensor& x, const Tensor& kernel, const Tensor& dy,
                              Tensor& dkernel, const Tensor* history) {
    const std::size_t t_len = x.rows(), c = x.cols(), w = kernel.dim(1);
    Tensor dx({t_len, c});
    for (std::size_t t = 0; t < t_len; ++t) {
        auto gt = dy.row(t);
        for (std::size_t k = 0; k < w; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(w - 1);
            if (src >= 0) {
                auto xs = x.row(static_cast<std::size_t>(src));
                auto ds = dx.row(static_cast<std::size_t>(src));
                for (std::size_t ch = 0; ch < c; ++ch) {
                    dkernel(ch, k) += gt[ch] * xs[ch];
                    ds[ch] += gt[ch] * kernel(ch, k);
                }
            } else if (history) {
                auto xs = history->row(static_cast<std::size_t>(static_cast<std::ptrdiff_t>(w - 1) + src));
                for (std::size_t ch = 0; ch < c; ++ch) dkernel(ch, k) += gt[ch] * xs[ch];
            }
        }
    }
    return dx;
}

namespace {

// Replaces every row not flagged valid with a unit vector orthogonal to all
// other rows (Gram-Schmidt over the standard basis).
void complete_orthonormal(Tensor& cols, std::size_t count, const std::vector<bool>& valid) {
    const std::size_t p = cols.cols();
    std::size_t candidate = 0;
    for (std::size_t i = 0; i < count; ++i) {
        if (valid[i]) continue;
        auto target = cols.row(i);
        while (true) {
            if (candidate >= p) throw std::runtime_error("svd: cannot complete orthonormal basis");
            std::fill(target.begin(), target.end(), 0.0);
            target[candidate++] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t j = 0; j < count; ++j) {
                    if (j == i || (!valid[j] && j > i)) continue;
                    auto other = cols.row(j);
                    axpy(target, -dot(target, other), other);
                }
            }
            const double nrm = std::sqrt(dot(target, target));
            if (nrm > 0.5) {
                for (double& v : target) v /= nrm;
                break;
            }
        }
    }
}

}  // namespace

SvdResult svd(const Tensor& a, std::size_t rank) {
    require_matrix(a, "svd input");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (m == 0 || n == 0) throw std::invalid_argument("svd: empty matrix");
    if (rank < 1 || rank > std::min(m, n)) {
        throw std::invalid_argument("svd: rank " + std::to_string(rank) + " outside [1, " +
                                    std::to_string(std::min(m, n)) + "]");
    }
    if (!a.all_finite()) throw std::invalid_argument("svd: input contains non-finite values");

    // Work on B (p x q, p >= q); columns of B are the rows of g.
    const bool tall = m >= n;
    Tensor g = tall ? transpose(a) : a;
    const std::size_t q = g.dim(0), p = g.dim(1);
    Tensor vt({q, q});
    for (std::size_t i = 0; i < q; ++i) vt(i, i) = 1.0;

    constexpr double tol = 1e-15;
    for (int sweep = 0; sweep < 80; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < q; ++i) {
            for (std::size_t j = i + 1; j < q; ++j) {
                auto gi = g.row(i);
                auto gj = g.row(j);
                const double alpha = dot(gi, gi);
                const double beta = dot(gj, gj);
                const double gamma = dot(gi, gj);
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < p; ++k) {
                    const double x = gi[k], y = gj[k];
                    gi[k] = c * x - s * y;
                    gj[k] = s * x + c * y;
                }
                auto vi = vt.row(i);
                auto vj = vt.row(j);
                for (std::size_t k = 0; k < q; ++k) {
                    const double x = vi[k], y = vj[k];
                    vi[k] = c * x - s * y;
                    vj[k] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sig(q);
    for (std::size_t i = 0; i < q; ++i) sig[i] = std::sqrt(dot(g.row(i), g.row(i)));
    std::vector<std::size_t> order(q);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

    const double smax = sig[order[0]];
    const double cutoff = smax * 1e-13;
    Tensor ub({q, p});  // left vectors of B, one per row
    Tensor vb({q, q});  // right vectors of B, one per row
    Tensor sigma({rank});
    std::vector<bool> valid(q);
    for (std::size_t r = 0; r < q; ++r) {
        const std::size_t src = order[r];
        const double s = sig[src];
        valid[r] = s > cutoff && s > 0.0;
        if (valid[r]) {
            auto dst = ub.row(r);
            auto gs = g.row(src);
            for (std::size_t k = 0; k < p; ++k) dst[k] = gs[k] / s;
        }
        std::copy(vt.row(src).begin(), vt.row(src).end(), vb.row(r).begin());
        if (r < rank) sigma[r] = valid[r] ? s : 0.0;
    }
    complete_orthonormal(ub, q, valid);

    // A = B (tall) or A = B^T (wide).
    const Tensor& left = tall ? ub : vb;   // rows: left singular vectors of A
    const Tensor& right = tall ? vb : ub;  // rows: right singular vectors of A
    SvdResult out{Tensor({m, rank}), std::move(sigma), Tensor({n, rank})};
    for (std::size_t r = 0; r < rank; ++r) {
        auto lv = left.row(r);
        auto rv = right.row(r);
        std::size_t arg = 0;
        for (std::size_t k = 1; k < lv.size(); ++k) {
            if (std::abs(lv[k]) > std::abs(lv[arg])) arg = k;
        }
        const double sign = lv[arg] < 0 ? -1.0 : 1.0;
        for (std::size_t k = 0; k < m; ++k) out.u(k, r) = sign * lv[k];
        for (std::size_t k = 0; k < n; ++k) out.v(k, r) = sign * rv[k];
    }
    return out;
}

Tensor svd_reconstruct(const SvdResult& s) {
    Tensor us = s.u;
    for (std::size_t i = 0; i < us.dim(0); ++i)
        for (std::size_t r = 0; r < us.dim(1); ++r) us(i, r) *= s.sigma[r];
    return matmul_nt(us, s.v);
}

Tensor repeat_kv(const Tensor& w, std::size_t head_dim, std::size_t group) {
    if (group < 1) throw std::invalid_argument("repeat_kv: group must be >= 1");
    require_matrix(w, "repeat_kv input");
    if (head_dim == 0 || w.dim(0) % head_dim != 0) {
        throw std::invalid_argument("repeat_kv: " + std::to_string(w.dim(0)) +
                                    " rows are not a whole number of heads of size " +
                                    std::to_string(head_dim));
    }
    const std::size_t heads = w.dim(0) / head_dim, cols = w.dim(1);
    Tensor out({heads * group * head_dim, cols});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t rep = 0; rep < group; ++rep) {
            const std::size_t dst_head = h * group + rep;
            for (std::size_t r = 0; r < head_dim; ++r) {
                auto src = w.row(h * head_dim + r);
                std::copy(src.begin(), src.end(), out.row(dst_head * head_dim + r).begin());
            }
        }
    }
    return out;
}

}  // namespace upcycle
