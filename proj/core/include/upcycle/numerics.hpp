#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "upcycle/tensor.hpp"

namespace upcycle {

// ---- scalar activations -------------------------------------------------

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double silu(double x) { return x * sigmoid(x); }

inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

double dot(std::span<const double> a, std::span<const double> b);
// a += alpha * b
void axpy(std::span<double> a, double alpha, std::span<const double> b);
double logsumexp(std::span<const double> x);

// ---- dense linear algebra ----------------------------------------------

Tensor transpose(const Tensor& a);
// (m x k) . (k x n)
Tensor matmul(const Tensor& a, const Tensor& b);
// (m x k) . (n x k)^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// (k x m)^T . (k x n)
Tensor matmul_tn(const Tensor& a, const Tensor& b);
// c += a^T . b
void add_matmul_tn(Tensor& c, const Tensor& a, const Tensor& b);

// y = x W^T for a weight W stored (out x in).
inline Tensor linear(const Tensor& x, const Tensor& w) { return matmul_nt(x, w); }
// Returns dx and accumulates dW += dy^T x.
Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw);

void add_inplace(Tensor& a, const Tensor& b);
void scale_inplace(Tensor& a, double s);
Tensor add(const Tensor& a, const Tensor& b);

double frobenius_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);

// ---- normalization and activations -------------------------------------

Tensor rmsnorm(const Tensor& x, const Tensor& gamma, double eps);
// Returns dx and accumulates dgamma.
Tensor rmsnorm_backward(const Tensor& x, const Tensor& gamma, double eps, const Tensor& dy,
                        Tensor& dgamma);

Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

// Depthwise causal convolution. x: T x c, kernel: c x W (W = 4 in all
// callers). history, when given, holds the W-1 rows preceding x.
Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, const Tensor* history = nullptr);
// Returns dx and accumulates dkernel. history contributes only to dkernel.
Tensor causal_conv1d_backward(const Tensor& x, const Tensor& kernel, const Tensor& dy,
                              Tensor& dkernel, const Tensor* history = nullptr);

// ---- factorizations and head bookkeeping --------------------------------

struct SvdResult {
    Tensor u;      // m x r, orthonormal columns
    Tensor sigma;  // r, non-increasing
    Tensor v;      // n x r, orthonormal columns
};

// Truncated SVD by one-sided Jacobi. Each column of U is sign-normalized so
// its largest-magnitude entry is positive.
SvdResult svd(const Tensor& a, std::size_t rank);

// U diag(sigma) V^T
Tensor svd_reconstruct(const SvdResult& s);

// Replicates each head block of `head_dim` rows `group` times:
// [b0; b1] -> [b0; b0; b1; b1] for group 2.
Tensor repeat_kv(const Tensor& w, std::size_t head_dim, std::size_t group);

}  // namespace upcycle
