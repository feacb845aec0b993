#pragma once

// Reference implementations used only by tests. Written as plain loops over
// Eigen matrices, independent of the library kernels they check.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "upcycle/checkpoint.hpp"
#include "upcycle/tensor.hpp"

namespace oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat to_eigen(const upcycle::Tensor& t) {
    Mat m(t.rows(), t.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t(r, c);
    return m;
}

inline upcycle::Tensor from_eigen(const Mat& m) {
    upcycle::Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) t(r, c) = m(r, c);
    return t;
}

inline upcycle::Tensor random_matrix(upcycle::Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    upcycle::Tensor t({rows, cols});
    for (double& v : t.values()) v = rng.uniform(-scale, scale);
    return t;
}

inline double max_abs(const Mat& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace oracle
