#include "upcycle/rope.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace upcycle {

std::vector<double> rope_inv_freq(std::size_t dim, double theta, double factor,
                                  std::size_t original_context) {
    if (dim % 2 != 0) throw std::invalid_argument("rope dimension must be even");
    const std::size_t half = dim / 2;
    std::vector<double> inv(half);
    for (std::size_t i = 0; i < half; ++i) {
        inv[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    }
    if (factor <= 1.0 || original_context == 0) return inv;
    for (std::size_t i = 0; i < half; ++i) {
        const double wavelength = 2.0 * std::numbers::pi / inv[i];
        const double rotations = static_cast<double>(original_context) / wavelength;
        // 0 -> fully interpolated, 1 -> untouched
        const double keep = std::clamp((rotations - kYarnBetaSlow) / (kYarnBetaFast - kYarnBetaSlow), 0.0, 1.0);
        inv[i] = (1.0 - keep) * inv[i] / factor + keep * inv[i];
    }
    return inv;
}

double yarn_mscale(double factor) {
    if (factor <= 1.0) return 1.0;
    return 0.1 * std::log(factor) + 1.0;
}

RopeTable::RopeTable(std::size_t dim, double theta, std::size_t max_positions, double factor,
                     std::size_t original_context)
    : dim_(dim), max_positions_(max_positions) {
    const auto inv = rope_inv_freq(dim, theta, factor, original_context);
    const std::size_t half = dim / 2;
    cos_.resize(max_positions * half);
    sin_.resize(max_positions * half);
    for (std::size_t p = 0; p < max_positions; ++p) {
        for (std::size_t i = 0; i < half; ++i) {
            const double a = static_cast<double>(p) * inv[i];
            cos_[p * half + i] = std::cos(a);
            sin_[p * half + i] = std::sin(a);
        }
    }
}

void RopeTable::check(std::size_t pos) const {
    if (pos >= max_positions_) {
        throw std::out_of_range("position " + std::to_string(pos) + " exceeds rope table of " +
                                std::to_string(max_positions_) + " positions");
    }
}

void RopeTable::apply(std::span<double> v, std::size_t pos) const {
    check(pos);
    const std::size_t half = dim_ / 2;
    const double* c = cos_.data() + pos * half;
    const double* s = sin_.data() + pos * half;
    for (std::size_t i = 0; i < half; ++i) {
        const double a = v[i], b = v[i + half];
        v[i] = a * c[i] - b * s[i];
        v[i + half] = b * c[i] + a * s[i];
    }
}

void RopeTable::apply_inverse(std::span<double> v, std::size_t pos) const {
    check(pos);
    const std::size_t half = dim_ / 2;
    const double* c = cos_.data() + pos * half;
    const double* s = sin_.data() + pos * half;
    for (std::size_t i = 0; i < half; ++i) {
        const double a = v[i], b = v[i + half];
        v[i] = a * c[i] + b * s[i];
        v[i + half] = b * c[i] - a * s[i];
    }
}

}  // namespace upcycle
