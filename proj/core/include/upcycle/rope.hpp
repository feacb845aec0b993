#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace upcycle {

// YaRN "NTK-by-parts" defaults: ramp bounds on the number of rotations a
// frequency completes over the original context.
inline constexpr double kYarnBetaFast = 32.0;
inline constexpr double kYarnBetaSlow = 1.0;

// Inverse rotary frequencies for a `dim`-wide rotary slice. With factor > 1
// the frequencies are blended between interpolated (theta_i / factor) and
// original per the YaRN ramp.
std::vector<double> rope_inv_freq(std::size_t dim, double theta, double factor,
                                  std::size_t original_context);

// YaRN attention temperature: 0.1 ln(s) + 1 for s > 1, else 1.
double yarn_mscale(double factor);

// Precomputed cos/sin for rotate-half RoPE: pairs (i, i + dim/2).
class RopeTable {
public:
    RopeTable() = default;
    RopeTable(std::size_t dim, double theta, std::size_t max_positions, double factor = 1.0,
              std::size_t original_context = 0);

    std::size_t dim() const { return dim_; }
    std::size_t max_positions() const { return max_positions_; }

    // Rotates v (length dim) in place to position pos; throws past the table.
    void apply(std::span<double> v, std::size_t pos) const;
    // Transpose of apply (rotation by -angle); used in backward passes.
    void apply_inverse(std::span<double> v, std::size_t pos) const;

private:
    void check(std::size_t pos) const;

    std::size_t dim_ = 0;
    std::size_t max_positions_ = 0;
    std::vector<double> cos_;
    std::vector<double> sin_;
};

}  // namespace upcycle
