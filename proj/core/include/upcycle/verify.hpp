#pragma once

#include <string>
#include <vector>

#include "upcycle/hybrid.hpp"

namespace upcycle {

struct VerifyCheck {
    std::string name;
    bool passed = false;
    double value = 0;      // measured error (or count)
    double tolerance = 0;  // pass threshold for value
    std::string detail;
};

struct VerifyOptions {
    std::uint64_t seed = 0;
    std::size_t tokens = 96;
    std::size_t decode_steps = 64;
    std::size_t probes = 32;
};

// Invariant suite for a converted model against its teacher: SVD
// reconstruction of every teacher layer, chunked vs sequential GDN,
// KL path agreement, a KD gradient audit, prefill/decode consistency and
// the MLA cache size.
std::vector<VerifyCheck> verify_suite(const HybridModel& model, const TeacherCheckpoint& teacher,
                                      const VerifyOptions& opts = {});

// Worst relative Frobenius error of the full-rank factorizations of W_Q and
// the repeated [W_K; W_V] stack over all teacher layers.
double svd_reconstruction_error(const TeacherCheckpoint& teacher);

// max |a - b| / max |b|
double max_relative_error(const Tensor& a, const Tensor& b);

}  // namespace upcycle
