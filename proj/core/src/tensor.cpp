#include "upcycle/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace upcycle {

namespace {
thread_local AllocationScope* g_scope = nullptr;

void note_allocation(const Shape& shape) {
    if (g_scope != nullptr) g_scope->record(shape);
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {
    note_allocation(shape_);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_numel(shape_) != data_.size()) {
        throw std::invalid_argument("tensor shape " + shape_str(shape_) + " does not match " +
                                    std::to_string(data_.size()) + " values");
    }
    note_allocation(shape_);
}

Tensor::Tensor(const Tensor& other) : shape_(other.shape_), data_(other.data_) {
    note_allocation(shape_);
}

Tensor& Tensor::operator=(const Tensor& other) {
    if (this != &other) {
        shape_ = other.shape_;
        data_ = other.data_;
        note_allocation(shape_);
    }
    return *this;
}

std::size_t Tensor::rows() const {
    if (shape_.empty()) return 0;
    return data_.size() / shape_.back();
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

AllocationScope::AllocationScope() : prev_(g_scope) { g_scope = this; }

AllocationScope::~AllocationScope() { g_scope = prev_; }

void AllocationScope::record(const Shape& shape) {
    const std::size_t n = shape_numel(shape);
    largest_ = std::max(largest_, n);
    ++count_;
    shapes_.push_back(shape);
}

bool AllocationScope::saw_matrix(std::size_t rows, std::size_t cols) const {
    for (const auto& s : shapes_) {
        if (s.size() == 2 && s[0] == rows && s[1] == cols) return true;
    }
    return false;
}

std::size_t AllocationScope::count_at_least(std::size_t elements) const {
    std::size_t n = 0;
    for (const auto& s : shapes_) {
        if (shape_numel(s) >= elements) ++n;
    }
    return n;
}

}  // namespace upcycle
