#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace upcycle {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array. Values are held in double precision; the on-disk
// container stores IEEE-754 binary32.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> values);
    Tensor(std::initializer_list<std::size_t> shape) : Tensor(Shape(shape)) {}

    Tensor(const Tensor& other);
    Tensor(Tensor&& other) noexcept = default;
    Tensor& operator=(const Tensor& other);
    Tensor& operator=(Tensor&& other) noexcept = default;

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // 2-D views. rows() is the product of all leading axes.
    std::size_t rows() const;
    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    Tensor reshaped(Shape shape) const;
    void fill(double v);
    bool all_finite() const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor zeros_like(const Tensor& t);

// Observes every Tensor allocation on the current thread while alive.
// Used to audit that logit-free paths never materialize tokens x vocab
// buffers.
class AllocationScope {
public:
    AllocationScope();
    ~AllocationScope();
    AllocationScope(const AllocationScope&) = delete;
    AllocationScope& operator=(const AllocationScope&) = delete;

    std::size_t largest_elements() const { return largest_; }
    std::size_t allocations() const { return count_; }
    // True if any tensor with exactly this 2-D shape was allocated.
    bool saw_matrix(std::size_t rows, std::size_t cols) const;
    // Number of allocations holding at least `elements` values.
    std::size_t count_at_least(std::size_t elements) const;

    void record(const Shape& shape);

private:
    AllocationScope* prev_ = nullptr;
    std::size_t largest_ = 0;
    std::size_t count_ = 0;
    std::vector<Shape> shapes_;
};

}  // namespace upcycle
