#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace timegci::nd {

// Dense row-major tensor of doubles. Everything in this library is a vector
// or a matrix; rank is whatever the shape says.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), data_(std::move(values)) {
        if (element_count(shape_) != data_.size()) {
            throw std::invalid_argument("Tensor: shape does not match value count");
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = value;
        return t;
    }

    static Tensor from_vector(std::vector<double> values) {
        std::vector<std::size_t> shape{values.size()};
        return Tensor(std::move(shape), std::move(values));
    }

    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? shape_[0] : throw_rank()); }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? 1 : throw_rank()); }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }

    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
    }
    std::span<double> row(std::size_t r) {
        return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
    }

    bool all_finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(double value) {
        for (auto& x : data_) x = value;
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

private:
    [[noreturn]] static std::size_t throw_rank() { throw std::logic_error("Tensor: rows/cols on rank>2 tensor"); }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace timegci::nd
