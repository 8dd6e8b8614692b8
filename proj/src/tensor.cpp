#include "sknet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace sknet {

std::string Shape::str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
}

namespace {
void check_dims(const Shape& s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
        throw std::invalid_argument("tensor dimensions must be >= 1, got " + s.str());
    }
}
} // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
    check_dims(shape);
    data_.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    check_dims(shape);
    if (data_.size() != shape.numel()) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape.str());
    }
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
    Tensor t(shape);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data_) v = dist(rng);
    return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    Tensor t(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data_) v = dist(rng);
    return t;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape.numel() != numel()) {
        throw std::invalid_argument("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return Tensor(shape, data_);
}

Tensor Tensor::slice_batch(std::size_t begin, std::size_t count) const {
    if (count == 0 || begin + count > shape_.n) {
        throw std::out_of_range("batch slice out of range");
    }
    const std::size_t stride = shape_.c * shape_.h * shape_.w;
    std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                            data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
    return Tensor({count, shape_.c, shape_.h, shape_.w}, std::move(out));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
    if (other.shape_ != shape_) {
        throw std::invalid_argument("shape mismatch in +=: " + shape_.str() + " vs " + other.shape_.str());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor stack_batch(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("stack_batch: no tensors");
    Shape s = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& ps = p.shape();
        if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
            throw std::invalid_argument("stack_batch: inconsistent shapes " + s.str() + " vs " + ps.str());
        }
        total += ps.n;
    }
    std::vector<double> data;
    data.reserve(total * s.c * s.h * s.w);
    for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
    s.n = total;
    return Tensor(s, std::move(data));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("max_abs_diff: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace sknet
