#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sknet {

/// Rank-4 extent in batch, channel, row, column order.
struct Shape {
    std::size_t n = 1;
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;

    std::size_t numel() const { return n * c * h * w; }
    std::size_t plane() const { return h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

/// Dense NCHW tensor of doubles. Every dimension is at least one.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(shape); }
    static Tensor full(Shape shape, double v) { return Tensor(shape, v); }
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
    static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[index(n, c, h, w)]; }
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const { return data_[index(n, c, h, w)]; }

    /// Pointer to the start of one (n, c) spatial plane.
    double* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
    const double* plane(std::size_t n, std::size_t c) const {
        return data_.data() + (n * shape_.c + c) * shape_.plane();
    }

    /// Same data, different shape with equal element count.
    Tensor reshaped(Shape shape) const;
    /// Samples [begin, begin + count) along the batch axis.
    Tensor slice_batch(std::size_t begin, std::size_t count) const;

    void fill(double v);
    Tensor& operator+=(const Tensor& other);

    bool operator==(const Tensor& other) const { return shape_ == other.shape_ && data_ == other.data_; }

private:
    Shape shape_{0, 0, 0, 0};
    std::vector<double> data_;
};

/// Concatenate along the batch axis; all inputs share c, h, w.
Tensor stack_batch(std::span<const Tensor> parts);

double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace sknet
