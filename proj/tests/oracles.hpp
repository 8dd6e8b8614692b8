#pragma once

// Independent reference implementations used by the tests. These are written
// as plain loops over the textbook definitions and share no code with the
// optimized kernels.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sknet/ops.hpp"
#include "sknet/tensor.hpp"

namespace oracle {

using sknet::ConvGeometry;
using sknet::Shape;
using sknet::Tensor;

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(s.numel());
    for (auto& x : v) x = u(rng);
    return Tensor(s, std::move(v));
}

/// Seven nested loops: batch, output channel, output row, output column,
/// input channel within the group, kernel row, kernel column.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
    const auto& s = x.shape();
    const long pad = static_cast<long>(g.padding);
    const long k = static_cast<long>(g.kernel);
    const long d = static_cast<long>(g.dilation);
    const long st = static_cast<long>(g.stride);
    const long oh = (static_cast<long>(s.h) + 2 * pad - d * (k - 1) - 1) / st + 1;
    const long ow = (static_cast<long>(s.w) + 2 * pad - d * (k - 1) - 1) / st + 1;
    const std::size_t cin_g = g.in_channels / g.groups;
    const std::size_t cout_g = g.out_channels / g.groups;
    Tensor y(Shape{s.n, g.out_channels, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t co = 0; co < g.out_channels; ++co)
            for (long i = 0; i < oh; ++i)
                for (long j = 0; j < ow; ++j) {
                    const std::size_t grp = co / cout_g;
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < cin_g; ++ci)
                        for (long a = 0; a < k; ++a)
                            for (long b = 0; b < k; ++b) {
                                const long r = i * st - pad + a * d;
                                const long c = j * st - pad + b * d;
                                if (r < 0 || c < 0 || r >= static_cast<long>(s.h) || c >= static_cast<long>(s.w)) continue;
                                acc += x.at(n, grp * cin_g + ci, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) *
                                       w.at(co, ci, static_cast<std::size_t>(a), static_cast<std::size_t>(b));
                            }
                    y.at(n, co, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = acc;
                }
    return y;
}

/// Per-channel mean and biased variance over (n, h, w).
inline void channel_stats(const Tensor& x, std::size_t c, double& mean, double& var) {
    const auto& s = x.shape();
    double sum = 0.0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t h = 0; h < s.h; ++h)
            for (std::size_t w = 0; w < s.w; ++w) sum += x.at(n, c, h, w);
    const double cnt = static_cast<double>(s.n * s.h * s.w);
    mean = sum / cnt;
    double sq = 0.0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t h = 0; h < s.h; ++h)
            for (std::size_t w = 0; w < s.w; ++w) sq += (x.at(n, c, h, w) - mean) * (x.at(n, c, h, w) - mean);
    var = sq / cnt;
}

/// Softmax over m of logits[m][c] computed by the definition.
inline std::vector<double> softmax_column(const std::vector<double>& z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) sum += out[i] = std::exp(z[i] - mx);
    for (auto& v : out) v /= sum;
    return out;
}

} // namespace oracle
