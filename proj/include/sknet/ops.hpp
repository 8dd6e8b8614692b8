#pragma once

// Forward and backward kernels for the dense primitives. Every function here is
// pure: inputs are read-only and results are returned (or written to caller
// provided gradient buffers). Reductions run in a fixed order so results are
// bit-reproducible.

#include <optional>
#include <span>
#include <vector>

#include "sknet/tensor.hpp"

namespace sknet {

struct ConvGeometry {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 1;
    std::size_t dilation = 1;
    std::size_t groups = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    /// Geometry with padding D*(k-1)/2, which preserves spatial size at stride 1.
    static ConvGeometry same(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                             std::size_t stride = 1, std::size_t groups = 1, std::size_t dilation = 1);

    std::size_t extent() const { return dilation * (kernel - 1) + 1; }
    std::size_t output_size(std::size_t input) const;
    Shape weight_shape() const { return {out_channels, in_channels / groups, kernel, kernel}; }
    std::size_t weight_count() const { return out_channels * (in_channels / groups) * kernel * kernel; }

    /// Throws std::invalid_argument on zero sizes, even kernels or channel counts not divisible by groups.
    void validate() const;
    bool operator==(const ConvGeometry&) const = default;
};

/// Grouped, dilated, strided cross-correlation without bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, const ConvGeometry& geom);

/// Accumulates gradients into grad_input / grad_weight when non-null.
void conv2d_backward(const Tensor& input, const Tensor& weight, const ConvGeometry& geom, const Tensor& grad_output,
                     Tensor* grad_input, Tensor* grad_weight);

struct BatchNormState {
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;

    explicit BatchNormState(std::size_t channels);
    std::size_t channels() const { return gamma.size(); }
};

/// Non-owning view so parameters can live in a registry.
struct BatchNormView {
    std::span<const double> gamma;
    std::span<const double> beta;
    std::span<double> running_mean;
    std::span<double> running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;
};

BatchNormView view_of(BatchNormState& state);

/// Saved activations needed by batch_norm_backward.
struct BatchNormCache {
    Tensor normalized;
    std::vector<double> inv_std;
    bool training = false;
};

/// Training mode normalizes with biased batch statistics over (n, h, w) and
/// updates the running estimates (unbiased variance); inference uses the running
/// estimates. Training mode requires at least two values per channel.
Tensor batch_norm(const Tensor& input, const BatchNormView& bn, bool training, BatchNormCache* cache = nullptr);
Tensor batch_norm(const Tensor& input, BatchNormState& state, bool training, BatchNormCache* cache = nullptr);

/// Returns grad_input; accumulates into grad_gamma / grad_beta when non-empty.
Tensor batch_norm_backward(const Tensor& grad_output, std::span<const double> gamma, const BatchNormCache& cache,
                           std::span<double> grad_gamma, std::span<double> grad_beta);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_output);

Tensor sigmoid(const Tensor& input);
Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_output);

/// (n, c, h, w) -> (n, c, 1, 1) spatial mean.
Tensor global_avg_pool(const Tensor& input);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_output);

struct MaxPoolResult {
    Tensor output;
    std::vector<std::size_t> argmax;  // flat input index per output element
};
MaxPoolResult max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t padding);
Tensor max_pool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                           const Tensor& grad_output);

/// Single-vector fc: weight is (out, in, 1, 1).
std::vector<double> fully_connected(std::span<const double> input, const Tensor& weight,
                                    std::optional<std::span<const double>> bias = std::nullopt);

/// Batched fc. Each sample's (c, h, w) block is flattened to the input vector;
/// output is (n, out, 1, 1).
Tensor linear(const Tensor& input, const Tensor& weight, std::optional<std::span<const double>> bias = std::nullopt);
void linear_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_output, Tensor* grad_input,
                     Tensor* grad_weight, std::span<double> grad_bias);

/// logits is (n, M*C, 1, 1) with entry m*C + c. Softmax runs over m for each
/// (sample, channel) with max subtraction. Throws on non-finite logits.
Tensor softmax_over_paths(const Tensor& logits, std::size_t paths);
Tensor softmax_over_paths_backward(const Tensor& output, const Tensor& grad_output, std::size_t paths);

/// V_c = sum_m att[m][c] * paths[m]_c.
Tensor weighted_path_sum(std::span<const Tensor> paths, const Tensor& attention);
void weighted_path_sum_backward(std::span<const Tensor> paths, const Tensor& attention, const Tensor& grad_output,
                                std::span<Tensor> grad_paths, Tensor* grad_attention);

/// x * gate, gate is (n, c, 1, 1).
Tensor channel_scale(const Tensor& input, const Tensor& gate);
void channel_scale_backward(const Tensor& input, const Tensor& gate, const Tensor& grad_output, Tensor* grad_input,
                            Tensor* grad_gate);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Concatenate along channels; all inputs share n, h, w.
Tensor concat_channels(std::span<const Tensor> parts);

} // namespace sknet
