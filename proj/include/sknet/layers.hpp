#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "sknet/autograd.hpp"

namespace sknet {

/// Non-trainable state saved with a model (BN running statistics).
struct Buffer {
    std::string name;
    std::vector<double> values;
    double initial = 0.0;
};

/// Named registry of every parameter and buffer of a model. Element addresses
/// are stable for the lifetime of the store, so layers hold raw pointers.
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;

    Param& add_param(const std::string& name, Shape shape, ParamRole role);
    Buffer& add_buffer(const std::string& name, std::size_t size, double initial);

    std::deque<Param>& params() { return params_; }
    const std::deque<Param>& params() const { return params_; }
    std::deque<Buffer>& buffers() { return buffers_; }
    const std::deque<Buffer>& buffers() const { return buffers_; }

    Param* find_param(const std::string& name);
    Buffer* find_buffer(const std::string& name);

    /// Total trainable element count.
    std::uint64_t param_count() const;

    /// He-normal conv weights (fan-in), U(-1/sqrt(fan_in), 1/sqrt(fan_in)) fc
    /// weights, zero biases, unit gamma, zero beta; buffers reset to their
    /// initial value. Draws happen in registration order from one seeded stream.
    void initialize(std::uint64_t seed);
    void zero_grad();

private:
    void claim(const std::string& name);

    std::deque<Param> params_;
    std::deque<Buffer> buffers_;
    std::unordered_map<std::string, std::size_t> names_;
};

/// One SK unit's selection weights for a batch, as (n, M*C, 1, 1).
struct AttentionCapture {
    std::string unit;
    std::vector<std::size_t> path_extents;
    Tensor attention;
};

/// Single-threaded append-only record of attention captures.
using AttentionSink = std::vector<AttentionCapture>;

struct ForwardContext {
    Tape& tape;
    bool training = false;
    AttentionSink* sink = nullptr;
    /// When set, stem and unit outputs append (name, shape).
    std::vector<std::pair<std::string, Shape>>* shape_trace = nullptr;
};

class Conv2d {
public:
    Conv2d(ParamStore& store, const std::string& name, const ConvGeometry& geom);
    Var forward(ForwardContext& ctx, const Var& input) const;
    const ConvGeometry& geometry() const { return geom_; }
    Param& weight() const { return *weight_; }

private:
    Param* weight_;
    ConvGeometry geom_;
};

class BatchNorm2d {
public:
    BatchNorm2d(ParamStore& store, const std::string& name, std::size_t channels);
    Var forward(ForwardContext& ctx, const Var& input) const;
    Param& gamma() const { return *gamma_; }
    Param& beta() const { return *beta_; }
    Buffer& running_mean() const { return *mean_; }
    Buffer& running_var() const { return *var_; }

private:
    Param* gamma_;
    Param* beta_;
    Buffer* mean_;
    Buffer* var_;
};

class Linear {
public:
    Linear(ParamStore& store, const std::string& name, std::size_t in_features, std::size_t out_features,
           bool bias);
    Var forward(ForwardContext& ctx, const Var& input) const;
    Param& weight() const { return *weight_; }
    Param* bias() const { return bias_; }

private:
    Param* weight_;
    Param* bias_ = nullptr;
};

} // namespace sknet
