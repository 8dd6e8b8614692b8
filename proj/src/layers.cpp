#include "sknet/layers.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace sknet {

void ParamStore::claim(const std::string& name) {
    if (names_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    names_.emplace(name, names_.size());
}

Param& ParamStore::add_param(const std::string& name, Shape shape, ParamRole role) {
    claim(name);
    Param& p = params_.emplace_back();
    p.name = name;
    p.role = role;
    p.value = Tensor(shape);
    return p;
}

Buffer& ParamStore::add_buffer(const std::string& name, std::size_t size, double initial) {
    claim(name);
    Buffer& b = buffers_.emplace_back();
    b.name = name;
    b.values.assign(size, initial);
    b.initial = initial;
    return b;
}

Param* ParamStore::find_param(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

Buffer* ParamStore::find_buffer(const std::string& name) {
    for (auto& b : buffers_) {
        if (b.name == name) return &b;
    }
    return nullptr;
}

std::uint64_t ParamStore::param_count() const {
    std::uint64_t total = 0;
    for (const auto& p : params_) total += p.value.numel();
    return total;
}

void ParamStore::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : params_) {
        const Shape& s = p.value.shape();
        const double fan_in = static_cast<double>(s.c * s.h * s.w);
        switch (p.role) {
        case ParamRole::conv_weight: {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
            for (auto& v : p.value.data()) v = dist(rng);
            break;
        }
        case ParamRole::fc_weight: {
            const double bound = 1.0 / std::sqrt(fan_in);
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (auto& v : p.value.data()) v = dist(rng);
            break;
        }
        case ParamRole::bn_gamma:
            p.value.fill(1.0);
            break;
        case ParamRole::fc_bias:
        case ParamRole::bn_beta:
        case ParamRole::input:
            p.value.fill(0.0);
            break;
        }
    }
    for (auto& b : buffers_) std::fill(b.values.begin(), b.values.end(), b.initial);
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, const ConvGeometry& geom) : geom_(geom) {
    geom.validate();
    weight_ = &store.add_param(name + ".weight", geom.weight_shape(), ParamRole::conv_weight);
}

Var Conv2d::forward(ForwardContext& ctx, const Var& input) const {
    return ag::conv2d(ctx.tape, input, ctx.tape.param(*weight_), geom_);
}

BatchNorm2d::BatchNorm2d(ParamStore& store, const std::string& name, std::size_t channels) {
    gamma_ = &store.add_param(name + ".gamma", {channels, 1, 1, 1}, ParamRole::bn_gamma);
    beta_ = &store.add_param(name + ".beta", {channels, 1, 1, 1}, ParamRole::bn_beta);
    gamma_->value.fill(1.0);
    mean_ = &store.add_buffer(name + ".running_mean", channels, 0.0);
    var_ = &store.add_buffer(name + ".running_var", channels, 1.0);
}

Var BatchNorm2d::forward(ForwardContext& ctx, const Var& input) const {
    ag::BatchNormBuffers buffers{mean_->values, var_->values};
    return ag::batch_norm(ctx.tape, input, ctx.tape.param(*gamma_), ctx.tape.param(*beta_), buffers, ctx.training);
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in_features, std::size_t out_features,
               bool bias) {
    weight_ = &store.add_param(name + ".weight", {out_features, in_features, 1, 1}, ParamRole::fc_weight);
    if (bias) bias_ = &store.add_param(name + ".bias", {out_features, 1, 1, 1}, ParamRole::fc_bias);
}

Var Linear::forward(ForwardContext& ctx, const Var& input) const {
    Var b = bias_ ? ctx.tape.param(*bias_) : Var{};
    return ag::linear(ctx.tape, input, ctx.tape.param(*weight_), b);
}

} // namespace sknet
