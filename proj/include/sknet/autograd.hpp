#pragma once

// Reverse-mode differentiation over the kernels in ops.hpp.
//
// A Tape records each primitive application in execution order. Values are
// reference counted, so a non-recording tape (inference) frees intermediates
// as soon as the caller drops them. Replaying the tape backward in reverse
// order visits every node after all of its consumers.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sknet/ops.hpp"
#include "sknet/tensor.hpp"

namespace sknet {

enum class ParamRole { conv_weight, fc_weight, fc_bias, bn_gamma, bn_beta, input };

/// A trainable array with a gradient slot. Gradients accumulate until zero_grad().
struct Param {
    std::string name;
    ParamRole role = ParamRole::input;
    Tensor value;
    Tensor grad;

    void ensure_grad();
    void zero_grad();
    /// Weight decay applies to conv and fc weights only.
    bool decays() const { return role == ParamRole::conv_weight || role == ParamRole::fc_weight; }
};

namespace detail {
struct Node;
}

class Var {
public:
    Var() = default;
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    /// Gradient accumulated by the last backward pass; empty when none flowed.
    const Tensor& grad() const;
    bool valid() const { return static_cast<bool>(node_); }

private:
    friend class Tape;
    explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

/// Receives the output gradient and one slot per input (null when that input
/// does not require a gradient). Slots are zero-initialized and must be accumulated into.
using BackwardFn = std::function<void(const Tensor& grad_output, std::span<Tensor*> input_grads)>;

class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }

    Var constant(Tensor value);
    /// Input whose gradient is readable through Var::grad() after backward.
    Var leaf(Tensor value);
    /// Parameter leaf; gradients accumulate into param.grad.
    Var param(Param& param);

    /// Records a primitive. When nothing requires a gradient or the tape is not
    /// recording, only the value is kept.
    Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

    /// Seed must match the output shape. Throws std::logic_error if called
    /// twice without reset().
    void backward(const Var& output, const Tensor& seed);
    /// Scalar output, seed 1.
    void backward(const Var& output);
    void reset();

    std::size_t size() const { return nodes_.size(); }

    /// When enabled, non-smooth primitives (ReLU masks, max-pool winners) fold
    /// their branch choices into a 64-bit signature. Two evaluations with equal
    /// signatures ran on the same smooth piece of the graph.
    void track_branches(bool on) { track_ = on; }
    bool tracking_branches() const { return track_; }
    void note_branch(std::uint64_t word) { signature_ = (signature_ ^ word) * 0x100000001b3ULL; }
    std::uint64_t branch_signature() const { return signature_; }

private:
    bool recording_;
    bool replayed_ = false;
    bool track_ = false;
    std::uint64_t signature_ = 0xcbf29ce484222325ULL;
    std::vector<std::shared_ptr<detail::Node>> nodes_;
};

namespace ag {

Var conv2d(Tape& tape, const Var& input, const Var& weight, const ConvGeometry& geom);

struct BatchNormBuffers {
    std::span<double> running_mean;
    std::span<double> running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;
};
Var batch_norm(Tape& tape, const Var& input, const Var& gamma, const Var& beta, const BatchNormBuffers& buffers,
               bool training);

Var relu(Tape& tape, const Var& input);
Var sigmoid(Tape& tape, const Var& input);
Var global_avg_pool(Tape& tape, const Var& input);
Var max_pool2d(Tape& tape, const Var& input, std::size_t kernel, std::size_t stride, std::size_t padding);
/// bias may be an invalid Var for a bias-free layer.
Var linear(Tape& tape, const Var& input, const Var& weight, const Var& bias = Var{});
Var softmax_over_paths(Tape& tape, const Var& logits, std::size_t paths);
Var weighted_path_sum(Tape& tape, const std::vector<Var>& paths, const Var& attention);
Var channel_scale(Tape& tape, const Var& input, const Var& gate);
Var add(Tape& tape, const Var& a, const Var& b);
Var sum(Tape& tape, const std::vector<Var>& terms);
Var scale(Tape& tape, const Var& a, double s);
Var concat_channels(Tape& tape, const std::vector<Var>& parts);
/// Scalar sum(input * weights); the standard probe for gradient checks.
Var dot(Tape& tape, const Var& input, const Tensor& weights);

} // namespace ag

struct GradCheckEntry {
    std::string name;
    std::size_t count = 0;
    double max_rel_error = 0.0;
    /// Element attaining max_rel_error, with both estimates there.
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    /// Elements whose +-step interval crossed a ReLU or max-pool branch change
    /// and were re-measured with a smaller step.
    std::size_t refined = 0;
};

struct GradCheckReport {
    double step = 1e-5;
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const;
    std::string to_json() const;
};

/// |a - n| / max(|a|, |n|, 1e-8)
double gradient_rel_error(double analytic, double numeric);

/// Builds the scalar-output graph on the supplied tape.
using ScalarGraph = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients with central finite differences for every
/// element of every listed parameter. The graph must reference the parameters
/// through Tape::param. When the +-step evaluations land on a different branch
/// of a ReLU or max-pool than the unperturbed point, the difference quotient
/// spans a kink and is retaken with the step divided by 10, up to three times.
/// Throws std::domain_error on non-finite values.
GradCheckReport grad_check(const ScalarGraph& graph, std::span<Param* const> params, double step = 1e-5);

} // namespace sknet
