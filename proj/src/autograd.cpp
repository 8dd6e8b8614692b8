#include "sknet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace sknet {

void Param::ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
}

void Param::zero_grad() {
    if (grad.shape() != value.shape()) {
        grad = Tensor(value.shape());
    } else {
        grad.fill(0.0);
    }
}

namespace detail {

struct Node {
    Tensor own_value;
    Param* param = nullptr;
    bool requires_grad = false;
    Tensor own_grad;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;

    const Tensor& value() const { return param ? param->value : own_value; }

    bool has_grad() const { return param ? !param->grad.empty() : !own_grad.empty(); }

    Tensor& grad_slot() {
        if (param) {
            param->ensure_grad();
            return param->grad;
        }
        if (own_grad.empty()) own_grad = Tensor(value().shape());
        return own_grad;
    }
};

} // namespace detail

const Tensor& Var::value() const {
    if (!node_) throw std::logic_error("Var::value on empty Var");
    return node_->value();
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

const Tensor& Var::grad() const {
    static const Tensor empty;
    if (!node_) return empty;
    if (node_->param) return node_->param->grad;
    return node_->own_grad;
}

Var Tape::constant(Tensor value) {
    auto node = std::make_shared<detail::Node>();
    node->own_value = std::move(value);
    return Var(node);
}

Var Tape::leaf(Tensor value) {
    auto node = std::make_shared<detail::Node>();
    node->own_value = std::move(value);
    node->requires_grad = recording_;
    if (recording_) nodes_.push_back(node);
    return Var(node);
}

Var Tape::param(Param& p) {
    auto node = std::make_shared<detail::Node>();
    node->param = &p;
    node->requires_grad = recording_;
    if (recording_) {
        p.ensure_grad();
        nodes_.push_back(node);
    }
    return Var(node);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    auto node = std::make_shared<detail::Node>();
    node->own_value = std::move(value);
    if (!recording_) return Var(node);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return Var(node);
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(std::move(in.node_));
    node->backward = std::move(backward);
    nodes_.push_back(node);
    return Var(node);
}

void Tape::backward(const Var& output, const Tensor& seed) {
    if (replayed_) throw std::logic_error("tape already replayed; call reset() before another backward pass");
    if (!output.node_) throw std::invalid_argument("backward on empty Var");
    if (seed.shape() != output.shape()) {
        throw std::invalid_argument("backward seed shape " + seed.shape().str() + " does not match output " +
                                    output.shape().str());
    }
    replayed_ = true;
    if (!output.requires_grad()) return;
    output.node_->grad_slot() += seed;

    std::vector<Tensor> scratch;
    std::vector<Tensor*> slots;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        detail::Node& node = **it;
        if (!node.backward || !node.has_grad()) continue;
        const std::size_t k = node.inputs.size();
        scratch.assign(k, Tensor{});
        slots.assign(k, nullptr);
        for (std::size_t i = 0; i < k; ++i) {
            if (node.inputs[i]->requires_grad) {
                scratch[i] = Tensor(node.inputs[i]->value().shape());
                slots[i] = &scratch[i];
            }
        }
        node.backward(node.grad_slot(), slots);
        for (std::size_t i = 0; i < k; ++i) {
            if (slots[i]) node.inputs[i]->grad_slot() += scratch[i];
        }
    }
}

void Tape::backward(const Var& output) {
    if (output.shape().numel() != 1) throw std::invalid_argument("backward without seed needs a scalar output");
    backward(output, Tensor(output.shape(), 1.0));
}

void Tape::reset() {
    nodes_.clear();
    replayed_ = false;
}

namespace ag {

Var conv2d(Tape& tape, const Var& input, const Var& weight, const ConvGeometry& geom) {
    Tensor out = sknet::conv2d(input.value(), weight.value(), geom);
    return tape.record(std::move(out), {input, weight},
                       [x = input, w = weight, geom](const Tensor& g, std::span<Tensor*> grads) {
                           sknet::conv2d_backward(x.value(), w.value(), geom, g, grads[0], grads[1]);
                       });
}

Var batch_norm(Tape& tape, const Var& input, const Var& gamma, const Var& beta, const BatchNormBuffers& buffers,
               bool training) {
    BatchNormView view{gamma.value().data(), beta.value().data(), buffers.running_mean, buffers.running_var,
                       buffers.momentum, buffers.epsilon};
    auto cache = std::make_shared<BatchNormCache>();
    const bool need_cache = tape.recording();
    Tensor out = sknet::batch_norm(input.value(), view, training, need_cache ? cache.get() : nullptr);
    return tape.record(std::move(out), {input, gamma, beta},
                       [cache, gm = gamma](const Tensor& g, std::span<Tensor*> grads) {
                           std::span<double> gg = grads[1] ? grads[1]->data() : std::span<double>{};
                           std::span<double> gb = grads[2] ? grads[2]->data() : std::span<double>{};
                           Tensor gi = sknet::batch_norm_backward(g, gm.value().data(), *cache, gg, gb);
                           if (grads[0]) *grads[0] += gi;
                       });
}

Var relu(Tape& tape, const Var& input) {
    if (tape.tracking_branches()) {
        const Tensor& x = input.value();
        std::uint64_t word = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            word = (word << 1) | (x[i] > 0.0 ? 1u : 0u);
            if (i % 64 == 63) {
                tape.note_branch(word);
                word = 0;
            }
        }
        tape.note_branch(word);
    }
    return tape.record(sknet::relu(input.value()), {input}, [x = input](const Tensor& g, std::span<Tensor*> grads) {
        *grads[0] += sknet::relu_backward(x.value(), g);
    });
}

Var sigmoid(Tape& tape, const Var& input) {
    auto out = std::make_shared<Tensor>(sknet::sigmoid(input.value()));
    Tensor copy = *out;
    return tape.record(std::move(copy), {input}, [out](const Tensor& g, std::span<Tensor*> grads) {
        *grads[0] += sknet::sigmoid_backward(*out, g);
    });
}

Var global_avg_pool(Tape& tape, const Var& input) {
    const Shape s = input.shape();
    return tape.record(sknet::global_avg_pool(input.value()), {input},
                       [s](const Tensor& g, std::span<Tensor*> grads) {
                           *grads[0] += sknet::global_avg_pool_backward(s, g);
                       });
}

Var max_pool2d(Tape& tape, const Var& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
    auto r = sknet::max_pool2d(input.value(), kernel, stride, padding);
    const Shape s = input.shape();
    if (tape.tracking_branches()) {
        for (std::size_t a : r.argmax) tape.note_branch(a);
    }
    auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
    return tape.record(std::move(r.output), {input}, [s, argmax](const Tensor& g, std::span<Tensor*> grads) {
        *grads[0] += sknet::max_pool2d_backward(s, *argmax, g);
    });
}

Var linear(Tape& tape, const Var& input, const Var& weight, const Var& bias) {
    std::optional<std::span<const double>> b;
    if (bias.valid()) b = bias.value().data();
    Tensor out = sknet::linear(input.value(), weight.value(), b);
    std::vector<Var> inputs{input, weight};
    if (bias.valid()) inputs.push_back(bias);
    return tape.record(std::move(out), std::move(inputs),
                       [x = input, w = weight](const Tensor& g, std::span<Tensor*> grads) {
                           std::span<double> gb;
                           if (grads.size() > 2 && grads[2]) gb = grads[2]->data();
                           sknet::linear_backward(x.value(), w.value(), g, grads[0], grads[1], gb);
                       });
}

Var softmax_over_paths(Tape& tape, const Var& logits, std::size_t paths) {
    auto out = std::make_shared<Tensor>(sknet::softmax_over_paths(logits.value(), paths));
    Tensor copy = *out;
    return tape.record(std::move(copy), {logits}, [out, paths](const Tensor& g, std::span<Tensor*> grads) {
        *grads[0] += sknet::softmax_over_paths_backward(*out, g, paths);
    });
}

Var weighted_path_sum(Tape& tape, const std::vector<Var>& paths, const Var& attention) {
    std::vector<Tensor> values;
    values.reserve(paths.size());
    for (const auto& p : paths) values.push_back(p.value());
    Tensor out = sknet::weighted_path_sum(values, attention.value());
    std::vector<Var> inputs = paths;
    inputs.push_back(attention);
    return tape.record(std::move(out), std::move(inputs),
                       [paths, att = attention](const Tensor& g, std::span<Tensor*> grads) {
                           const std::size_t m = paths.size();
                           std::vector<Tensor> vals;
                           vals.reserve(m);
                           for (const auto& p : paths) vals.push_back(p.value());
                           std::vector<Tensor> gp(m);
                           for (std::size_t i = 0; i < m; ++i) {
                               if (grads[i]) gp[i] = Tensor(vals[i].shape());
                           }
                           sknet::weighted_path_sum_backward(vals, att.value(), g, gp, grads[m]);
                           for (std::size_t i = 0; i < m; ++i) {
                               if (grads[i]) *grads[i] += gp[i];
                           }
                       });
}

Var channel_scale(Tape& tape, const Var& input, const Var& gate) {
    return tape.record(sknet::channel_scale(input.value(), gate.value()), {input, gate},
                       [x = input, gt = gate](const Tensor& g, std::span<Tensor*> grads) {
                           sknet::channel_scale_backward(x.value(), gt.value(), g, grads[0], grads[1]);
                       });
}

Var add(Tape& tape, const Var& a, const Var& b) {
    return tape.record(sknet::add(a.value(), b.value()), {a, b}, [](const Tensor& g, std::span<Tensor*> grads) {
        if (grads[0]) *grads[0] += g;
        if (grads[1]) *grads[1] += g;
    });
}

Var sum(Tape& tape, const std::vector<Var>& terms) {
    if (terms.empty()) throw std::invalid_argument("ag::sum: no terms");
    Tensor out = terms.front().value();
    for (std::size_t i = 1; i < terms.size(); ++i) out += terms[i].value();
    return tape.record(std::move(out), terms, [](const Tensor& g, std::span<Tensor*> grads) {
        for (auto* slot : grads) {
            if (slot) *slot += g;
        }
    });
}

Var scale(Tape& tape, const Var& a, double s) {
    return tape.record(sknet::scale(a.value(), s), {a}, [s](const Tensor& g, std::span<Tensor*> grads) {
        *grads[0] += sknet::scale(g, s);
    });
}

Var concat_channels(Tape& tape, const std::vector<Var>& parts) {
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (const auto& p : parts) values.push_back(p.value());
    Tensor out = sknet::concat_channels(values);
    std::vector<std::size_t> channels;
    for (const auto& v : values) channels.push_back(v.shape().c);
    return tape.record(std::move(out), parts, [channels](const Tensor& g, std::span<Tensor*> grads) {
        const Shape& s = g.shape();
        std::size_t offset = 0;
        for (std::size_t i = 0; i < channels.size(); ++i) {
            if (grads[i]) {
                for (std::size_t n = 0; n < s.n; ++n) {
                    const double* src = g.plane(n, offset);
                    double* dst = grads[i]->plane(n, 0);
                    for (std::size_t j = 0; j < channels[i] * s.plane(); ++j) dst[j] += src[j];
                }
            }
            offset += channels[i];
        }
    });
}

Var dot(Tape& tape, const Var& input, const Tensor& weights) {
    if (weights.shape() != input.shape()) throw std::invalid_argument("ag::dot: shape mismatch");
    double acc = 0.0;
    const Tensor& x = input.value();
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i] * weights[i];
    return tape.record(Tensor({1, 1, 1, 1}, acc), {input}, [weights](const Tensor& g, std::span<Tensor*> grads) {
        const double s = g[0];
        for (std::size_t i = 0; i < weights.numel(); ++i) (*grads[0])[i] += s * weights[i];
    });
}

} // namespace ag

double GradCheckReport::max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
}

std::string GradCheckReport::to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["max_rel_error"] = max_rel_error();
    auto& params = j["params"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
        params.push_back({{"name", e.name},
                          {"count", e.count},
                          {"max_rel_error", e.max_rel_error},
                          {"worst_index", e.worst_index},
                          {"analytic", e.analytic},
                          {"numeric", e.numeric},
                          {"refined", e.refined}});
    }
    return j.dump(2);
}

double gradient_rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

namespace {
struct Evaluation {
    double value;
    std::uint64_t signature;
};

Evaluation evaluate(const ScalarGraph& graph) {
    Tape tape(false);
    tape.track_branches(true);
    Var out = graph(tape);
    if (out.shape().numel() != 1) throw std::invalid_argument("grad_check: graph output is not scalar");
    const double v = out.value()[0];
    if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite graph output");
    return {v, tape.branch_signature()};
}
} // namespace

GradCheckReport grad_check(const ScalarGraph& graph, std::span<Param* const> params, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
    for (Param* p : params) p->zero_grad();
    std::uint64_t base = 0;
    {
        Tape tape;
        tape.track_branches(true);
        Var out = graph(tape);
        if (out.shape().numel() != 1) throw std::invalid_argument("grad_check: graph output is not scalar");
        base = tape.branch_signature();
        tape.backward(out);
    }
    GradCheckReport report;
    report.step = step;
    for (Param* p : params) {
        GradCheckEntry entry{p->name, p->value.numel()};
        const Tensor analytic = p->grad;
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            const double a = analytic.empty() ? 0.0 : analytic[i];
            if (!std::isfinite(a)) throw std::domain_error("grad_check: non-finite analytic gradient in " + p->name);
            const double saved = p->value[i];
            double h = step;
            double numeric = 0.0;
            for (int attempt = 0; attempt < 4; ++attempt, h /= 10.0) {
                p->value[i] = saved + h;
                const Evaluation plus = evaluate(graph);
                p->value[i] = saved - h;
                const Evaluation minus = evaluate(graph);
                p->value[i] = saved;
                numeric = (plus.value - minus.value) / (2.0 * h);
                if (plus.signature == base && minus.signature == base) break;
                if (attempt == 0) ++entry.refined;
            }
            const double err = gradient_rel_error(a, numeric);
            if (err > entry.max_rel_error || i == 0) {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.entries.push_back(entry);
    }
    return report;
}

} // namespace sknet
