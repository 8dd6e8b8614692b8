#include "sknet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "json.hpp"

namespace sknet {

namespace {

// Log-softmax of one row, max-subtracted.
std::vector<double> log_softmax(std::span<const double> logits) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : logits) {
        if (!std::isfinite(v)) throw std::domain_error("cross_entropy: non-finite logit");
        m = std::max(m, v);
    }
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    const double lz = m + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] - lz;
    return out;
}

void check_eps(double eps) {
    if (!(eps >= 0.0 && eps < 1.0)) throw std::invalid_argument("label smoothing must be in [0, 1)");
}

} // namespace

double cross_entropy_value(std::span<const double> logits, std::size_t label, double eps) {
    check_eps(eps);
    if (label >= logits.size()) throw std::invalid_argument("cross_entropy: label out of range");
    const auto lp = log_softmax(logits);
    const double k = static_cast<double>(logits.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) {
        const double q = (i == label ? 1.0 - eps : 0.0) + eps / k;
        loss -= q * lp[i];
    }
    return loss;
}

namespace ag {

Var cross_entropy(Tape& tape, const Var& logits, std::span<const std::size_t> labels, double eps) {
    check_eps(eps);
    const Shape s = logits.shape();
    if (s.h != 1 || s.w != 1) throw std::invalid_argument("cross_entropy expects (n, K, 1, 1) logits");
    if (labels.size() != s.n) throw std::invalid_argument("cross_entropy: label count does not match batch");
    const Tensor& x = logits.value();
    const std::size_t k = s.c;
    // Gradient of the mean loss w.r.t. each logit: (softmax - q) / n.
    Tensor dlogits(s);
    double total = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
        const std::span<const double> row(x.ptr() + n * k, k);
        total += cross_entropy_value(row, labels[n], eps);
        const auto lp = log_softmax(row);
        for (std::size_t i = 0; i < k; ++i) {
            const double q = (i == labels[n] ? 1.0 - eps : 0.0) + eps / static_cast<double>(k);
            dlogits[n * k + i] = (std::exp(lp[i]) - q) / static_cast<double>(s.n);
        }
    }
    const double loss = total / static_cast<double>(s.n);
    return tape.record(Tensor({1, 1, 1, 1}, loss), {logits},
                       [dlogits = std::move(dlogits)](const Tensor& g, std::span<Tensor*> grads) {
                           const double sg = g[0];
                           for (std::size_t i = 0; i < dlogits.numel(); ++i) (*grads[0])[i] += sg * dlogits[i];
                       });
}

} // namespace ag

void OptimConfig::validate() const {
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw std::invalid_argument("lr0 must be finite and non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
    check_eps(label_smoothing);
    if (batch < 2) throw std::invalid_argument("batch size must be at least 2 for batch normalization");
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (accumulation == 0) throw std::invalid_argument("accumulation must be positive");
    for (const auto& m : schedule) {
        if (!(m.multiplier > 0.0 && m.multiplier <= 1.0)) {
            throw std::invalid_argument("schedule multipliers must be in (0, 1]");
        }
        if (m.at < 0.0 || (m.fraction && m.at > 1.0)) throw std::invalid_argument("bad schedule milestone");
    }
}

OptimConfig OptimConfig::imagenet() {
    OptimConfig c;
    c.lr0 = 0.1;
    c.momentum = 0.9;
    c.weight_decay = 1e-4;
    c.schedule = {{30, 0.1, false}, {60, 0.1, false}, {90, 0.1, false}};
    c.label_smoothing = 0.1;
    c.batch = 256;
    c.epochs = 100;
    c.augment = AugmentMode::none;
    return c;
}

OptimConfig OptimConfig::cifar(int variant) {
    if (variant != 10 && variant != 100) throw std::invalid_argument("CIFAR variant must be 10 or 100");
    OptimConfig c;
    c.lr0 = variant == 10 ? 0.1 : 0.05;
    c.momentum = 0.9;
    c.weight_decay = 5e-4;
    c.schedule = {{0.5, 0.1, true}, {0.75, 0.1, true}};
    c.label_smoothing = 0.0;
    c.batch = 128;
    c.epochs = 300;
    c.augment = AugmentMode::cifar_standard;
    return c;
}

double lr_at(const OptimConfig& cfg, std::size_t epoch) {
    double lr = cfg.lr0;
    const double e = static_cast<double>(epoch);
    for (const auto& m : cfg.schedule) {
        const double at = m.fraction ? m.at * static_cast<double>(cfg.epochs) : m.at;
        if (e >= at) lr *= m.multiplier;
    }
    return lr;
}

void sgd_step(std::span<Param* const> params, SgdState& state, const OptimConfig& cfg, double lr) {
    if (state.velocity.size() != params.size()) {
        if (!state.velocity.empty()) throw std::invalid_argument("sgd_step: parameter list changed");
        for (const Param* p : params) state.velocity.emplace_back(p->value.shape());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        Tensor& v = state.velocity[i];
        if (v.shape() != p.value.shape()) throw std::invalid_argument("sgd_step: velocity shape mismatch");
        const bool has_grad = !p.grad.empty();
        if (has_grad && p.grad.shape() != p.value.shape()) throw std::invalid_argument("sgd_step: grad shape mismatch");
        const double wd = p.decays() ? cfg.weight_decay : 0.0;
        for (std::size_t j = 0; j < v.numel(); ++j) {
            const double g = has_grad ? p.grad[j] : 0.0;
            v[j] = cfg.momentum * v[j] + g + wd * p.value[j];
            p.value[j] -= lr * v[j];
        }
    }
}

namespace {
std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
} // namespace

std::string TrainLog::to_csv() const {
    std::string out = "epoch,lr,train_loss,train_top1,eval_top1\n";
    for (const auto& e : epochs) {
        out += std::to_string(e.epoch) + "," + fmt(e.lr) + "," + fmt(e.train_loss) + "," + fmt(e.train_top1) + "," +
               fmt(e.eval_top1) + "\n";
    }
    return out;
}

std::string TrainLog::to_json() const {
    nlohmann::ordered_json j;
    auto& es = j["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : epochs) {
        nlohmann::ordered_json row{{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss},
                                   {"train_top1", e.train_top1}};
        // JSON has no NaN.
        row["eval_top1"] = std::isnan(e.eval_top1) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(e.eval_top1);
        es.push_back(std::move(row));
    }
    j["step_losses"] = step_losses;
    return j.dump(2);
}

std::size_t argmax(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("argmax of an empty row");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

double top1_error(const Tensor& logits, std::span<const std::size_t> labels) {
    const Shape s = logits.shape();
    if (labels.size() != s.n) throw std::invalid_argument("top1_error: label count does not match batch");
    const std::size_t k = s.c * s.h * s.w;
    std::size_t wrong = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
        if (argmax({logits.ptr() + n * k, k}) != labels[n]) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(s.n);
}

double evaluate(const Network& net, std::span<const LabeledImage> images, std::size_t batch) {
    if (images.empty()) throw std::invalid_argument("evaluate on an empty dataset");
    if (batch == 0) throw std::invalid_argument("evaluate batch must be positive");
    std::size_t wrong = 0;
    for (std::size_t begin = 0; begin < images.size(); begin += batch) {
        const std::size_t count = std::min(batch, images.size() - begin);
        Batch b = make_batch(images.subspan(begin, count));
        const Tensor logits = net.infer(b.input);
        wrong += static_cast<std::size_t>(std::lround(top1_error(logits, b.labels) * static_cast<double>(count)));
    }
    return static_cast<double>(wrong) / static_cast<double>(images.size());
}

TrainLog train(Network& net, const TrainData& data, const OptimConfig& cfg) {
    cfg.validate();
    if (data.train.size() < 2) throw std::invalid_argument("training needs at least two samples");
    std::mt19937_64 rng(cfg.seed);
    std::vector<Param*> params;
    for (auto& p : net.store().params()) params.push_back(&p);
    SgdState state;
    TrainLog log;

    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(cfg, epoch);
        if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        std::size_t wrong = 0;
        std::size_t micro = 0;
        net.store().zero_grad();

        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch) {
            const std::size_t count = std::min(cfg.batch, order.size() - begin);
            if (count < 2) break;  // batch statistics need two samples
            std::vector<LabeledImage> samples;
            samples.reserve(count);
            for (std::size_t i = 0; i < count; ++i) {
                samples.push_back(augment(data.train[order[begin + i]], cfg.augment, rng));
            }
            Batch b = make_batch(samples);

            Tape tape;
            ForwardContext ctx{tape, true};
            Var logits = net.forward(ctx, tape.constant(b.input));
            const std::string where = "epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(log.step_losses.size()) + " (lr " + fmt(lr) + ")";
            Var loss;
            try {
                loss = ag::cross_entropy(tape, logits, b.labels, cfg.label_smoothing);
            } catch (const std::domain_error&) {
                throw TrainError("non-finite logits at " + where);
            }
            const double lv = loss.value()[0];
            if (!std::isfinite(lv)) throw TrainError("non-finite loss at " + where);
            tape.backward(ag::scale(tape, loss, 1.0 / static_cast<double>(cfg.accumulation)));

            log.step_losses.push_back(lv);
            loss_sum += lv * static_cast<double>(count);
            wrong += static_cast<std::size_t>(
                std::lround(top1_error(logits.value(), b.labels) * static_cast<double>(count)));
            seen += count;

            if (++micro == cfg.accumulation) {
                sgd_step(params, state, cfg, lr);
                net.store().zero_grad();
                micro = 0;
            }
        }
        if (micro != 0) {
            sgd_step(params, state, cfg, lr);
            net.store().zero_grad();
        }
        if (seen == 0) throw std::invalid_argument("batch size leaves no trainable batch");

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / static_cast<double>(seen);
        rec.train_top1 = static_cast<double>(wrong) / static_cast<double>(seen);
        rec.eval_top1 = data.eval.empty() ? std::numeric_limits<double>::quiet_NaN()
                                          : evaluate(net, data.eval);
        log.epochs.push_back(rec);
        if (rec.train_loss < cfg.stop_below) break;
    }
    return log;
}

} // namespace sknet
