#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sknet/arch.hpp"
#include "sknet/data.hpp"

namespace sknet {

/// -sum_k q_k log softmax(logits)_k with q = (1 - eps) onehot(label) + eps / K.
/// Throws std::domain_error on non-finite logits.
double cross_entropy_value(std::span<const double> logits, std::size_t label, double eps);

namespace ag {
/// Mean label-smoothed cross entropy over a (n, K, 1, 1) logit batch.
Var cross_entropy(Tape& tape, const Var& logits, std::span<const std::size_t> labels, double eps);
} // namespace ag

/// Learning rate is multiplied by `multiplier` from `at` onward. `at` is an
/// epoch index, or a fraction of the total epochs when `fraction` is set.
struct Milestone {
    double at = 0.0;
    double multiplier = 0.1;
    bool fraction = false;
};

struct OptimConfig {
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<Milestone> schedule;
    double label_smoothing = 0.0;
    std::size_t batch = 128;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    /// Micro-batches per optimizer step; the effective batch is batch * accumulation.
    std::size_t accumulation = 1;
    AugmentMode augment = AugmentMode::none;
    bool shuffle = true;
    /// Stop after an epoch whose mean train loss is below this; 0 disables.
    double stop_below = 0.0;

    void validate() const;

    /// lr 0.1, /10 every 30 of 100 epochs, momentum 0.9, decay 1e-4, batch 256, smoothing 0.1.
    static OptimConfig imagenet();
    /// lr 0.1 (CIFAR-10) or 0.05 (CIFAR-100), /10 at 50% and 75% of 300 epochs,
    /// momentum 0.9, decay 5e-4, batch 128, standard augmentation, no smoothing.
    static OptimConfig cifar(int variant);
};

double lr_at(const OptimConfig& cfg, std::size_t epoch);

/// Momentum buffers, one per parameter, created lazily.
struct SgdState {
    std::vector<Tensor> velocity;
};

/// v = momentum * v + grad + wd * p (wd only for decaying weights); p -= lr * v.
void sgd_step(std::span<Param* const> params, SgdState& state, const OptimConfig& cfg, double lr);

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    /// Top-1 error fractions. eval_top1 is NaN when no evaluation set is given.
    double train_top1 = 0.0;
    double eval_top1 = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::vector<double> step_losses;

    /// Columns epoch,lr,train_loss,train_top1,eval_top1 with round-trip precision.
    std::string to_csv() const;
    std::string to_json() const;
};

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainData {
    std::span<const LabeledImage> train;
    std::span<const LabeledImage> eval;
};

/// Deterministic for a fixed cfg.seed. Aborts with TrainError on a non-finite loss.
TrainLog train(Network& net, const TrainData& data, const OptimConfig& cfg);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);
/// Fraction of rows of (n, K, 1, 1) logits whose argmax differs from the label.
double top1_error(const Tensor& logits, std::span<const std::size_t> labels);
/// Inference-mode top-1 error over a dataset.
double evaluate(const Network& net, std::span<const LabeledImage> images, std::size_t batch = 128);

} // namespace sknet
