#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sknet/sk_block.hpp"

namespace sknet {

struct StemSpec {
    std::size_t channels = 64;
    std::size_t kernel = 7;
    std::size_t stride = 2;
    bool max_pool = true;  // 3x3, stride 2, padding 1
    bool operator==(const StemSpec&) const = default;
};

struct StageSpec {
    std::size_t blocks = 1;
    std::size_t width = 0;  // bottleneck channels
    std::size_t out_channels = 0;
    std::size_t stride = 1;  // applied by the first block
    bool operator==(const StageSpec&) const = default;
};

/// Declarative description of a whole network.
struct ArchSpec {
    std::string name;
    std::size_t in_channels = 3;
    StemSpec stem;
    std::vector<StageSpec> stages;
    BlockKind block = BlockKind::resnext;
    std::size_t groups = 32;
    SKConfig sk;  // template; channels is filled per unit
    std::size_t se_reduction = 16;
    std::size_t num_classes = 1000;

    /// Throws std::invalid_argument on an inconsistent channel plan.
    void validate() const;
    bool operator==(const ArchSpec&) const = default;
};

/// resnext50, senet50, sknet26, sknet50, sknet101, resnext29-cifar, senet29-cifar, sknet29-cifar.
const std::vector<std::string>& preset_names();
ArchSpec preset(std::string_view name);

std::string arch_to_json(const ArchSpec& spec);
ArchSpec arch_from_json(std::string_view text);
/// A preset name or the path of a JSON config file.
ArchSpec load_arch(const std::string& preset_or_path);

/// Units in execution order. Ids are <P>_<stage>_<block>, 1-based, with the
/// stem counted as stage 1 (so the first bottleneck stage is 2). P is SK, RX or SE.
struct PlannedUnit {
    std::string id;
    UnitConfig config;
};
std::vector<PlannedUnit> unit_plan(const ArchSpec& spec);

class Network {
public:
    explicit Network(const ArchSpec& spec);
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    Var forward(ForwardContext& ctx, const Var& input) const;
    /// Inference-mode forward, nothing recorded except optional attention.
    Tensor infer(const Tensor& batch, AttentionSink* sink = nullptr) const;

    const ArchSpec& spec() const { return spec_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    const std::vector<BottleneckUnit>& units() const { return units_; }
    /// Per-channel constant subtracted from every input before the stem.
    /// Stored as the "input.mean" buffer, so it travels with checkpoints.
    std::span<const double> input_mean() const { return input_mean_->values; }
    void set_input_mean(std::span<const double> mean);
    /// Ids of units carrying attention-mode SK convolutions.
    std::vector<std::string> sk_unit_ids() const;

private:
    ArchSpec spec_;
    ParamStore store_;
    Conv2d stem_conv_;
    BatchNorm2d stem_bn_;
    Buffer* input_mean_;
    std::vector<BottleneckUnit> units_;
    std::optional<Linear> classifier_;
};

/// Builds and initializes; identical seeds give identical parameters.
std::unique_ptr<Network> build(const ArchSpec& spec, std::uint64_t seed = 0);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Layout documented in docs/checkpoint-format.md.
std::vector<std::uint8_t> save_checkpoint(const Network& net);
std::unique_ptr<Network> load_checkpoint(std::span<const std::uint8_t> bytes);

void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::string& path);

} // namespace sknet
