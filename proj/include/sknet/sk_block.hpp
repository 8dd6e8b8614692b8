#pragma once

// Selective Kernel convolution and the residual units built around it.
//
// SKConv runs M convolution paths over the same input (split), sums them and
// squeezes the sum into a compact descriptor z of length d = max(C / r, L)
// (fuse), then turns per-path logits A_m z into a channel-wise softmax that
// weights the paths (select). In naive-sum mode the paths are only summed.

#include <optional>
#include <string>
#include <vector>

#include "sknet/layers.hpp"

namespace sknet {

struct PathSpec {
    std::size_t kernel = 3;
    std::size_t dilation = 1;
    bool activation = true;  // ReLU after the path's BN
    /// Group count of this path's conv; 0 uses SKConfig::groups.
    std::size_t groups = 0;

    /// Effective receptive extent D*(k-1)+1.
    std::size_t extent() const { return dilation * (kernel - 1) + 1; }
    /// Kernel must be odd; a 1x1 path must have dilation 1.
    void validate() const;
    bool operator==(const PathSpec&) const = default;
};

enum class Aggregation { attention, naive_sum };

struct SKConfig {
    std::vector<PathSpec> paths{{3, 1, true}, {3, 2, true}};
    std::size_t groups = 32;
    std::size_t reduction = 16;
    std::size_t min_dim = 32;
    Aggregation aggregation = Aggregation::attention;
    std::size_t channels = 0;

    /// d = max(C / r, L) with integer division.
    std::size_t fuse_dim() const { return std::max(channels / reduction, min_dim); }
    std::size_t path_groups(std::size_t m) const { return paths[m].groups ? paths[m].groups : groups; }
    void validate() const;
    bool operator==(const SKConfig&) const = default;
};

class SKConv {
public:
    struct Path {
        Conv2d conv;
        BatchNorm2d bn;
        bool activation;
    };
    struct Selection {
        Var output;
        Var attention;  // (n, M*C, 1, 1)
    };

    SKConv(ParamStore& store, const std::string& prefix, const SKConfig& config, std::size_t in_channels,
           std::size_t stride);

    /// conv (G groups) -> BN -> optional ReLU per path.
    std::vector<Var> split(ForwardContext& ctx, const Var& input) const;
    /// U = sum of paths, s = GAP(U), z = ReLU(BN(W s)); returns z as (n, d, 1, 1).
    Var fuse(ForwardContext& ctx, const std::vector<Var>& paths) const;
    /// Softmax over per-path logits A_m z, then V_c = sum_m a_m,c U_m,c.
    Selection select(ForwardContext& ctx, const std::vector<Var>& paths, const Var& z) const;
    /// The full SK convolution. Records attention into ctx.sink under unit_id when present.
    Var forward(ForwardContext& ctx, const Var& input, const std::string& unit_id = {}) const;

    const SKConfig& config() const { return config_; }
    const std::vector<Path>& paths() const { return paths_; }
    const std::optional<Linear>& fuse_fc() const { return fuse_fc_; }
    const std::optional<BatchNorm2d>& fuse_bn() const { return fuse_bn_; }
    const std::vector<Linear>& select_fcs() const { return select_; }

private:
    SKConfig config_;
    std::vector<Path> paths_;
    std::optional<Linear> fuse_fc_;
    std::optional<BatchNorm2d> fuse_bn_;
    std::vector<Linear> select_;
};

struct SEConfig {
    std::size_t channels = 0;
    std::size_t reduction = 16;
    std::size_t inner() const { return channels / reduction; }
};

/// Squeeze-and-excitation gate: x * sigmoid(fc2(ReLU(fc1(GAP(x))))), both fc biased.
class SEBranch {
public:
    SEBranch(ParamStore& store, const std::string& prefix, const SEConfig& config);
    Var forward(ForwardContext& ctx, const Var& input) const;
    const Linear& reduce() const { return reduce_; }
    const Linear& expand() const { return expand_; }

private:
    Linear reduce_;
    Linear expand_;
};

enum class BlockKind { resnext, sknet, senet };

struct UnitConfig {
    BlockKind kind = BlockKind::resnext;
    std::size_t in_channels = 0;
    std::size_t width = 0;  // bottleneck channels
    std::size_t out_channels = 0;
    std::size_t stride = 1;
    std::size_t groups = 32;  // cardinality of the 3x3 conv (resnext / senet)
    SKConfig sk;              // sknet; channels is overwritten with width
    std::size_t se_reduction = 16;
};

/// 1x1 -> (grouped 3x3 | SK conv) -> 1x1 bottleneck with residual add.
/// out = ReLU(shortcut(x) + BN(conv3(mid(ReLU(BN(conv1(x))))))); the shortcut is
/// identity when shapes match and a strided 1x1 conv + BN otherwise.
class BottleneckUnit {
public:
    BottleneckUnit(ParamStore& store, const std::string& id, const UnitConfig& config);
    Var forward(ForwardContext& ctx, const Var& input) const;

    const std::string& id() const { return id_; }
    const UnitConfig& config() const { return config_; }
    const SKConv* sk() const { return sk_ ? &*sk_ : nullptr; }
    const BatchNorm2d& last_bn() const { return bn3_; }
    bool has_projection() const { return proj_.has_value(); }

private:
    std::string id_;
    UnitConfig config_;
    Conv2d conv1_;
    BatchNorm2d bn1_;
    std::optional<Conv2d> conv2_;
    std::optional<BatchNorm2d> bn2_;
    std::optional<SKConv> sk_;
    Conv2d conv3_;
    BatchNorm2d bn3_;
    std::optional<SEBranch> se_;
    std::optional<Conv2d> proj_;
    std::optional<BatchNorm2d> proj_bn_;
};

} // namespace sknet
