#include "sknet/sk_block.hpp"

#include <stdexcept>

namespace sknet {

void PathSpec::validate() const {
    if (kernel == 0 || kernel % 2 == 0) throw std::invalid_argument("path kernel must be odd and positive");
    if (dilation == 0) throw std::invalid_argument("path dilation must be positive");
    if (kernel == 1 && dilation != 1) throw std::invalid_argument("a 1x1 path cannot be dilated");
}

void SKConfig::validate() const {
    for (const auto& p : paths) p.validate();
    if (aggregation == Aggregation::attention && paths.size() < 2) {
        throw std::invalid_argument("SK attention needs at least two paths");
    }
    if (paths.empty()) throw std::invalid_argument("SK convolution needs at least one path");
    if (groups == 0 || reduction == 0 || min_dim == 0) throw std::invalid_argument("SK G, r and L must be positive");
    if (channels == 0 || channels % groups != 0) {
        throw std::invalid_argument("SK channels " + std::to_string(channels) + " not divisible by groups " +
                                    std::to_string(groups));
    }
    for (std::size_t m = 0; m < paths.size(); ++m) {
        if (channels % path_groups(m) != 0) {
            throw std::invalid_argument("SK channels " + std::to_string(channels) + " not divisible by path " +
                                        std::to_string(m) + " groups " + std::to_string(path_groups(m)));
        }
    }
}

SKConv::SKConv(ParamStore& store, const std::string& prefix, const SKConfig& config, std::size_t in_channels,
               std::size_t stride)
    : config_(config) {
    config_.validate();
    const std::size_t c = config_.channels;
    paths_.reserve(config_.paths.size());
    for (std::size_t m = 0; m < config_.paths.size(); ++m) {
        const PathSpec& ps = config_.paths[m];
        const std::string name = prefix + ".path" + std::to_string(m);
        auto geom = ConvGeometry::same(in_channels, c, ps.kernel, stride, config_.path_groups(m), ps.dilation);
        paths_.push_back(Path{Conv2d(store, name + ".conv", geom), BatchNorm2d(store, name + ".bn", c),
                              ps.activation});
    }
    if (config_.aggregation == Aggregation::attention) {
        const std::size_t d = config_.fuse_dim();
        fuse_fc_.emplace(store, prefix + ".fuse.fc", c, d, false);
        fuse_bn_.emplace(store, prefix + ".fuse.bn", d);
        select_.reserve(config_.paths.size());
        for (std::size_t m = 0; m < config_.paths.size(); ++m) {
            select_.emplace_back(store, prefix + ".select" + std::to_string(m), d, c, false);
        }
    }
}

std::vector<Var> SKConv::split(ForwardContext& ctx, const Var& input) const {
    std::vector<Var> out;
    out.reserve(paths_.size());
    for (const auto& p : paths_) {
        Var u = p.bn.forward(ctx, p.conv.forward(ctx, input));
        if (p.activation) u = ag::relu(ctx.tape, u);
        out.push_back(u);
    }
    const Shape& s = out.front().shape();
    for (const auto& u : out) {
        if (u.shape() != s) throw std::logic_error("SK path output shapes disagree");
    }
    return out;
}

Var SKConv::fuse(ForwardContext& ctx, const std::vector<Var>& paths) const {
    if (!fuse_fc_) throw std::logic_error("fuse called on a naive-sum SK convolution");
    Var u = ag::sum(ctx.tape, paths);
    Var s = ag::global_avg_pool(ctx.tape, u);
    Var z = fuse_bn_->forward(ctx, fuse_fc_->forward(ctx, s));
    return ag::relu(ctx.tape, z);
}

SKConv::Selection SKConv::select(ForwardContext& ctx, const std::vector<Var>& paths, const Var& z) const {
    if (paths.size() != select_.size()) throw std::invalid_argument("select: path count mismatch");
    std::vector<Var> logits;
    logits.reserve(select_.size());
    for (const auto& fc : select_) logits.push_back(fc.forward(ctx, z));
    Var att = ag::softmax_over_paths(ctx.tape, ag::concat_channels(ctx.tape, logits), select_.size());
    return {ag::weighted_path_sum(ctx.tape, paths, att), att};
}

Var SKConv::forward(ForwardContext& ctx, const Var& input, const std::string& unit_id) const {
    std::vector<Var> paths = split(ctx, input);
    if (config_.aggregation == Aggregation::naive_sum) return ag::sum(ctx.tape, paths);
    Var z = fuse(ctx, paths);
    Selection sel = select(ctx, paths, z);
    if (ctx.sink) {
        AttentionCapture cap;
        cap.unit = unit_id;
        for (const auto& p : config_.paths) cap.path_extents.push_back(p.extent());
        cap.attention = sel.attention.value();
        ctx.sink->push_back(std::move(cap));
    }
    return sel.output;
}

SEBranch::SEBranch(ParamStore& store, const std::string& prefix, const SEConfig& config)
    : reduce_(store, prefix + ".fc1", config.channels, config.inner(), true),
      expand_(store, prefix + ".fc2", config.inner(), config.channels, true) {
    if (config.inner() == 0) throw std::invalid_argument("SE inner dimension must be >= 1");
}

Var SEBranch::forward(ForwardContext& ctx, const Var& input) const {
    Var s = ag::global_avg_pool(ctx.tape, input);
    Var h = ag::relu(ctx.tape, reduce_.forward(ctx, s));
    Var gate = ag::sigmoid(ctx.tape, expand_.forward(ctx, h));
    return ag::channel_scale(ctx.tape, input, gate);
}

namespace {
SKConfig unit_sk(const UnitConfig& c) {
    SKConfig sk = c.sk;
    sk.channels = c.width;
    return sk;
}
} // namespace

BottleneckUnit::BottleneckUnit(ParamStore& store, const std::string& id, const UnitConfig& c)
    : id_(id),
      config_(c),
      conv1_(store, id + ".conv1", ConvGeometry::same(c.in_channels, c.width, 1)),
      bn1_(store, id + ".bn1", c.width),
      conv2_(c.kind != BlockKind::sknet
                 ? std::optional<Conv2d>(std::in_place, store, id + ".conv2",
                                         ConvGeometry::same(c.width, c.width, 3, c.stride, c.groups))
                 : std::nullopt),
      bn2_(c.kind != BlockKind::sknet ? std::optional<BatchNorm2d>(std::in_place, store, id + ".bn2", c.width)
                                      : std::nullopt),
      sk_(c.kind == BlockKind::sknet ? std::optional<SKConv>(std::in_place, store, id + ".sk", unit_sk(c),
                                                             c.width, c.stride)
                                     : std::nullopt),
      conv3_(store, id + ".conv3", ConvGeometry::same(c.width, c.out_channels, 1)),
      bn3_(store, id + ".bn3", c.out_channels),
      se_(c.kind == BlockKind::senet
              ? std::optional<SEBranch>(std::in_place, store, id + ".se", SEConfig{c.out_channels, c.se_reduction})
              : std::nullopt),
      proj_(c.stride != 1 || c.in_channels != c.out_channels
                ? std::optional<Conv2d>(std::in_place, store, id + ".shortcut.conv",
                                        ConvGeometry::same(c.in_channels, c.out_channels, 1, c.stride))
                : std::nullopt),
      proj_bn_(proj_ ? std::optional<BatchNorm2d>(std::in_place, store, id + ".shortcut.bn", c.out_channels)
                     : std::nullopt) {}

Var BottleneckUnit::forward(ForwardContext& ctx, const Var& input) const {
    Var h = ag::relu(ctx.tape, bn1_.forward(ctx, conv1_.forward(ctx, input)));
    if (sk_) {
        h = sk_->forward(ctx, h, id_);
    } else {
        h = ag::relu(ctx.tape, bn2_->forward(ctx, conv2_->forward(ctx, h)));
    }
    h = bn3_.forward(ctx, conv3_.forward(ctx, h));
    if (se_) h = se_->forward(ctx, h);
    Var shortcut = proj_ ? proj_bn_->forward(ctx, proj_->forward(ctx, input)) : input;
    return ag::relu(ctx.tape, ag::add(ctx.tape, h, shortcut));
}

} // namespace sknet
