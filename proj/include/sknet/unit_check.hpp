#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sknet/arch.hpp"

namespace sknet {

/// Finite-difference check of one building block on a random input probed by
/// a random linear functional. Units: sk, sk-naive (the SK convolution alone),
/// sknet, sknet-naive, resnext, senet (a bottleneck unit with a projection shortcut) and
/// toynet (a three-unit SK network with classifier).
struct UnitCheckSpec {
    std::string unit = "sk";
    std::size_t channels = 32;
    /// 0 picks gcd(channels, 32).
    std::size_t groups = 0;
    /// SK fuse width d = max(channels / reduction, min_dim).
    std::size_t reduction = 16;
    std::size_t min_dim = 32;
    /// Batch statistics of the fuse BN see one value per sample, so small
    /// batches make them nearly degenerate.
    std::size_t batch = 8;
    std::size_t spatial = 3;
    std::uint64_t seed = 0;
    double step = 1e-5;
};

const std::vector<std::string>& unit_check_kinds();
GradCheckReport check_unit(const UnitCheckSpec& spec);

/// Three single-block SK stages on 3-channel input, for end-to-end gradient checks.
ArchSpec toy_network_spec(std::size_t channels = 8);

} // namespace sknet
