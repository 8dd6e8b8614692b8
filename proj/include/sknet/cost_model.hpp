#pragma once

// Analytic parameter and multiply-add counts computed from an ArchSpec alone.
//
// Conventions: convolutions are bias-free, Cout*(Cin/G)*k^2 params and
// that many multiply-adds per output pixel; BN contributes 2*C affine params
// (running statistics are not parameters) and no multiply-adds; fc layers
// contribute Cout*Cin (+Cout when biased) params and Cout*Cin multiply-adds.
// Pooling, activations, softmax and elementwise scaling count as zero.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sknet/arch.hpp"

namespace sknet {

struct CostRow {
    std::string name;
    std::uint64_t params = 0;
    std::uint64_t mult_adds = 0;
};

struct CostReport {
    std::string arch;
    std::size_t resolution = 0;
    std::vector<CostRow> rows;

    std::uint64_t total_params() const;
    std::uint64_t total_mult_adds() const;
    double mparams() const { return static_cast<double>(total_params()) / 1e6; }
    double gflops() const { return static_cast<double>(total_mult_adds()) / 1e9; }

    std::string to_json() const;
    std::string to_table() const;
};

struct CostOptions {
    /// For M = 2 one select matrix is redundant (a + b = 1). Counting it is the
    /// default and matches the reported SKNet totals; false drops one matrix per unit.
    bool count_redundant_select = true;
};

CostReport count_cost(const ArchSpec& spec, std::size_t resolution, const CostOptions& options = {});
CostReport count_params(const ArchSpec& spec, const CostOptions& options = {});
CostReport count_flops(const ArchSpec& spec, std::size_t resolution, const CostOptions& options = {});

/// Per-arch totals plus ratios against the first entry.
struct CostComparison {
    std::vector<CostReport> reports;
    double param_ratio(std::size_t i) const;
    double flop_ratio(std::size_t i) const;
    std::string to_table() const;
    std::string to_json() const;
};
CostComparison compare(std::span<const ArchSpec> specs, std::size_t resolution);

} // namespace sknet
