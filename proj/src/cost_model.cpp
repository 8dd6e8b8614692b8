#include "sknet/cost_model.hpp"

#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace sknet {

std::uint64_t CostReport::total_params() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.params;
    return t;
}

std::uint64_t CostReport::total_mult_adds() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.mult_adds;
    return t;
}

std::string CostReport::to_json() const {
    nlohmann::ordered_json j;
    j["arch"] = arch;
    j["resolution"] = resolution;
    j["total_params"] = total_params();
    j["total_mult_adds"] = total_mult_adds();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", gflops());
    j["gflops"] = buf;
    std::snprintf(buf, sizeof buf, "%.2f", mparams());
    j["mparams"] = buf;
    auto& rs = j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) rs.push_back({{"name", r.name}, {"params", r.params}, {"mult_adds", r.mult_adds}});
    return j.dump(2);
}

std::string CostReport::to_table() const {
    std::size_t width = 5;
    for (const auto& r : rows) width = std::max(width, r.name.size());
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s %14s %16s\n", static_cast<int>(width), "layer", "params", "mult_adds");
    os << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-*s %14llu %16llu\n", static_cast<int>(width), r.name.c_str(),
                      static_cast<unsigned long long>(r.params), static_cast<unsigned long long>(r.mult_adds));
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "%-*s %14llu %16llu\n", static_cast<int>(width), "total",
                  static_cast<unsigned long long>(total_params()),
                  static_cast<unsigned long long>(total_mult_adds()));
    os << buf;
    std::snprintf(buf, sizeof buf, "%s: %.2fM params, %.2f GFLOPs @%zu\n", arch.c_str(), mparams(), gflops(),
                  resolution);
    os << buf;
    return os.str();
}

namespace {

class Counter {
public:
    explicit Counter(CostReport& r) : report(r) {}

    // Returns the output spatial size.
    std::size_t conv(const std::string& name, const ConvGeometry& g, std::size_t in_size) {
        const std::size_t out = g.output_size(in_size);
        const std::uint64_t p = g.weight_count();
        report.rows.push_back({name, p, p * out * out});
        return out;
    }
    void bn(const std::string& name, std::size_t channels) { report.rows.push_back({name, 2 * channels, 0}); }
    void fc(const std::string& name, std::size_t in, std::size_t out, bool bias) {
        const std::uint64_t w = static_cast<std::uint64_t>(in) * out;
        report.rows.push_back({name, w + (bias ? out : 0), w});
    }

    CostReport& report;
};

} // namespace

CostReport count_cost(const ArchSpec& spec, std::size_t resolution, const CostOptions& options) {
    CostReport report;
    report.arch = spec.name;
    report.resolution = resolution;
    Counter k(report);

    std::size_t size = k.conv("stem.conv",
                              ConvGeometry::same(spec.in_channels, spec.stem.channels, spec.stem.kernel,
                                                 spec.stem.stride),
                              resolution);
    k.bn("stem.bn", spec.stem.channels);
    if (spec.stem.max_pool) size = (size + 2 - 3) / 2 + 1;

    for (const auto& planned : unit_plan(spec)) {
        const UnitConfig& c = planned.config;
        const std::string& id = planned.id;
        k.conv(id + ".conv1", ConvGeometry::same(c.in_channels, c.width, 1), size);
        k.bn(id + ".bn1", c.width);
        std::size_t mid = 0;
        if (c.kind == BlockKind::sknet) {
            const SKConfig& sk = c.sk;
            for (std::size_t m = 0; m < sk.paths.size(); ++m) {
                const std::string p = id + ".sk.path" + std::to_string(m);
                mid = k.conv(p + ".conv",
                             ConvGeometry::same(c.width, c.width, sk.paths[m].kernel, c.stride, sk.path_groups(m),
                                                sk.paths[m].dilation),
                             size);
                k.bn(p + ".bn", c.width);
            }
            if (sk.aggregation == Aggregation::attention) {
                const std::size_t d = sk.fuse_dim();
                k.fc(id + ".sk.fuse.fc", c.width, d, false);
                k.bn(id + ".sk.fuse.bn", d);
                std::size_t matrices = sk.paths.size();
                if (!options.count_redundant_select && matrices == 2) matrices = 1;
                for (std::size_t m = 0; m < matrices; ++m) {
                    k.fc(id + ".sk.select" + std::to_string(m), d, c.width, false);
                }
            }
        } else {
            mid = k.conv(id + ".conv2", ConvGeometry::same(c.width, c.width, 3, c.stride, c.groups), size);
            k.bn(id + ".bn2", c.width);
        }
        k.conv(id + ".conv3", ConvGeometry::same(c.width, c.out_channels, 1), mid);
        k.bn(id + ".bn3", c.out_channels);
        if (c.kind == BlockKind::senet) {
            const SEConfig se{c.out_channels, c.se_reduction};
            k.fc(id + ".se.fc1", se.channels, se.inner(), true);
            k.fc(id + ".se.fc2", se.inner(), se.channels, true);
        }
        if (c.stride != 1 || c.in_channels != c.out_channels) {
            k.conv(id + ".shortcut.conv", ConvGeometry::same(c.in_channels, c.out_channels, 1, c.stride), size);
            k.bn(id + ".shortcut.bn", c.out_channels);
        }
        size = mid;
    }
    k.fc("classifier", spec.stages.back().out_channels, spec.num_classes, true);
    return report;
}

CostReport count_params(const ArchSpec& spec, const CostOptions& options) {
    // Spatial size does not affect parameters; any size the stem accepts will do.
    CostReport r = count_cost(spec, 224, options);
    r.resolution = 0;
    for (auto& row : r.rows) row.mult_adds = 0;
    return r;
}

CostReport count_flops(const ArchSpec& spec, std::size_t resolution, const CostOptions& options) {
    return count_cost(spec, resolution, options);
}

double CostComparison::param_ratio(std::size_t i) const {
    return static_cast<double>(reports.at(i).total_params()) / static_cast<double>(reports.at(0).total_params());
}

double CostComparison::flop_ratio(std::size_t i) const {
    return static_cast<double>(reports.at(i).total_mult_adds()) /
           static_cast<double>(reports.at(0).total_mult_adds());
}

std::string CostComparison::to_table() const {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-18s %10s %8s %10s %8s\n", "arch", "#P (M)", "ratio", "GFLOPs", "ratio");
    os << buf;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%-18s %10.2f %8.3f %10.2f %8.3f\n", reports[i].arch.c_str(),
                      reports[i].mparams(), param_ratio(i), reports[i].gflops(), flop_ratio(i));
        os << buf;
    }
    return os.str();
}

std::string CostComparison::to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
        j.push_back({{"arch", reports[i].arch},
                     {"resolution", reports[i].resolution},
                     {"total_params", reports[i].total_params()},
                     {"total_mult_adds", reports[i].total_mult_adds()},
                     {"param_ratio", param_ratio(i)},
                     {"flop_ratio", flop_ratio(i)}});
    }
    return j.dump(2);
}

CostComparison compare(std::span<const ArchSpec> specs, std::size_t resolution) {
    CostComparison c;
    for (const auto& s : specs) c.reports.push_back(count_cost(s, resolution));
    return c;
}

} // namespace sknet
