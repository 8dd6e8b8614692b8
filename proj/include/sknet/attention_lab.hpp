#pragma once

// Scale-response analysis of SK attention: enlarge the central object by
// cropping and resizing, record each SK unit's selection weights, and reduce
// them to the mean attention difference between the largest and smallest kernel.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sknet/arch.hpp"
#include "sknet/data.hpp"

namespace sknet {

/// Crops the central (H/s) x (W/s) window of every plane and resizes it back
/// to H x W with bilinear interpolation (pixel-center alignment, edge clamp).
/// s == 1 returns the input unchanged. Throws if s < 1 or the window is under 2x2.
Tensor scale_transform(const Tensor& img, double s);

struct AttentionRecord {
    std::string unit;
    std::size_t sample = 0;
    std::size_t label = 0;
    double scale = 1.0;
    std::size_t paths = 0;
    std::size_t channels = 0;
    std::vector<std::size_t> path_extents;
    /// Path-major, values[m * channels + c].
    std::vector<double> values;

    double at(std::size_t m, std::size_t c) const { return values[m * channels + c]; }
};

/// "all", "first", or a comma-separated list of unit ids.
std::vector<std::string> select_units(const Network& net, const std::string& selector);

/// One record per (image, scale, selected unit), ordered by sample, then
/// scale, then unit. BN runs in inference mode.
std::vector<AttentionRecord> collect(const Network& net, std::span<const LabeledImage> images,
                                     std::span<const double> scales, const std::string& selector = "all",
                                     std::size_t batch = 32);

/// Indices of the paths with the largest and smallest effective extent.
/// Ties pick the later path as large and the earlier as small.
std::pair<std::size_t, std::size_t> large_small_paths(std::span<const std::size_t> extents);

/// Per-record mean over channels of attention(large) - attention(small).
double mean_attention_difference(const AttentionRecord& r);

struct SummaryOptions {
    /// Also average the large-kernel attention over windows of this many successive channels (0 = off).
    std::size_t window = 0;
    bool per_class = false;
};

struct AttentionSummary {
    std::string unit;
    double scale = 1.0;
    std::optional<std::size_t> label;
    /// Mean over samples of the channel-averaged attention of each path.
    std::vector<double> path_mean;
    double mean_diff = 0.0;
    /// Population standard deviation of the per-sample difference.
    double std = 0.0;
    std::size_t n = 0;
    std::vector<double> window_means;
};

/// Sorted by unit (natural order), scale, then class. Throws on an empty
/// input or when records disagree on the path count.
std::vector<AttentionSummary> summarize(std::span<const AttentionRecord> records, const SummaryOptions& options = {});

/// Natural ordering on unit ids, so SK_2_10 sorts after SK_2_9.
bool unit_less(const std::string& a, const std::string& b);

/// Columns unit,scale,path,mean_attention,mean_diff,std,n; one row per path.
/// Values are printed with round-trip precision. Per-class summaries use
/// emit_class_csv, which adds a class column after scale.
std::string emit_csv(std::span<const AttentionSummary> summaries);
std::string emit_class_csv(std::span<const AttentionSummary> summaries);
/// Columns unit,scale,window,mean_attention for the large-kernel window averages.
std::string emit_window_csv(std::span<const AttentionSummary> summaries);

struct AttentionCsvRow {
    std::string unit;
    double scale = 0.0;
    std::size_t path = 0;
    double mean_attention = 0.0;
    double mean_diff = 0.0;
    double std = 0.0;
    std::size_t n = 0;
};
/// Parses emit_csv output. Throws std::invalid_argument on a malformed file.
std::vector<AttentionCsvRow> parse_csv(const std::string& text);

void write_text(const std::string& path, const std::string& text);

} // namespace sknet
