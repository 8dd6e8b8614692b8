#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sknet/tensor.hpp"

namespace sknet {

/// One image as a (1, C, H, W) tensor with values in [0, 1].
struct LabeledImage {
    Tensor pixels;
    std::size_t label = 0;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// CIFAR binary records: 1 label byte (CIFAR-10) or coarse + fine label bytes
// (CIFAR-100), then 3072 channel-major pixel bytes of a 32x32 RGB image.
constexpr std::size_t cifar_side = 32;
constexpr std::size_t cifar_pixel_bytes = 3 * cifar_side * cifar_side;
std::size_t cifar_record_bytes(int variant);

std::vector<LabeledImage> decode_cifar(std::span<const std::uint8_t> bytes, int variant);
/// Inverse of decode_cifar for 3x32x32 images; pixels are rounded to bytes and
/// the CIFAR-100 coarse label is written as 0.
std::vector<std::uint8_t> encode_cifar(std::span<const LabeledImage> images, int variant);

/// Loads one binary batch file.
std::vector<LabeledImage> load_cifar(const std::string& path, int variant);
/// Loads the canonical files from an extracted dataset directory:
/// data_batch_1..5.bin / test_batch.bin for CIFAR-10, train.bin / test.bin for CIFAR-100.
std::vector<LabeledImage> load_cifar_split(const std::string& dir, int variant, bool train);

enum class AugmentMode { none, cifar_standard };

/// Random choices of one cifar_standard augmentation: crop offset into the
/// 4-pixel zero-padded image (0..8 each) and a horizontal flip.
struct AugmentDraw {
    std::size_t dx = 4;
    std::size_t dy = 4;
    bool flip = false;
};
constexpr std::size_t augment_pad = 4;

AugmentDraw draw_augment(std::mt19937_64& rng);
LabeledImage augment_with(const LabeledImage& img, const AugmentDraw& draw);
LabeledImage augment(const LabeledImage& img, AugmentMode mode, std::mt19937_64& rng);
LabeledImage flip_horizontal(const LabeledImage& img);

enum class ShapeKind { square, disc, hbar, vbar };
std::string shape_name(ShapeKind k);

/// Bright centered objects on a dark background. The object's extent is
/// scale * base_extent pixels; the class is the index of its kind in `shapes`.
struct SyntheticScaleSpec {
    std::size_t canvas = 32;
    std::vector<ShapeKind> shapes{ShapeKind::square, ShapeKind::disc, ShapeKind::hbar, ShapeKind::vbar};
    double scale_min = 0.5;
    double scale_max = 1.0;
    double base_extent = 16.0;
    /// Foreground in [1 - color_jitter, 1], background in [0, color_jitter], per channel.
    double color_jitter = 0.2;
    /// Gaussian pixel noise stddev before byte quantization.
    double noise = 0.03;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticSample {
    LabeledImage image;
    double scale = 1.0;
};

std::vector<SyntheticSample> gen_synthetic(const SyntheticScaleSpec& spec, std::size_t n);
/// Sidecar table with columns index,scale.
std::string scale_table_csv(std::span<const SyntheticSample> samples);
std::vector<LabeledImage> images_of(std::span<const SyntheticSample> samples);

/// Per-channel mean subtraction, x -> x - mean[c]; invert adds it back.
struct ChannelMean {
    std::vector<double> mean;

    static ChannelMean compute(std::span<const LabeledImage> images);
    Tensor apply(const Tensor& t) const;
    Tensor invert(const Tensor& t) const;
};

/// Stacks the selected images into one (n, C, H, W) batch.
struct Batch {
    Tensor input;
    std::vector<std::size_t> labels;
};
Batch make_batch(std::span<const LabeledImage> images, std::span<const std::size_t> indices);
Batch make_batch(std::span<const LabeledImage> images);

} // namespace sknet
