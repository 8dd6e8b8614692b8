#include "sknet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace sknet {

std::size_t cifar_record_bytes(int variant) {
    if (variant == 10) return 1 + cifar_pixel_bytes;
    if (variant == 100) return 2 + cifar_pixel_bytes;
    throw std::invalid_argument("CIFAR variant must be 10 or 100, got " + std::to_string(variant));
}

std::vector<LabeledImage> decode_cifar(std::span<const std::uint8_t> bytes, int variant) {
    const std::size_t rec = cifar_record_bytes(variant);
    if (bytes.size() % rec != 0) {
        throw DataError("truncated CIFAR data: " + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                        std::to_string(rec) + "-byte records");
    }
    const std::size_t label_bytes = rec - cifar_pixel_bytes;
    const auto classes = static_cast<std::size_t>(variant);
    std::vector<LabeledImage> out;
    out.reserve(bytes.size() / rec);
    for (std::size_t r = 0; r * rec < bytes.size(); ++r) {
        const std::uint8_t* p = bytes.data() + r * rec;
        const std::size_t label = p[label_bytes - 1];  // fine label for CIFAR-100
        if (label >= classes) {
            throw DataError("record " + std::to_string(r) + ": label " + std::to_string(label) +
                            " out of range for " + std::to_string(classes) + " classes");
        }
        Tensor t({1, 3, cifar_side, cifar_side});
        const std::uint8_t* px = p + label_bytes;
        for (std::size_t i = 0; i < cifar_pixel_bytes; ++i) t[i] = px[i] / 255.0;
        out.push_back({std::move(t), label});
    }
    return out;
}

std::vector<std::uint8_t> encode_cifar(std::span<const LabeledImage> images, int variant) {
    const std::size_t rec = cifar_record_bytes(variant);
    const std::size_t label_bytes = rec - cifar_pixel_bytes;
    std::vector<std::uint8_t> out;
    out.reserve(images.size() * rec);
    for (const auto& img : images) {
        if (img.pixels.shape() != Shape{1, 3, cifar_side, cifar_side}) {
            throw std::invalid_argument("encode_cifar needs 1x3x32x32 images, got " + img.pixels.shape().str());
        }
        if (img.label >= static_cast<std::size_t>(variant)) throw std::invalid_argument("label out of range");
        if (label_bytes == 2) out.push_back(0);
        out.push_back(static_cast<std::uint8_t>(img.label));
        for (double v : img.pixels.data()) {
            out.push_back(static_cast<std::uint8_t>(std::clamp<long>(std::lround(v * 255.0), 0, 255)));
        }
    }
    return out;
}

namespace {
std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}
} // namespace

std::vector<LabeledImage> load_cifar(const std::string& path, int variant) {
    const auto bytes = slurp(path);
    try {
        return decode_cifar(bytes, variant);
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

std::vector<LabeledImage> load_cifar_split(const std::string& dir, int variant, bool train) {
    std::vector<std::string> files;
    if (variant == 10) {
        if (train) {
            for (int i = 1; i <= 5; ++i) files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
        } else {
            files.push_back(dir + "/test_batch.bin");
        }
    } else if (variant == 100) {
        files.push_back(dir + (train ? "/train.bin" : "/test.bin"));
    } else {
        cifar_record_bytes(variant);
    }
    std::vector<LabeledImage> out;
    for (const auto& f : files) {
        auto part = load_cifar(f, variant);
        std::move(part.begin(), part.end(), std::back_inserter(out));
    }
    return out;
}

AugmentDraw draw_augment(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> offset(0, 2 * augment_pad);
    AugmentDraw d;
    d.dx = offset(rng);
    d.dy = offset(rng);
    d.flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    return d;
}

LabeledImage augment_with(const LabeledImage& img, const AugmentDraw& draw) {
    if (draw.dx > 2 * augment_pad || draw.dy > 2 * augment_pad) throw std::invalid_argument("crop offset too large");
    const Shape s = img.pixels.shape();
    Tensor out(s);
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            for (std::size_t y = 0; y < s.h; ++y) {
                // Position in the padded image is (y + dy, x + dx); subtract the pad to get the source.
                const long sy = static_cast<long>(y + draw.dy) - static_cast<long>(augment_pad);
                if (sy < 0 || sy >= static_cast<long>(s.h)) continue;
                for (std::size_t x = 0; x < s.w; ++x) {
                    const long sx = static_cast<long>(x + draw.dx) - static_cast<long>(augment_pad);
                    if (sx < 0 || sx >= static_cast<long>(s.w)) continue;
                    const std::size_t ox = draw.flip ? s.w - 1 - x : x;
                    out.at(n, c, y, ox) = img.pixels.at(n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
                }
            }
        }
    }
    return {std::move(out), img.label};
}

LabeledImage augment(const LabeledImage& img, AugmentMode mode, std::mt19937_64& rng) {
    if (mode == AugmentMode::none) return img;
    return augment_with(img, draw_augment(rng));
}

LabeledImage flip_horizontal(const LabeledImage& img) { return augment_with(img, {augment_pad, augment_pad, true}); }

std::string shape_name(ShapeKind k) {
    switch (k) {
    case ShapeKind::square: return "square";
    case ShapeKind::disc: return "disc";
    case ShapeKind::hbar: return "hbar";
    case ShapeKind::vbar: return "vbar";
    }
    return "?";
}

void SyntheticScaleSpec::validate() const {
    if (canvas < 4) throw std::invalid_argument("synthetic canvas must be at least 4 pixels");
    if (shapes.empty()) throw std::invalid_argument("synthetic shape vocabulary is empty");
    if (!(scale_min > 0.0) || scale_min > scale_max || scale_max > 1.0) {
        throw std::invalid_argument("synthetic scale range must satisfy 0 < min <= max <= 1");
    }
    if (!(base_extent > 0.0) || base_extent > static_cast<double>(canvas)) {
        throw std::invalid_argument("synthetic base extent must be in (0, canvas]");
    }
    if (color_jitter < 0.0 || color_jitter >= 0.5) throw std::invalid_argument("color jitter must be in [0, 0.5)");
    if (noise < 0.0) throw std::invalid_argument("noise must be non-negative");
}

namespace {
bool inside(ShapeKind k, double dx, double dy, double half) {
    switch (k) {
    case ShapeKind::square: return std::abs(dx) < half && std::abs(dy) < half;
    case ShapeKind::disc: return dx * dx + dy * dy < half * half;
    case ShapeKind::hbar: return std::abs(dx) < half && std::abs(dy) < half / 3.0;
    case ShapeKind::vbar: return std::abs(dx) < half / 3.0 && std::abs(dy) < half;
    }
    return false;
}
} // namespace

std::vector<SyntheticSample> gen_synthetic(const SyntheticScaleSpec& spec, std::size_t n) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<std::size_t> kind(0, spec.shapes.size() - 1);
    std::uniform_real_distribution<double> scale(spec.scale_min, spec.scale_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t side = spec.canvas;
    const double centre = static_cast<double>(side) / 2.0;

    std::vector<SyntheticSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = kind(rng);
        const double s = spec.scale_min == spec.scale_max ? spec.scale_min : scale(rng);
        double fg[3], bg[3];
        for (int c = 0; c < 3; ++c) {
            fg[c] = 1.0 - spec.color_jitter * unit(rng);
            bg[c] = spec.color_jitter * unit(rng);
        }
        const double half = s * spec.base_extent / 2.0;
        Tensor t({1, 3, side, side});
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < side; ++y) {
                for (std::size_t x = 0; x < side; ++x) {
                    const double dx = static_cast<double>(x) + 0.5 - centre;
                    const double dy = static_cast<double>(y) + 0.5 - centre;
                    double v = inside(spec.shapes[label], dx, dy, half) ? fg[c] : bg[c];
                    if (spec.noise > 0.0) v += spec.noise * gauss(rng);
                    t.at(0, c, y, x) = static_cast<double>(std::clamp<long>(std::lround(v * 255.0), 0, 255)) / 255.0;
                }
            }
        }
        out.push_back({{std::move(t), label}, s});
    }
    return out;
}

std::string scale_table_csv(std::span<const SyntheticSample> samples) {
    std::string out = "index,scale\n";
    char buf[64];
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, samples[i].scale);
        out += buf;
    }
    return out;
}

std::vector<LabeledImage> images_of(std::span<const SyntheticSample> samples) {
    std::vector<LabeledImage> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.image);
    return out;
}

ChannelMean ChannelMean::compute(std::span<const LabeledImage> images) {
    if (images.empty()) throw std::invalid_argument("channel mean of an empty dataset");
    const Shape s0 = images.front().pixels.shape();
    ChannelMean m;
    m.mean.assign(s0.c, 0.0);
    std::size_t count = 0;
    for (const auto& img : images) {
        const Shape s = img.pixels.shape();
        if (s.c != s0.c) throw std::invalid_argument("channel mean: images disagree on channel count");
        for (std::size_t n = 0; n < s.n; ++n) {
            for (std::size_t c = 0; c < s.c; ++c) {
                const double* p = img.pixels.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) m.mean[c] += p[i];
            }
        }
        count += s.n * s.plane();
    }
    for (auto& v : m.mean) v /= static_cast<double>(count);
    return m;
}

namespace {
Tensor shift(const Tensor& t, const std::vector<double>& mean, double sign) {
    const Shape s = t.shape();
    if (s.c != mean.size()) throw std::invalid_argument("channel mean size does not match tensor channels");
    Tensor out = t;
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            double* p = out.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) p[i] += sign * mean[c];
        }
    }
    return out;
}
} // namespace

Tensor ChannelMean::apply(const Tensor& t) const { return shift(t, mean, -1.0); }
Tensor ChannelMean::invert(const Tensor& t) const { return shift(t, mean, 1.0); }

Batch make_batch(std::span<const LabeledImage> images, std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("empty batch");
    std::vector<Tensor> parts;
    Batch b;
    parts.reserve(indices.size());
    for (std::size_t i : indices) {
        parts.push_back(images[i].pixels);
        b.labels.push_back(images[i].label);
    }
    b.input = stack_batch(parts);
    return b;
}

Batch make_batch(std::span<const LabeledImage> images) {
    std::vector<std::size_t> idx(images.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return make_batch(images, idx);
}

} // namespace sknet
