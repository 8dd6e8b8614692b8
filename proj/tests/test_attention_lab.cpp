#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sknet/attention_lab.hpp"

using namespace sknet;

namespace {

ArchSpec tiny() { return load_arch(SKNET_SOURCE_DIR "/configs/sknet-tiny.json"); }

std::vector<LabeledImage> shapes_data(std::size_t n, std::uint64_t seed) {
    SyntheticScaleSpec s;
    s.seed = seed;
    return images_of(gen_synthetic(s, n));
}

AttentionRecord random_record(std::mt19937_64& rng, const std::string& unit, std::size_t sample, double scale,
                              std::size_t m, std::size_t c) {
    AttentionRecord r;
    r.unit = unit;
    r.sample = sample;
    r.label = sample % 3;
    r.scale = scale;
    r.paths = m;
    r.channels = c;
    for (std::size_t p = 0; p < m; ++p) r.path_extents.push_back(3 + 2 * p);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    r.values.assign(m * c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double z = 0.0;
        for (std::size_t p = 0; p < m; ++p) z += r.values[p * c + ch] = u(rng) + 1e-3;
        for (std::size_t p = 0; p < m; ++p) r.values[p * c + ch] /= z;
    }
    return r;
}

AttentionRecord constant_record(std::size_t sample, double large_share) {
    AttentionRecord r;
    r.unit = "SK_2_1";
    r.sample = sample;
    r.paths = 2;
    r.channels = 4;
    r.path_extents = {3, 5};
    r.values = {1 - large_share, 1 - large_share, 1 - large_share, 1 - large_share,
                large_share,     large_share,     large_share,     large_share};
    return r;
}

}  // namespace

TEST_CASE("scale transform") {
    const Tensor img = oracle::random_tensor({2, 3, 16, 16}, 1, 0.0, 1.0);
    CHECK(scale_transform(img, 1.0) == img);

    const Tensor flat(Shape{1, 3, 16, 16}, 0.375);
    const Tensor flat_out = scale_transform(flat, 1.7);
    for (double v : flat_out.data()) CHECK(std::abs(v - 0.375) < 1e-15);

    SUBCASE("a centred square doubles its extent at s = 2") {
        Tensor sq(Shape{1, 1, 32, 32}, 0.0);
        for (std::size_t y = 12; y < 20; ++y)
            for (std::size_t x = 12; x < 20; ++x) sq.at(0, 0, y, x) = 1.0;
        const Tensor out = scale_transform(sq, 2.0);
        std::size_t bright = 0;
        for (std::size_t x = 0; x < 32; ++x) bright += out.at(0, 0, 16, x) > 0.5;
        CHECK(bright == 16);
        CHECK(out.at(0, 0, 16, 16) == 1.0);
        CHECK(out.at(0, 0, 2, 2) == 0.0);
    }
    SUBCASE("linear ramps stay linear inside the crop") {
        Tensor ramp(Shape{1, 1, 20, 20});
        for (std::size_t y = 0; y < 20; ++y)
            for (std::size_t x = 0; x < 20; ++x) ramp.at(0, 0, y, x) = static_cast<double>(x);
        const Tensor out = scale_transform(ramp, 2.0);
        // Output column i samples source x = 5 + (i + 0.5) / 2 - 0.5.
        for (std::size_t i = 0; i < 20; ++i) CHECK(std::abs(out.at(0, 0, 7, i) - (4.75 + 0.5 * i)) < 1e-12);
    }
    CHECK_THROWS_AS(scale_transform(img, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(scale_transform(img, 9.0), std::invalid_argument);
    CHECK_THROWS_AS(scale_transform(img, NAN), std::invalid_argument);
}

TEST_CASE("collecting from sknet50 yields one record per image, scale and unit") {
    auto net = build(preset("sknet50"), 2);
    std::vector<LabeledImage> images{{oracle::random_tensor({1, 3, 64, 64}, 3, 0.0, 1.0), 4},
                                     {oracle::random_tensor({1, 3, 64, 64}, 4, 0.0, 1.0), 7}};
    const double scales[] = {1.0, 1.5, 2.0};
    const auto recs = collect(*net, images, scales, "all", 2);
    REQUIRE(recs.size() == 96);
    const auto ids = net->sk_unit_ids();
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const auto& r = recs[i];
        CHECK(r.sample == i / 48);
        CHECK(r.scale == scales[(i / 16) % 3]);
        CHECK(r.unit == ids[i % 16]);
        CHECK(r.label == images[r.sample].label);
        CHECK(r.paths == 2);
        CHECK(r.path_extents == std::vector<std::size_t>{3, 5});
        for (std::size_t c = 0; c < r.channels; ++c) CHECK(std::abs(r.at(0, c) + r.at(1, c) - 1.0) < 1e-9);
    }
    CHECK(recs[0].channels == 128);
    CHECK(recs[15].channels == 1024);

    // The same image twice gives identical records regardless of batching.
    std::vector<LabeledImage> twice{images[0], images[0]};
    const auto again = collect(*net, twice, std::span<const double>(scales, 1), "first", 1);
    REQUIRE(again.size() == 2);
    CHECK(again[0].values == again[1].values);
    CHECK(again[0].values == recs[0].values);
}

TEST_CASE("path choice by extent") {
    const std::size_t ex[] = {3, 5};
    CHECK(large_small_paths(ex) == std::pair<std::size_t, std::size_t>{1, 0});
    const std::size_t three[] = {5, 3, 7};
    CHECK(large_small_paths(three) == std::pair<std::size_t, std::size_t>{2, 1});
    const std::size_t same[] = {3, 3};
    CHECK(large_small_paths(same) == std::pair<std::size_t, std::size_t>{1, 0});
    const std::size_t one[] = {3};
    CHECK_THROWS_AS(large_small_paths(one), std::invalid_argument);
}

TEST_CASE("summary endpoints") {
    std::vector<AttentionRecord> uniform{constant_record(0, 0.5), constant_record(1, 0.5)};
    auto s = summarize(uniform);
    REQUIRE(s.size() == 1);
    CHECK(s[0].mean_diff == 0.0);
    CHECK(s[0].std == 0.0);
    CHECK(s[0].n == 2);

    std::vector<AttentionRecord> large{constant_record(0, 1.0), constant_record(1, 1.0)};
    s = summarize(large);
    CHECK(s[0].mean_diff == 1.0);
    CHECK(s[0].path_mean == std::vector<double>{0.0, 1.0});
}

TEST_CASE("summary statistics match a loop oracle") {
    std::mt19937_64 rng(5);
    std::vector<AttentionRecord> recs;
    for (std::size_t i = 0; i < 30; ++i)
        for (double sc : {1.0, 2.0}) recs.push_back(random_record(rng, "SK_3_1", i, sc, 2, 6));
    SummaryOptions opt;
    opt.window = 4;
    const auto sums = summarize(recs, opt);
    REQUIRE(sums.size() == 2);
    for (const auto& s : sums) {
        std::vector<double> d, large;
        std::vector<double> win(2, 0.0);
        for (const auto& r : recs) {
            if (r.scale != s.scale) continue;
            double acc = 0.0, l = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                acc += r.at(1, c) - r.at(0, c);
                l += r.at(1, c);
            }
            d.push_back(acc / 6.0);
            large.push_back(l / 6.0);
            win[0] += (r.at(1, 0) + r.at(1, 1) + r.at(1, 2) + r.at(1, 3)) / 4.0 / 30.0;
            win[1] += (r.at(1, 4) + r.at(1, 5)) / 2.0 / 30.0;
        }
        double mean = 0.0, ml = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            mean += d[i] / 30.0;
            ml += large[i] / 30.0;
        }
        double var = 0.0;
        for (double v : d) var += (v - mean) * (v - mean) / 30.0;
        CHECK(s.n == 30);
        CHECK(std::abs(s.mean_diff - mean) < 1e-12);
        CHECK(std::abs(s.std - std::sqrt(var)) < 1e-12);
        // With two paths summing to one, the difference is 2 * mean(large) - 1.
        CHECK(std::abs(s.mean_diff - (2.0 * ml - 1.0)) < 1e-12);
        CHECK(std::abs(s.path_mean[1] - ml) < 1e-12);
        REQUIRE(s.window_means.size() == 2);
        CHECK(std::abs(s.window_means[0] - win[0]) < 1e-12);
        CHECK(std::abs(s.window_means[1] - win[1]) < 1e-12);
    }

    SUBCASE("record order does not matter") {
        auto shuffled = recs;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(emit_csv(summarize(shuffled, opt)) == emit_csv(sums));
        CHECK(emit_window_csv(summarize(shuffled, opt)) == emit_window_csv(sums));
    }
    SUBCASE("per-class grouping") {
        SummaryOptions pc;
        pc.per_class = true;
        const auto by = summarize(recs, pc);
        CHECK(by.size() == 6);
        for (const auto& s : by) CHECK(s.n == 10);
        CHECK(emit_class_csv(by).rfind("unit,scale,class,path,", 0) == 0);
    }
    SUBCASE("mixed path counts are rejected") {
        auto mixed = recs;
        mixed.push_back(random_record(rng, "SK_3_1", 99, 1.0, 3, 6));
        CHECK_THROWS_AS(summarize(mixed), std::invalid_argument);
        CHECK_THROWS_AS(summarize(std::vector<AttentionRecord>{}), std::invalid_argument);
    }
}

TEST_CASE("CSV output") {
    CHECK(emit_csv(std::vector<AttentionSummary>{}) == "unit,scale,path,mean_attention,mean_diff,std,n\n");

    std::mt19937_64 rng(6);
    std::vector<AttentionRecord> recs;
    for (const char* u : {"SK_2_10", "SK_2_9", "SK_3_1"})
        for (double sc : {2.0, 1.0, 1.5})
            for (std::size_t i = 0; i < 3; ++i) recs.push_back(random_record(rng, u, i, sc, 2, 5));
    const auto sums = summarize(recs);
    const std::string csv = emit_csv(sums);
    const auto rows = parse_csv(csv);
    REQUIRE(rows.size() == 18);
    CHECK(rows[0].unit == "SK_2_9");
    CHECK(rows[6].unit == "SK_2_10");
    CHECK(rows[12].unit == "SK_3_1");
    CHECK(rows[0].scale == 1.0);
    CHECK(rows[2].scale == 1.5);
    CHECK(rows[4].scale == 2.0);
    CHECK(rows[1].path == 1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& s = sums[i / 2];
        CHECK(rows[i].unit == s.unit);
        CHECK(rows[i].mean_attention == s.path_mean[i % 2]);
        CHECK(rows[i].mean_diff == s.mean_diff);
        CHECK(rows[i].std == s.std);
        CHECK(rows[i].n == 3);
    }
    std::vector<AttentionSummary> reversed(sums.rbegin(), sums.rend());
    CHECK(emit_csv(reversed) == csv);

    CHECK(unit_less("SK_2_9", "SK_2_10"));
    CHECK(!unit_less("SK_2_10", "SK_2_9"));
    CHECK(unit_less("SK_2_3", "SK_3_1"));
    CHECK_THROWS_AS(parse_csv("bad header\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_csv("unit,scale,path,mean_attention,mean_diff,std,n\nSK_2_1,1,0\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_csv("unit,scale,path,mean_attention,mean_diff,std,n\nSK_2_1,x,0,1,1,1,1\n"),
                    std::invalid_argument);
}

TEST_CASE("zero selection matrices give exactly zero difference") {
    auto net = build(tiny(), 7);
    for (auto& p : net->store().params())
        if (p.name.find(".select") != std::string::npos) p.value = Tensor(p.value.shape(), 0.0);
    const auto images = shapes_data(4, 8);
    const double scales[] = {1.0, 2.0};
    for (const auto& s : summarize(collect(*net, images, scales))) {
        CHECK(s.mean_diff == 0.0);
        CHECK(s.path_mean == std::vector<double>{0.5, 0.5});
    }
}

TEST_CASE("unit selectors") {
    auto net = build(tiny(), 9);
    CHECK(select_units(*net, "all") == std::vector<std::string>{"SK_2_1", "SK_3_1", "SK_4_1"});
    CHECK(select_units(*net, "first") == std::vector<std::string>{"SK_2_1"});
    CHECK(select_units(*net, "SK_4_1,SK_2_1") == std::vector<std::string>{"SK_4_1", "SK_2_1"});
    CHECK_THROWS_AS(select_units(*net, "SK_9_9"), std::invalid_argument);
    auto rx = build(preset("resnext29-cifar"), 1);
    CHECK_THROWS_AS(select_units(*rx, "all"), std::invalid_argument);
    const auto images = shapes_data(2, 10);
    const double bad_scale[] = {0.5};
    CHECK_THROWS_AS(collect(*net, images, bad_scale), std::invalid_argument);
}
