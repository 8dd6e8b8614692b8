#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "sknet/arch.hpp"

using namespace sknet;

namespace {

std::vector<std::pair<std::string, Shape>> trace(const Network& net, std::size_t res, Tensor* logits = nullptr) {
    std::vector<std::pair<std::string, Shape>> t;
    Tape tape(false);
    ForwardContext ctx{tape, false, nullptr, &t};
    Tensor y = net.forward(ctx, tape.constant(oracle::random_tensor({1, net.spec().in_channels, res, res}, 1))).value();
    if (logits) *logits = y;
    return t;
}

std::size_t side_after(const std::vector<std::pair<std::string, Shape>>& t, const std::string& name) {
    for (const auto& [n, s] : t)
        if (n == name) return s.h;
    return 0;
}

}  // namespace

TEST_CASE("preset names") {
    CHECK(preset_names() == std::vector<std::string>{"resnext50", "senet50", "sknet26", "sknet50", "sknet101",
                                                      "resnext29-cifar", "senet29-cifar", "sknet29-cifar"});
    for (const auto& n : preset_names()) {
        CHECK(preset(n).name == n);
        CHECK_NOTHROW(preset(n).validate());
    }
    CHECK_THROWS_AS(preset("sknet9000"), std::invalid_argument);
}

TEST_CASE("sknet50 preset") {
    const ArchSpec s = preset("sknet50");
    REQUIRE(s.stages.size() == 4);
    const std::size_t blocks[] = {3, 4, 6, 3}, widths[] = {128, 256, 512, 1024}, strides[] = {1, 2, 2, 2};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(s.stages[i].blocks == blocks[i]);
        CHECK(s.stages[i].width == widths[i]);
        CHECK(s.stages[i].stride == strides[i]);
    }
    CHECK(s.block == BlockKind::sknet);
    CHECK(s.sk.paths.size() == 2);
    CHECK(s.sk.groups == 32);
    CHECK(s.sk.reduction == 16);
    CHECK(s.sk.min_dim == 32);
    CHECK(s.stem.kernel == 7);
    CHECK(s.stem.channels == 64);
    CHECK(s.stem.stride == 2);
    CHECK(s.stem.max_pool);
}

TEST_CASE("sknet26 and sknet101 stage plans") {
    for (const auto& st : preset("sknet26").stages) CHECK(st.blocks == 2);
    const std::size_t deep[] = {3, 4, 23, 3};
    const auto s101 = preset("sknet101");
    for (std::size_t i = 0; i < 4; ++i) CHECK(s101.stages[i].blocks == deep[i]);
}

TEST_CASE("CIFAR presets") {
    for (const char* name : {"resnext29-cifar", "senet29-cifar", "sknet29-cifar"}) {
        const ArchSpec s = preset(name);
        REQUIRE(s.stages.size() == 3);
        for (const auto& st : s.stages) CHECK(st.blocks == 3);
        CHECK(s.stem.kernel == 3);
        CHECK(!s.stem.max_pool);
    }
    const ArchSpec sk = preset("sknet29-cifar");
    CHECK(sk.sk.groups == 16);
    CHECK(sk.sk.reduction == 32);
    REQUIRE(sk.sk.paths.size() == 2);
    CHECK(sk.sk.paths[1].kernel == 1);
}

TEST_CASE("ImageNet presets replay the 112/56/28/14/7 spatial plan and emit 1000 logits") {
    for (const char* name : {"resnext50", "senet50", "sknet26", "sknet50", "sknet101"}) {
        auto net = build(preset(name), 2);
        Tensor logits;
        auto t = trace(*net, 224, &logits);
        CHECK(logits.shape() == Shape{1, 1000, 1, 1});
        CHECK(side_after(t, "stem.conv") == 112);
        CHECK(side_after(t, "stem.pool") == 56);
        const std::string n = name;
        const char* p = n.starts_with("resnext") ? "RX" : n.starts_with("senet") ? "SE" : "SK";
        CHECK(side_after(t, std::string(p) + "_2_1") == 56);
        CHECK(side_after(t, std::string(p) + "_3_1") == 28);
        CHECK(side_after(t, std::string(p) + "_4_1") == 14);
        CHECK(side_after(t, std::string(p) + "_5_1") == 7);
    }
}

TEST_CASE("sknet50 accepts 320x320 input") {
    auto net = build(preset("sknet50"), 3);
    Tensor y = net->infer(oracle::random_tensor({1, 3, 320, 320}, 4, 0.0, 1.0));
    CHECK(y.shape() == Shape{1, 1000, 1, 1});
}

TEST_CASE("resnext29-cifar on 32x32 produces 10 or 100 logits") {
    ArchSpec s = preset("resnext29-cifar");
    CHECK(build(s, 5)->infer(oracle::random_tensor({1, 3, 32, 32}, 6, 0.0, 1.0)).shape() == Shape{1, 10, 1, 1});
    s.num_classes = 100;
    CHECK(build(s, 5)->infer(oracle::random_tensor({1, 3, 32, 32}, 6, 0.0, 1.0)).shape() == Shape{1, 100, 1, 1});
}

TEST_CASE("unit ids count the stem as stage one") {
    auto plan = unit_plan(preset("sknet50"));
    REQUIRE(plan.size() == 16);
    CHECK(plan.front().id == "SK_2_1");
    CHECK(plan[5].id == "SK_3_3");
    CHECK(plan[6].id == "SK_3_4");
    CHECK(plan.back().id == "SK_5_3");
    auto net = build(preset("sknet50"));
    CHECK(net->sk_unit_ids().size() == 16);
    CHECK(unit_plan(preset("resnext50")).front().id == "RX_2_1");
    CHECK(unit_plan(preset("senet50")).front().id == "SE_2_1");
}

TEST_CASE("registry names are unique, stable and build is deterministic") {
    auto a = build(preset("sknet26"), 7);
    auto b = build(preset("sknet26"), 7);
    auto c = build(preset("sknet26"), 8);
    std::set<std::string> names;
    REQUIRE(a->store().params().size() == b->store().params().size());
    bool differs = false;
    for (std::size_t i = 0; i < a->store().params().size(); ++i) {
        const auto& pa = a->store().params()[i];
        CHECK(names.insert(pa.name).second);
        CHECK(pa.name == b->store().params()[i].name);
        CHECK(pa.value == b->store().params()[i].value);
        differs = differs || !(pa.value == c->store().params()[i].value);
    }
    CHECK(differs);
    for (const auto& buf : a->store().buffers()) CHECK(names.insert(buf.name).second);
    CHECK(a->store().find_buffer("input.mean") != nullptr);
}

TEST_CASE("inconsistent channel plans are rejected") {
    ArchSpec s = preset("resnext50");
    s.stages[1].width = 250;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    CHECK_THROWS_AS(build(s), std::invalid_argument);
    ArchSpec z = preset("sknet26");
    z.stages.clear();
    CHECK_THROWS_AS(z.validate(), std::invalid_argument);
}

TEST_CASE("arch JSON round trip and config files") {
    for (const auto& n : preset_names()) CHECK(arch_from_json(arch_to_json(preset(n))) == preset(n));
    ArchSpec v = preset("sknet50");
    v.sk.paths[1] = PathSpec{5, 1, true, 64};
    CHECK(arch_from_json(arch_to_json(v)) == v);
    CHECK_THROWS_AS(arch_from_json("{not json"), std::invalid_argument);

    const auto path = std::filesystem::temp_directory_path() / "sknet_arch_test.json";
    {
        std::ofstream f(path);
        f << arch_to_json(v);
    }
    CHECK(load_arch(path.string()) == v);
    std::filesystem::remove(path);
    CHECK(load_arch("sknet26") == preset("sknet26"));
}

TEST_CASE("checkpoint round trip") {
    ArchSpec s = preset("sknet29-cifar");
    s.stages = {{1, 32, 32, 1}, {1, 32, 64, 2}};
    s.stem.channels = 16;
    s.sk.groups = 8;
    auto net = build(s, 9);
    const double mean[] = {0.1, 0.2, 0.3};
    net->set_input_mean(mean);
    // Move running statistics away from their initial values.
    {
        Tape tape(false);
        ForwardContext ctx{tape, true};
        net->forward(ctx, tape.constant(oracle::random_tensor({4, 3, 8, 8}, 10, 0.0, 1.0)));
    }
    const auto bytes = save_checkpoint(*net);
    CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "SKNETCKP");
    auto loaded = load_checkpoint(bytes);
    CHECK(save_checkpoint(*loaded) == bytes);
    CHECK(loaded->spec() == net->spec());
    CHECK(std::vector<double>(loaded->input_mean().begin(), loaded->input_mean().end()) ==
          std::vector<double>{0.1, 0.2, 0.3});
    Tensor x = oracle::random_tensor({2, 3, 8, 8}, 11, 0.0, 1.0);
    CHECK(loaded->infer(x) == net->infer(x));

    SUBCASE("truncated payload") {
        std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 9);
        CHECK_THROWS_AS(load_checkpoint(cut), CheckpointError);
        CHECK_THROWS_AS(load_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 5)), CheckpointError);
    }
    SUBCASE("bad magic, version and trailing bytes") {
        auto bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
        auto ver = bytes;
        ver[8] = 7;
        CHECK_THROWS_AS(load_checkpoint(ver), CheckpointError);
        auto extra = bytes;
        extra.push_back(0);
        CHECK_THROWS_AS(load_checkpoint(extra), CheckpointError);
    }
    SUBCASE("files") {
        const auto path = (std::filesystem::temp_directory_path() / "sknet_ckpt_test.bin").string();
        write_bytes(path, bytes);
        CHECK(read_bytes(path) == bytes);
        std::filesystem::remove(path);
        CHECK_THROWS(read_bytes(path));
    }
}

TEST_CASE("input mean is subtracted before the stem") {
    ArchSpec s = preset("resnext29-cifar");
    s.stages = {{1, 16, 32, 1}};
    s.groups = 4;
    s.stem.channels = 8;
    auto net = build(s, 12);
    Tensor x = oracle::random_tensor({1, 3, 8, 8}, 13, 0.0, 1.0);
    Tensor shifted = x;
    const double mean[] = {0.5, -0.25, 0.125};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 64; ++i) shifted.plane(0, c)[i] += mean[c];
    Tensor base = net->infer(x);
    net->set_input_mean(mean);
    CHECK(max_abs_diff(net->infer(shifted), base) < 1e-12);
    CHECK_THROWS_AS(net->set_input_mean(std::vector<double>{1.0}), std::invalid_argument);
}
