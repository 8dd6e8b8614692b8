#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "sknet/sk_block.hpp"
#include "sknet/unit_check.hpp"

using namespace sknet;

namespace {

SKConfig make_config(std::size_t c, std::size_t groups, std::size_t r, std::size_t l) {
    SKConfig cfg;
    cfg.channels = c;
    cfg.groups = groups;
    cfg.reduction = r;
    cfg.min_dim = l;
    return cfg;
}

/// Random BN affine values and statistics so inference BN is not the identity.
void perturb(ParamStore& store, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto& p : store.params()) {
        if (p.role == ParamRole::bn_gamma || p.role == ParamRole::bn_beta || p.role == ParamRole::fc_bias) {
            for (auto& v : p.value.data()) v += u(rng);
        }
    }
    for (auto& b : store.buffers()) {
        for (auto& v : b.values) v = b.initial + 0.5 * std::abs(u(rng));
    }
}

/// Composes conv -> BN (inference) -> optional ReLU from the raw kernels.
Tensor compose_path(const SKConv::Path& p, const Tensor& x) {
    Tensor y = conv2d(x, p.conv.weight().value, p.conv.geometry());
    BatchNormView v{p.bn.gamma().value.data(), p.bn.beta().value.data(), p.bn.running_mean().values,
                    p.bn.running_var().values};
    y = batch_norm(y, v, false);
    return p.activation ? relu(y) : y;
}

struct Run {
    std::vector<Tensor> paths;
    Tensor z;
    Tensor output;
    Tensor attention;
};

Run run_sk(const SKConv& sk, const Tensor& x, bool training = false) {
    Tape tape(false);
    ForwardContext ctx{tape, training};
    Var in = tape.constant(x);
    auto paths = sk.split(ctx, in);
    Run r;
    for (auto& p : paths) r.paths.push_back(p.value());
    if (sk.config().aggregation == Aggregation::attention) {
        Var z = sk.fuse(ctx, paths);
        auto sel = sk.select(ctx, paths, z);
        r.z = z.value();
        r.output = sel.output.value();
        r.attention = sel.attention.value();
    } else {
        r.output = sk.forward(ctx, in).value();
    }
    return r;
}

}  // namespace

TEST_CASE("path and config validation") {
    CHECK_THROWS_AS((PathSpec{1, 2, true}).validate(), std::invalid_argument);
    CHECK_THROWS_AS((PathSpec{4, 1, true}).validate(), std::invalid_argument);
    CHECK_NOTHROW((PathSpec{1, 1, true}).validate());
    CHECK((PathSpec{3, 2, true}).extent() == 5);
    CHECK((PathSpec{3, 3, true}).extent() == 7);

    SKConfig one = make_config(8, 4, 4, 4);
    one.paths = {{3, 1, true}};
    CHECK_THROWS_AS(one.validate(), std::invalid_argument);
    one.aggregation = Aggregation::naive_sum;
    CHECK_NOTHROW(one.validate());
    SKConfig bad = make_config(10, 4, 4, 4);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    SKConfig path_groups = make_config(8, 4, 4, 4);
    path_groups.paths[1].groups = 3;
    CHECK_THROWS_AS(path_groups.validate(), std::invalid_argument);
}

TEST_CASE("fuse width follows the max rule with integer division") {
    CHECK(make_config(128, 32, 16, 32).fuse_dim() == 32);
    CHECK(make_config(1024, 32, 16, 32).fuse_dim() == 64);
    CHECK(make_config(8, 8, 16, 32).fuse_dim() == 32);
    CHECK(make_config(100, 4, 16, 4).fuse_dim() == 6);
}

TEST_CASE("split of the default two-path configuration") {
    ParamStore store;
    SKConv sk(store, "sk", make_config(32, 32, 16, 32), 32, 1);
    store.initialize(1);
    CHECK(sk.paths().size() == 2);
    CHECK(sk.paths()[1].conv.geometry().dilation == 2);
    Tensor x = oracle::random_tensor({1, 32, 8, 8}, 2);
    Run r = run_sk(sk, x);
    REQUIRE(r.paths.size() == 2);
    for (const auto& p : r.paths) CHECK(p.shape() == Shape{1, 32, 8, 8});
}

TEST_CASE("zero path weights give zero path outputs") {
    ParamStore store;
    SKConv sk(store, "sk", make_config(8, 4, 4, 4), 8, 1);
    store.initialize(3);
    for (auto& p : store.params())
        if (p.role == ParamRole::conv_weight) p.value.fill(0.0);
    Run r = run_sk(sk, oracle::random_tensor({2, 8, 5, 5}, 4), true);
    for (const auto& p : r.paths)
        for (double v : p.data()) CHECK(v == 0.0);
}

TEST_CASE("split equals independently composed conv, BN and ReLU") {
    ParamStore store;
    SKConfig cfg = make_config(8, 2, 4, 4);
    cfg.paths = {{3, 1, true}, {3, 2, false}, {1, 1, true}};
    SKConv sk(store, "sk", cfg, 6, 2);
    store.initialize(5);
    perturb(store, 6);
    Tensor x = oracle::random_tensor({2, 6, 7, 7}, 7);
    Run r = run_sk(sk, x);
    for (std::size_t m = 0; m < 3; ++m) {
        CHECK(r.paths[m].shape() == Shape{2, 8, 4, 4});
        CHECK(max_abs_diff(r.paths[m], compose_path(sk.paths()[m], x)) < 1e-12);
    }
}

TEST_CASE("fuse of constant paths squeezes to their sum") {
    ParamStore store;
    SKConv sk(store, "sk", make_config(4, 2, 2, 3), 4, 1);
    store.initialize(8);
    perturb(store, 9);
    Tape tape(false);
    ForwardContext ctx{tape, false};
    const double u = 0.75, v = -0.25;
    std::vector<Var> paths{tape.constant(Tensor(Shape{2, 4, 3, 3}, u)), tape.constant(Tensor(Shape{2, 4, 3, 3}, v))};
    Tensor z = sk.fuse(ctx, paths).value();
    REQUIRE(z.shape() == Shape{2, 3, 1, 1});
    const Tensor& w = sk.fuse_fc()->weight().value;
    const auto& bn = *sk.fuse_bn();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t k = 0; k < 3; ++k) {
            double ws = 0.0;
            for (std::size_t c = 0; c < 4; ++c) ws += w.at(k, c, 0, 0) * (u + v);
            const double b = (ws - bn.running_mean().values[k]) / std::sqrt(bn.running_var().values[k] + 1e-5) *
                                 bn.gamma().value[k] +
                             bn.beta().value[k];
            CHECK(std::abs(z.at(n, k, 0, 0) - std::max(b, 0.0)) < 1e-12);
        }
}

TEST_CASE("select follows the channel-wise softmax and weighted sum") {
    ParamStore store;
    SKConfig cfg = make_config(6, 3, 2, 3);
    cfg.paths = {{3, 1, true}, {3, 2, true}, {3, 3, true}};
    SKConv sk(store, "sk", cfg, 6, 1);
    store.initialize(10);
    perturb(store, 11);
    Run r = run_sk(sk, oracle::random_tensor({3, 6, 5, 5}, 12));
    const std::size_t m_paths = 3, c = 6, d = 3;
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t ch = 0; ch < c; ++ch) {
            std::vector<double> logits(m_paths, 0.0);
            for (std::size_t m = 0; m < m_paths; ++m)
                for (std::size_t k = 0; k < d; ++k)
                    logits[m] += sk.select_fcs()[m].weight().value.at(ch, k, 0, 0) * r.z.at(n, k, 0, 0);
            auto a = oracle::softmax_column(logits);
            double sum = 0.0;
            for (std::size_t m = 0; m < m_paths; ++m) {
                CHECK(std::abs(r.attention.at(n, m * c + ch, 0, 0) - a[m]) < 1e-12);
                sum += r.attention.at(n, m * c + ch, 0, 0);
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
            for (std::size_t i = 0; i < 25; ++i) {
                double v = 0.0;
                for (std::size_t m = 0; m < m_paths; ++m) v += a[m] * r.paths[m].plane(n, ch)[i];
                CHECK(std::abs(r.output.plane(n, ch)[i] - v) < 1e-12);
            }
        }
}

TEST_CASE("identical select matrices give uniform attention and the path mean") {
    for (std::size_t m_paths : {2, 4}) {
        ParamStore store;
        SKConfig cfg = make_config(4, 2, 2, 4);
        cfg.paths.clear();
        for (std::size_t m = 0; m < m_paths; ++m) cfg.paths.push_back({3, m + 1, true});
        SKConv sk(store, "sk", cfg, 4, 1);
        store.initialize(13);
        perturb(store, 14);
        for (std::size_t m = 1; m < m_paths; ++m) sk.select_fcs()[m].weight().value = sk.select_fcs()[0].weight().value;
        Tensor x = oracle::random_tensor({2, 4, 6, 6}, 15);
        Run r = run_sk(sk, x);
        for (double a : r.attention.data()) CHECK(a == 1.0 / static_cast<double>(m_paths));

        // Attention output equals the naive sum divided by M, bit for bit.
        ParamStore naive_store;
        SKConfig ncfg = cfg;
        ncfg.aggregation = Aggregation::naive_sum;
        SKConv naive(naive_store, "sk", ncfg, 4, 1);
        for (std::size_t m = 0; m < m_paths; ++m) {
            naive.paths()[m].conv.weight().value = sk.paths()[m].conv.weight().value;
            naive.paths()[m].bn.gamma().value = sk.paths()[m].bn.gamma().value;
            naive.paths()[m].bn.beta().value = sk.paths()[m].bn.beta().value;
            naive.paths()[m].bn.running_mean().values = sk.paths()[m].bn.running_mean().values;
            naive.paths()[m].bn.running_var().values = sk.paths()[m].bn.running_var().values;
        }
        Tensor summed = run_sk(naive, x).output;
        CHECK(r.output == scale(summed, 1.0 / static_cast<double>(m_paths)));
    }
}

TEST_CASE("attention endpoint selects a single path exactly") {
    Tensor u0 = oracle::random_tensor({1, 3, 4, 4}, 16);
    Tensor u1 = oracle::random_tensor({1, 3, 4, 4}, 17);
    Tensor att(Shape{1, 6, 1, 1}, std::vector<double>{1, 1, 1, 0, 0, 0});
    std::vector<Tensor> paths{u0, u1};
    CHECK(weighted_path_sum(paths, att) == u0);
}

TEST_CASE("two-path sigmoid form with a zero second matrix") {
    ParamStore store;
    SKConv sk(store, "sk", make_config(8, 4, 2, 4), 8, 1);
    store.initialize(18);
    perturb(store, 19);
    sk.select_fcs()[1].weight().value.fill(0.0);
    Run r = run_sk(sk, oracle::random_tensor({2, 8, 5, 5}, 20));
    const std::size_t c = 8, d = 4;
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double logit = 0.0;
            for (std::size_t k = 0; k < d; ++k) logit += sk.select_fcs()[0].weight().value.at(ch, k, 0, 0) * r.z.at(n, k, 0, 0);
            const double a = 1.0 / (1.0 + std::exp(-logit));
            for (std::size_t i = 0; i < 25; ++i) {
                const double v = a * r.paths[0].plane(n, ch)[i] + (1.0 - a) * r.paths[1].plane(n, ch)[i];
                CHECK(std::abs(r.output.plane(n, ch)[i] - v) < 1e-12);
            }
        }
}

TEST_CASE("single-path naive sum collapses to a plain path") {
    ParamStore store;
    SKConfig cfg = make_config(8, 4, 4, 4);
    cfg.paths = {{3, 1, true}};
    cfg.aggregation = Aggregation::naive_sum;
    SKConv sk(store, "sk", cfg, 8, 1);
    store.initialize(21);
    perturb(store, 22);
    CHECK(sk.select_fcs().empty());
    CHECK(!sk.fuse_fc().has_value());
    Tensor x = oracle::random_tensor({2, 8, 5, 5}, 23);
    CHECK(run_sk(sk, x).output == compose_path(sk.paths()[0], x));
}

TEST_CASE("attention output is a convex combination of the paths") {
    std::mt19937_64 rng(24);
    for (int rep = 0; rep < 20; ++rep) {
        ParamStore store;
        SKConv sk(store, "sk", make_config(8, 4, 4, 4), 8, 1);
        store.initialize(rng());
        perturb(store, rng());
        Run r = run_sk(sk, oracle::random_tensor({2, 8, 4, 4}, rng()), true);
        for (std::size_t i = 0; i < r.output.numel(); ++i) {
            const double lo = std::min(r.paths[0][i], r.paths[1][i]);
            const double hi = std::max(r.paths[0][i], r.paths[1][i]);
            CHECK(r.output[i] >= lo - 1e-15);
            CHECK(r.output[i] <= hi + 1e-15);
        }
    }
}

TEST_CASE("default SK[2,32,16] at 128 channels records normalized attention") {
    ParamStore store;
    SKConv sk(store, "SK_2_1", make_config(128, 32, 16, 32), 128, 1);
    store.initialize(25);
    Tape tape(false);
    AttentionSink sink;
    ForwardContext ctx{tape, false, &sink};
    sk.forward(ctx, tape.constant(oracle::random_tensor({2, 128, 6, 6}, 26)), "SK_2_1");
    REQUIRE(sink.size() == 1);
    CHECK(sink[0].unit == "SK_2_1");
    CHECK(sink[0].path_extents == std::vector<std::size_t>{3, 5});
    const Tensor& a = sink[0].attention;
    REQUIRE(a.shape() == Shape{2, 256, 1, 1});
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 128; ++c) CHECK(std::abs(a.at(n, c, 0, 0) + a.at(n, 128 + c, 0, 0) - 1.0) < 1e-9);
}

TEST_CASE("bottleneck unit") {
    UnitConfig u;
    u.kind = BlockKind::sknet;
    u.in_channels = 16;
    u.width = 8;
    u.out_channels = 16;
    u.stride = 1;
    u.sk = make_config(0, 4, 4, 4);

    SUBCASE("zero last gamma passes the shortcut through") {
        ParamStore store;
        BottleneckUnit unit(store, "SK_2_1", u);
        store.initialize(27);
        CHECK(!unit.has_projection());
        unit.last_bn().gamma().value.fill(0.0);
        Tensor x = oracle::random_tensor({2, 16, 5, 5}, 28);
        Tape tape(false);
        ForwardContext ctx{tape, true};
        CHECK(unit.forward(ctx, tape.constant(x)).value() == relu(x));
    }
    SUBCASE("stride 1 keeps and stride 2 halves the spatial size") {
        ParamStore store;
        BottleneckUnit keep(store, "a", u);
        UnitConfig s2 = u;
        s2.stride = 2;
        s2.out_channels = 32;
        BottleneckUnit half(store, "b", s2);
        store.initialize(29);
        CHECK(half.has_projection());
        Tape tape(false);
        ForwardContext ctx{tape, true};
        Var x = tape.constant(oracle::random_tensor({2, 16, 56, 56}, 30));
        CHECK(keep.forward(ctx, x).shape() == Shape{2, 16, 56, 56});
        CHECK(half.forward(ctx, x).shape() == Shape{2, 32, 28, 28});
    }
    SUBCASE("zero last gamma with projection gives ReLU of the projected shortcut") {
        UnitConfig s2 = u;
        s2.stride = 2;
        s2.out_channels = 32;
        s2.kind = BlockKind::resnext;
        s2.groups = 4;
        ParamStore store;
        BottleneckUnit unit(store, "RX_2_1", s2);
        store.initialize(31);
        unit.last_bn().gamma().value.fill(0.0);
        Tensor x = oracle::random_tensor({2, 16, 6, 6}, 32);
        Tape tape(false);
        ForwardContext ctx{tape, false};
        Tensor got = unit.forward(ctx, tape.constant(x)).value();
        Tensor proj = conv2d(x, store.find_param("RX_2_1.shortcut.conv.weight")->value,
                             ConvGeometry::same(16, 32, 1, 2));
        BatchNormState st(32);
        CHECK(max_abs_diff(got, relu(batch_norm(proj, st, false))) < 1e-12);
    }
}

TEST_CASE("squeeze-excitation branch") {
    SUBCASE("fc shapes at 256 channels") {
        ParamStore store;
        SEBranch se(store, "se", {256, 16});
        CHECK(se.reduce().weight().value.shape() == Shape{16, 256, 1, 1});
        CHECK(se.expand().weight().value.shape() == Shape{256, 16, 1, 1});
    }
    SUBCASE("zero weights give half gates") {
        ParamStore store;
        SEBranch se(store, "se", {8, 4});
        Tensor x = oracle::random_tensor({2, 8, 3, 3}, 33);
        Tape tape(false);
        ForwardContext ctx{tape, false};
        CHECK(se.forward(ctx, tape.constant(x)).value() == scale(x, 0.5));
    }
    SUBCASE("saturated gates give the identity") {
        ParamStore store;
        SEBranch se(store, "se", {8, 4});
        store.initialize(34);
        se.expand().weight().value.fill(0.0);
        for (auto& b : se.expand().bias()->value.data()) b = 1000.0;
        Tensor x = oracle::random_tensor({2, 8, 3, 3}, 35);
        Tape tape(false);
        ForwardContext ctx{tape, false};
        CHECK(se.forward(ctx, tape.constant(x)).value() == x);
    }
    CHECK_THROWS_AS(SEBranch(*std::make_unique<ParamStore>(), "se", {8, 16}), std::invalid_argument);
}

TEST_CASE("SK bottleneck unit passes finite differences") {
    for (const char* kind : {"sknet", "sknet-naive"}) {
        UnitCheckSpec s;
        s.unit = kind;
        s.channels = 4;
        s.min_dim = 4;
        s.seed = 1;
        CHECK(check_unit(s).max_rel_error() < 1e-5);
    }
}
