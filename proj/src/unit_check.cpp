#include "sknet/unit_check.hpp"

#include <numeric>
#include <random>

namespace sknet {

const std::vector<std::string>& unit_check_kinds() {
    static const std::vector<std::string> kinds{"sk", "sk-naive", "sknet", "sknet-naive", "resnext", "senet", "toynet"};
    return kinds;
}

ArchSpec toy_network_spec(std::size_t channels) {
    ArchSpec a;
    a.name = "toynet";
    a.in_channels = 3;
    a.stem = {channels, 3, 1, false};
    a.stages = {{1, channels, 2 * channels, 1}, {1, channels, 2 * channels, 2}, {1, 2 * channels, 4 * channels, 2}};
    a.block = BlockKind::sknet;
    a.groups = 4;
    a.sk.paths = {{3, 1, true}, {3, 2, true}};
    a.sk.groups = 4;
    a.sk.reduction = 4;
    a.sk.min_dim = 4;
    a.num_classes = 5;
    return a;
}

namespace {

struct Probe {
    Param input;
    Tensor weights;
};

Probe make_probe(Shape in, Shape out, std::mt19937_64& rng) {
    Probe p;
    p.input.name = "input";
    p.input.role = ParamRole::input;
    p.input.value = Tensor::randn(in, rng);
    p.weights = Tensor::randn(out, rng);
    return p;
}

} // namespace

GradCheckReport check_unit(const UnitCheckSpec& spec) {
    if (spec.channels == 0 || spec.batch < 2 || spec.spatial == 0) {
        throw std::invalid_argument("gradcheck needs channels >= 1, batch >= 2 and spatial >= 1");
    }
    const std::size_t c = spec.channels;
    const std::size_t groups = spec.groups ? spec.groups : std::gcd(c, std::size_t{32});
    const std::size_t hw = spec.spatial;
    std::mt19937_64 rng(spec.seed);
    ParamStore store;
    std::vector<Param*> params;

    ScalarGraph graph;
    Probe probe;
    // Owned blocks; exactly one is set.
    std::unique_ptr<SKConv> sk;
    std::unique_ptr<BottleneckUnit> unit;
    std::unique_ptr<Network> net;

    if (spec.unit == "sk" || spec.unit == "sk-naive") {
        SKConfig cfg;
        cfg.channels = c;
        cfg.groups = groups;
        cfg.reduction = spec.reduction;
        cfg.min_dim = spec.min_dim;
        cfg.aggregation = spec.unit == "sk" ? Aggregation::attention : Aggregation::naive_sum;
        sk = std::make_unique<SKConv>(store, "sk", cfg, c, 1);
        probe = make_probe({spec.batch, c, hw, hw}, {spec.batch, c, hw, hw}, rng);
    } else if (spec.unit == "sknet" || spec.unit == "sknet-naive" || spec.unit == "resnext" || spec.unit == "senet") {
        UnitConfig u;
        u.kind = spec.unit == "resnext" ? BlockKind::resnext : spec.unit == "senet" ? BlockKind::senet : BlockKind::sknet;
        if (spec.unit == "sknet-naive") u.sk.aggregation = Aggregation::naive_sum;
        u.in_channels = c;
        u.width = c;
        u.out_channels = 2 * c;
        u.stride = 2;
        u.groups = groups;
        u.sk.groups = groups;
        u.sk.reduction = spec.reduction;
        u.sk.min_dim = spec.min_dim;
        u.se_reduction = 4;
        unit = std::make_unique<BottleneckUnit>(store, "unit", u);
        const std::size_t ho = (hw + 1) / 2;
        probe = make_probe({spec.batch, c, hw, hw}, {spec.batch, 2 * c, ho, ho}, rng);
    } else if (spec.unit == "toynet") {
        net = build(toy_network_spec(c), spec.seed);
        probe = make_probe({spec.batch, 3, hw, hw}, {spec.batch, net->spec().num_classes, 1, 1}, rng);
    } else {
        throw std::invalid_argument("unknown gradcheck unit '" + spec.unit + "'");
    }
    if (!net) store.initialize(spec.seed);

    ParamStore& owner = net ? net->store() : store;
    // Random BN affine values so the check does not sit at gamma = 1, beta = 0.
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto& p : owner.params()) {
        if (p.role == ParamRole::bn_gamma || p.role == ParamRole::bn_beta || p.role == ParamRole::fc_bias) {
            for (auto& v : p.value.data()) v += jitter(rng);
        }
        params.push_back(&p);
    }
    params.push_back(&probe.input);

    graph = [&](Tape& tape) {
        ForwardContext ctx{tape, true};
        Var x = tape.param(probe.input);
        Var y = sk ? sk->forward(ctx, x, "sk") : unit ? unit->forward(ctx, x) : net->forward(ctx, x);
        return ag::dot(tape, y, probe.weights);
    };
    return grad_check(graph, params, spec.step);
}

} // namespace sknet
