#include "sknet/arch.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace sknet {

using nlohmann::ordered_json;

void ArchSpec::validate() const {
    if (stages.empty()) throw std::invalid_argument("arch " + name + ": no stages");
    if (in_channels == 0 || num_classes == 0) throw std::invalid_argument("arch " + name + ": zero channels/classes");
    if (stem.channels == 0 || stem.kernel % 2 == 0 || stem.stride == 0) {
        throw std::invalid_argument("arch " + name + ": invalid stem");
    }
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const StageSpec& st = stages[i];
        const std::string where = "arch " + name + " stage " + std::to_string(i + 1);
        if (st.blocks == 0 || st.width == 0 || st.out_channels == 0 || st.stride == 0) {
            throw std::invalid_argument(where + ": zero field");
        }
        const std::size_t g = block == BlockKind::sknet ? sk.groups : groups;
        if (g == 0 || st.width % g != 0) {
            throw std::invalid_argument(where + ": width " + std::to_string(st.width) + " not divisible by groups " +
                                        std::to_string(g));
        }
        for (const auto& p : block == BlockKind::sknet ? sk.paths : std::vector<PathSpec>{}) {
            if (p.groups && st.width % p.groups != 0) {
                throw std::invalid_argument(where + ": width " + std::to_string(st.width) +
                                            " not divisible by path groups " + std::to_string(p.groups));
            }
        }
        if (block == BlockKind::senet && (se_reduction == 0 || st.out_channels / se_reduction == 0)) {
            throw std::invalid_argument(where + ": SE inner dimension would be zero");
        }
    }
    if (block == BlockKind::sknet) {
        SKConfig probe = sk;
        probe.channels = stages.front().width;
        probe.validate();
    }
}

namespace {

ArchSpec imagenet_base(std::string name, BlockKind kind, std::vector<std::size_t> blocks) {
    ArchSpec s;
    s.name = std::move(name);
    s.block = kind;
    s.stem = StemSpec{64, 7, 2, true};
    const std::size_t widths[] = {128, 256, 512, 1024};
    const std::size_t outs[] = {256, 512, 1024, 2048};
    for (std::size_t i = 0; i < 4; ++i) s.stages.push_back({blocks[i], widths[i], outs[i], i == 0 ? 1u : 2u});
    s.groups = 32;
    s.sk = SKConfig{};
    s.sk.groups = 32;
    s.sk.reduction = 16;
    s.sk.min_dim = 32;
    s.num_classes = 1000;
    return s;
}

// ResNeXt-29 16x32d: bottleneck widths 512/1024/2048, outputs 256/512/1024.
ArchSpec cifar_base(std::string name, BlockKind kind) {
    ArchSpec s;
    s.name = std::move(name);
    s.block = kind;
    s.stem = StemSpec{64, 3, 1, false};
    const std::size_t widths[] = {512, 1024, 2048};
    const std::size_t outs[] = {256, 512, 1024};
    for (std::size_t i = 0; i < 3; ++i) s.stages.push_back({3, widths[i], outs[i], i == 0 ? 1u : 2u});
    s.groups = 16;
    s.sk = SKConfig{};
    s.sk.paths = {{3, 1, true}, {1, 1, true}};
    s.sk.groups = 16;
    s.sk.reduction = 32;
    s.sk.min_dim = 32;
    s.num_classes = 10;
    return s;
}

const char* block_name(BlockKind k) {
    switch (k) {
    case BlockKind::resnext: return "resnext";
    case BlockKind::sknet: return "sknet";
    case BlockKind::senet: return "senet";
    }
    return "resnext";
}

BlockKind parse_block(const std::string& s) {
    if (s == "resnext") return BlockKind::resnext;
    if (s == "sknet") return BlockKind::sknet;
    if (s == "senet") return BlockKind::senet;
    throw std::invalid_argument("unknown block kind: " + s);
}

const char* unit_prefix(BlockKind k) {
    switch (k) {
    case BlockKind::resnext: return "RX";
    case BlockKind::sknet: return "SK";
    case BlockKind::senet: return "SE";
    }
    return "RX";
}

} // namespace

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"resnext50",       "senet50",       "sknet26",
                                                "sknet50",         "sknet101",      "resnext29-cifar",
                                                "senet29-cifar",   "sknet29-cifar"};
    return names;
}

ArchSpec preset(std::string_view name) {
    if (name == "resnext50") return imagenet_base("resnext50", BlockKind::resnext, {3, 4, 6, 3});
    if (name == "senet50") return imagenet_base("senet50", BlockKind::senet, {3, 4, 6, 3});
    if (name == "sknet26") return imagenet_base("sknet26", BlockKind::sknet, {2, 2, 2, 2});
    if (name == "sknet50") return imagenet_base("sknet50", BlockKind::sknet, {3, 4, 6, 3});
    if (name == "sknet101") return imagenet_base("sknet101", BlockKind::sknet, {3, 4, 23, 3});
    if (name == "resnext29-cifar") return cifar_base("resnext29-cifar", BlockKind::resnext);
    if (name == "senet29-cifar") return cifar_base("senet29-cifar", BlockKind::senet);
    if (name == "sknet29-cifar") return cifar_base("sknet29-cifar", BlockKind::sknet);
    throw std::invalid_argument("unknown preset: " + std::string(name));
}

std::string arch_to_json(const ArchSpec& s) {
    ordered_json j;
    j["name"] = s.name;
    j["in_channels"] = s.in_channels;
    j["stem"] = {{"channels", s.stem.channels},
                 {"kernel", s.stem.kernel},
                 {"stride", s.stem.stride},
                 {"max_pool", s.stem.max_pool}};
    auto& stages = j["stages"] = ordered_json::array();
    for (const auto& st : s.stages) {
        stages.push_back(
            {{"blocks", st.blocks}, {"width", st.width}, {"out_channels", st.out_channels}, {"stride", st.stride}});
    }
    j["block"] = block_name(s.block);
    j["groups"] = s.groups;
    ordered_json sk;
    auto& paths = sk["paths"] = ordered_json::array();
    for (const auto& p : s.sk.paths) {
        ordered_json pj{{"kernel", p.kernel}, {"dilation", p.dilation}, {"activation", p.activation}};
        if (p.groups) pj["groups"] = p.groups;
        paths.push_back(pj);
    }
    sk["groups"] = s.sk.groups;
    sk["reduction"] = s.sk.reduction;
    sk["min_dim"] = s.sk.min_dim;
    sk["aggregation"] = s.sk.aggregation == Aggregation::attention ? "attention" : "naive_sum";
    j["sk"] = sk;
    j["se_reduction"] = s.se_reduction;
    j["num_classes"] = s.num_classes;
    return j.dump(2);
}

ArchSpec arch_from_json(std::string_view text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("arch config is not valid JSON: ") + e.what());
    }
    try {
        ArchSpec s;
        s.name = j.value("name", std::string("custom"));
        s.in_channels = j.value("in_channels", s.in_channels);
        if (j.contains("stem")) {
            const auto& st = j["stem"];
            s.stem.channels = st.value("channels", s.stem.channels);
            s.stem.kernel = st.value("kernel", s.stem.kernel);
            s.stem.stride = st.value("stride", s.stem.stride);
            s.stem.max_pool = st.value("max_pool", s.stem.max_pool);
        }
        for (const auto& st : j.at("stages")) {
            s.stages.push_back({st.at("blocks").get<std::size_t>(), st.at("width").get<std::size_t>(),
                                st.at("out_channels").get<std::size_t>(), st.value("stride", std::size_t{1})});
        }
        s.block = parse_block(j.value("block", std::string("resnext")));
        s.groups = j.value("groups", s.groups);
        if (j.contains("sk")) {
            const auto& sk = j["sk"];
            if (sk.contains("paths")) {
                s.sk.paths.clear();
                for (const auto& p : sk["paths"]) {
                    s.sk.paths.push_back({p.at("kernel").get<std::size_t>(), p.value("dilation", std::size_t{1}),
                                          p.value("activation", true), p.value("groups", std::size_t{0})});
                }
            }
            s.sk.groups = sk.value("groups", s.sk.groups);
            s.sk.reduction = sk.value("reduction", s.sk.reduction);
            s.sk.min_dim = sk.value("min_dim", s.sk.min_dim);
            const std::string agg = sk.value("aggregation", std::string("attention"));
            if (agg == "attention") {
                s.sk.aggregation = Aggregation::attention;
            } else if (agg == "naive_sum") {
                s.sk.aggregation = Aggregation::naive_sum;
            } else {
                throw std::invalid_argument("unknown aggregation: " + agg);
            }
        }
        s.se_reduction = j.value("se_reduction", s.se_reduction);
        s.num_classes = j.value("num_classes", s.num_classes);
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("arch config: ") + e.what());
    }
}

ArchSpec load_arch(const std::string& preset_or_path) {
    for (const auto& n : preset_names()) {
        if (n == preset_or_path) return preset(n);
    }
    if (!std::filesystem::exists(preset_or_path)) {
        throw std::invalid_argument("'" + preset_or_path + "' is neither a preset nor a config file");
    }
    std::ifstream in(preset_or_path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return arch_from_json(text);
}

std::vector<PlannedUnit> unit_plan(const ArchSpec& spec) {
    spec.validate();
    std::vector<PlannedUnit> plan;
    std::size_t in = spec.stem.channels;
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
        const StageSpec& st = spec.stages[s];
        for (std::size_t b = 0; b < st.blocks; ++b) {
            UnitConfig c;
            c.kind = spec.block;
            c.in_channels = in;
            c.width = st.width;
            c.out_channels = st.out_channels;
            c.stride = b == 0 ? st.stride : 1;
            c.groups = spec.groups;
            c.sk = spec.sk;
            c.sk.channels = st.width;
            c.se_reduction = spec.se_reduction;
            plan.push_back({std::string(unit_prefix(spec.block)) + "_" + std::to_string(s + 2) + "_" +
                                std::to_string(b + 1),
                            c});
            in = st.out_channels;
        }
    }
    return plan;
}

Network::Network(const ArchSpec& spec)
    : spec_(spec),
      stem_conv_(store_, "stem.conv",
                 ConvGeometry::same(spec.in_channels, spec.stem.channels, spec.stem.kernel, spec.stem.stride)),
      stem_bn_(store_, "stem.bn", spec.stem.channels),
      input_mean_(&store_.add_buffer("input.mean", spec.in_channels, 0.0)) {
    for (const auto& u : unit_plan(spec_)) units_.emplace_back(store_, u.id, u.config);
    classifier_.emplace(store_, "classifier", spec_.stages.back().out_channels, spec_.num_classes, true);
}

Var Network::forward(ForwardContext& ctx, const Var& input) const {
    if (input.shape().c != spec_.in_channels) {
        throw std::invalid_argument("network expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                                    input.shape().str());
    }
    Var x = input;
    const auto& mean = input_mean_->values;
    if (std::any_of(mean.begin(), mean.end(), [](double v) { return v != 0.0; })) {
        const Shape s = input.shape();
        Tensor shifted = input.value();
        for (std::size_t n = 0; n < s.n; ++n) {
            for (std::size_t c = 0; c < s.c; ++c) {
                double* p = shifted.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) p[i] -= mean[c];
            }
        }
        x = ctx.tape.record(std::move(shifted), {input},
                            [](const Tensor& g, std::span<Tensor*> grads) { *grads[0] += g; });
    }
    Var h = ag::relu(ctx.tape, stem_bn_.forward(ctx, stem_conv_.forward(ctx, x)));
    if (ctx.shape_trace) ctx.shape_trace->emplace_back("stem.conv", h.shape());
    if (spec_.stem.max_pool) {
        h = ag::max_pool2d(ctx.tape, h, 3, 2, 1);
        if (ctx.shape_trace) ctx.shape_trace->emplace_back("stem.pool", h.shape());
    }
    for (const auto& u : units_) {
        h = u.forward(ctx, h);
        if (ctx.shape_trace) ctx.shape_trace->emplace_back(u.id(), h.shape());
    }
    h = ag::global_avg_pool(ctx.tape, h);
    return classifier_->forward(ctx, h);
}

Tensor Network::infer(const Tensor& batch, AttentionSink* sink) const {
    Tape tape(false);
    ForwardContext ctx{tape, false, sink};
    return forward(ctx, tape.constant(batch)).value();
}

void Network::set_input_mean(std::span<const double> mean) {
    if (mean.size() != spec_.in_channels) throw std::invalid_argument("input mean size does not match input channels");
    input_mean_->values.assign(mean.begin(), mean.end());
}

std::vector<std::string> Network::sk_unit_ids() const {
    std::vector<std::string> ids;
    for (const auto& u : units_) {
        if (u.sk() && u.sk()->config().aggregation == Aggregation::attention) ids.push_back(u.id());
    }
    return ids;
}

std::unique_ptr<Network> build(const ArchSpec& spec, std::uint64_t seed) {
    auto net = std::make_unique<Network>(spec);
    net->store().initialize(seed);
    return net;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'K', 'N', 'E', 'T', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    void u8(std::uint8_t v) { out.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes(b) {}
    void need(std::size_t n) const {
        if (pos + n > bytes.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
    }
    std::uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
};

struct ManifestEntry {
    std::string name;
    std::uint8_t kind;  // 0 param, 1 buffer
    Shape shape;
    std::uint64_t offset;
};

std::vector<ManifestEntry> manifest_of(const ParamStore& store) {
    std::vector<ManifestEntry> m;
    std::uint64_t offset = 0;
    for (const auto& p : store.params()) {
        m.push_back({p.name, 0, p.value.shape(), offset});
        offset += p.value.numel();
    }
    for (const auto& b : store.buffers()) {
        m.push_back({b.name, 1, Shape{b.values.size(), 1, 1, 1}, offset});
        offset += b.values.size();
    }
    return m;
}

} // namespace

std::vector<std::uint8_t> save_checkpoint(const Network& net) {
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.str(arch_to_json(net.spec()));
    const auto manifest = manifest_of(net.store());
    w.u64(manifest.size());
    std::uint64_t total = 0;
    for (const auto& e : manifest) {
        w.str(e.name);
        w.u8(e.kind);
        w.u64(e.shape.n);
        w.u64(e.shape.c);
        w.u64(e.shape.h);
        w.u64(e.shape.w);
        w.u64(e.offset);
        total += e.shape.numel();
    }
    w.u64(total);
    for (const auto& p : net.store().params()) {
        for (double v : p.value.data()) w.f64(v);
    }
    for (const auto& b : net.store().buffers()) {
        for (double v : b.values) w.f64(v);
    }
    return std::move(w.out);
}

std::unique_ptr<Network> load_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    r.need(sizeof kMagic);
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw CheckpointError("not an sknet checkpoint");
    r.pos = sizeof kMagic;
    const std::uint32_t version = r.u32();
    if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    ArchSpec spec;
    try {
        spec = arch_from_json(r.str());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint architecture: ") + e.what());
    }
    auto net = std::make_unique<Network>(spec);
    const auto expected = manifest_of(net->store());
    const std::uint64_t count = r.u64();
    if (count != expected.size()) {
        throw CheckpointError("checkpoint has " + std::to_string(count) + " entries, architecture needs " +
                              std::to_string(expected.size()));
    }
    std::uint64_t total = 0;
    for (const auto& e : expected) {
        ManifestEntry got;
        got.name = r.str();
        got.kind = r.u8();
        got.shape.n = r.u64();
        got.shape.c = r.u64();
        got.shape.h = r.u64();
        got.shape.w = r.u64();
        got.offset = r.u64();
        if (got.name != e.name || got.kind != e.kind || got.shape != e.shape || got.offset != e.offset) {
            throw CheckpointError("checkpoint entry '" + got.name + "' " + got.shape.str() + " does not match '" +
                                  e.name + "' " + e.shape.str());
        }
        total += e.shape.numel();
    }
    if (r.u64() != total) throw CheckpointError("checkpoint value count mismatch");
    r.need(total * 8);
    for (auto& p : net->store().params()) {
        for (auto& v : p.value.data()) v = r.f64();
    }
    for (auto& b : net->store().buffers()) {
        for (auto& v : b.values) v = r.f64();
    }
    if (r.pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
    return net;
}

void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace sknet
