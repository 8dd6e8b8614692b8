#include "sknet/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sknet/attention_lab.hpp"
#include "sknet/cost_model.hpp"
#include "sknet/data.hpp"
#include "sknet/train.hpp"
#include "sknet/unit_check.hpp"

namespace sknet::cli {

namespace {

using Json = nlohmann::ordered_json;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

ArchSpec resolve_arch(const std::string& name) {
    try {
        return load_arch(name);
    } catch (const std::exception& e) {
        throw UsageError(std::string("--arch: ") + e.what());
    }
}

void emit(const std::string& text, const std::string& path, std::ostream& out) {
    if (path.empty()) {
        out << text;
        if (!text.empty() && text.back() != '\n') out << '\n';
    } else {
        write_text(path, text);
    }
}

void print_config(std::ostream& err, const Json& cfg) { err << "config " << cfg.dump() << '\n'; }

std::vector<double> parse_scales(const std::string& text) {
    std::vector<double> scales;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::logic_error&) {
            throw UsageError("--scales: '" + item + "' is not a number");
        }
        if (used != item.size()) throw UsageError("--scales: '" + item + "' is not a number");
        if (!(v >= 1.0)) throw UsageError("--scales: every scale must be >= 1");
        scales.push_back(v);
    }
    if (scales.empty()) throw UsageError("--scales: empty list");
    return scales;
}

// Shared data flags of train and analyze.
struct DataFlags {
    std::string dataset = "synthetic";
    std::string dir;
    std::size_t canvas = 32;
    double scale_min = 0.5;
    double scale_max = 1.0;
    double noise = 0.03;
};

void add_data_flags(CLI::App* app, DataFlags& f) {
    app->add_option("--dataset", f.dataset, "cifar10, cifar100 or synthetic")
        ->check(CLI::IsMember({"cifar10", "cifar100", "synthetic"}));
    app->add_option("--data", f.dir, "Directory with the CIFAR binary files");
    app->add_option("--canvas", f.canvas, "Synthetic image side");
    app->add_option("--scale-min", f.scale_min, "Smallest synthetic object scale");
    app->add_option("--scale-max", f.scale_max, "Largest synthetic object scale");
    app->add_option("--noise", f.noise, "Synthetic pixel noise stddev");
}

Json data_json(const DataFlags& f) {
    Json j{{"dataset", f.dataset}};
    if (f.dataset == "synthetic") {
        j["canvas"] = f.canvas;
        j["scale_min"] = f.scale_min;
        j["scale_max"] = f.scale_max;
        j["noise"] = f.noise;
    } else {
        j["data"] = f.dir;
    }
    return j;
}

int cifar_variant(const DataFlags& f) { return f.dataset == "cifar100" ? 100 : 10; }

SyntheticScaleSpec synthetic_spec(const DataFlags& f, std::uint64_t seed) {
    SyntheticScaleSpec s;
    s.canvas = f.canvas;
    s.base_extent = static_cast<double>(f.canvas) / 2.0;
    s.scale_min = f.scale_min;
    s.scale_max = f.scale_max;
    s.noise = f.noise;
    s.seed = seed;
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return s;
}

void check_data_flags(const DataFlags& f) {
    if (f.dataset != "synthetic" && f.dir.empty()) throw UsageError("--data is required for --dataset " + f.dataset);
}

std::size_t class_count(const DataFlags& f) {
    if (f.dataset == "synthetic") return SyntheticScaleSpec{}.shapes.size();
    return static_cast<std::size_t>(cifar_variant(f));
}

std::vector<LabeledImage> take(std::vector<LabeledImage> v, std::size_t n) {
    if (n && n < v.size()) v.resize(n);
    return v;
}

// ---------------------------------------------------------------------------

struct CountCmd {
    std::string arch;
    std::size_t res = 0;
    std::string format = "table";
    std::string out;
};

int do_count(const CountCmd& c, std::ostream& out, std::ostream& err) {
    const ArchSpec spec = resolve_arch(c.arch);
    std::size_t res = c.res;
    if (res == 0) res = (spec.stem.stride == 1 && !spec.stem.max_pool) ? 32 : 224;
    print_config(err, {{"command", "count"}, {"arch", spec.name}, {"res", res}, {"format", c.format}, {"out", c.out}});
    const CostReport r = count_cost(spec, res);
    emit(c.format == "json" ? r.to_json() : r.to_table(), c.out, out);
    return ok;
}

struct PresetsCmd {
    std::string format = "table";
};

int do_presets(const PresetsCmd& c, std::ostream& out, std::ostream& err) {
    print_config(err, {{"command", "presets"}, {"format", c.format}});
    if (c.format == "json") {
        out << Json(preset_names()).dump(2) << '\n';
    } else {
        for (const auto& n : preset_names()) out << n << '\n';
    }
    return ok;
}

struct GradCmd {
    UnitCheckSpec spec;
    double tolerance = 1e-5;
    std::string out;
};

int do_gradcheck(const GradCmd& c, std::ostream& out, std::ostream& err) {
    const auto& kinds = unit_check_kinds();
    if (std::find(kinds.begin(), kinds.end(), c.spec.unit) == kinds.end()) {
        throw UsageError("--unit must be one of: sk, sk-naive, sknet, sknet-naive, resnext, senet, toynet");
    }
    const UnitCheckSpec& s = c.spec;
    print_config(err, {{"command", "gradcheck"},
                       {"unit", s.unit},
                       {"channels", s.channels},
                       {"groups", s.groups},
                       {"reduction", s.reduction},
                       {"min_dim", s.min_dim},
                       {"batch", s.batch},
                       {"spatial", s.spatial},
                       {"seed", s.seed},
                       {"step", s.step},
                       {"tolerance", c.tolerance}});
    GradCheckReport report;
    try {
        report = check_unit(s);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    emit(report.to_json(), c.out, out);
    if (!(report.max_rel_error() < c.tolerance)) {
        err << "gradient check failed: max relative error " << report.max_rel_error() << " >= " << c.tolerance << '\n';
        return runtime_error;
    }
    return ok;
}

struct TrainCmd {
    std::string arch;
    DataFlags data;
    std::size_t epochs = 1;
    std::size_t batch = 64;
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double label_smoothing = 0.0;
    std::string schedule = "step";
    std::string augment;
    std::size_t samples = 0;
    std::size_t eval_samples = 0;
    std::size_t accumulation = 1;
    std::uint64_t seed = 0;
    std::string format = "csv";
    std::string out;
    std::string checkpoint;
};

int do_train(const TrainCmd& c, std::ostream& out, std::ostream& err) {
    const ArchSpec spec = resolve_arch(c.arch);
    check_data_flags(c.data);
    if (class_count(c.data) > spec.num_classes) {
        throw UsageError("--arch " + spec.name + " has " + std::to_string(spec.num_classes) +
                         " classes, dataset needs " + std::to_string(class_count(c.data)));
    }
    const bool synthetic = c.data.dataset == "synthetic";
    OptimConfig cfg;
    cfg.lr0 = c.lr0;
    cfg.momentum = c.momentum;
    cfg.weight_decay = c.weight_decay;
    cfg.label_smoothing = c.label_smoothing;
    cfg.batch = c.batch;
    cfg.epochs = c.epochs;
    cfg.seed = c.seed;
    cfg.accumulation = c.accumulation;
    if (c.schedule == "step") cfg.schedule = {{0.5, 0.1, true}, {0.75, 0.1, true}};
    const std::string augment = c.augment.empty() ? (synthetic ? "none" : "cifar") : c.augment;
    cfg.augment = augment == "cifar" ? AugmentMode::cifar_standard : AugmentMode::none;
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const std::size_t samples = c.samples ? c.samples : (synthetic ? 256 : 0);
    const std::size_t eval_samples = c.eval_samples ? c.eval_samples : (synthetic ? 128 : 0);

    Json conf{{"command", "train"}, {"arch", spec.name}, {"data", data_json(c.data)}, {"epochs", cfg.epochs},
              {"batch", cfg.batch},  {"lr0", cfg.lr0},   {"momentum", cfg.momentum},  {"weight_decay", cfg.weight_decay},
              {"label_smoothing", cfg.label_smoothing}, {"schedule", c.schedule},   {"augment", augment},
              {"samples", samples},  {"eval_samples", eval_samples}, {"accumulation", cfg.accumulation},
              {"seed", cfg.seed},    {"format", c.format}, {"out", c.out},          {"checkpoint", c.checkpoint}};
    print_config(err, conf);

    std::vector<LabeledImage> train_set;
    std::vector<LabeledImage> eval_set;
    if (synthetic) {
        const auto tr = gen_synthetic(synthetic_spec(c.data, c.seed), samples);
        const auto ev = gen_synthetic(synthetic_spec(c.data, c.seed + 1), eval_samples);
        train_set = images_of(tr);
        eval_set = images_of(ev);
    } else {
        train_set = take(load_cifar_split(c.data.dir, cifar_variant(c.data), true), samples);
        eval_set = take(load_cifar_split(c.data.dir, cifar_variant(c.data), false), eval_samples);
    }
    if (train_set.front().pixels.shape().c != spec.in_channels) throw UsageError("dataset channel count does not match --arch");

    auto net = build(spec, c.seed);
    net->set_input_mean(ChannelMean::compute(train_set).mean);
    const TrainLog log = train(*net, TrainData{train_set, eval_set}, cfg);
    for (const auto& e : log.epochs) {
        err << "epoch " << e.epoch << " lr " << e.lr << " loss " << e.train_loss << " train_err " << e.train_top1
            << " eval_err " << e.eval_top1 << '\n';
    }
    if (!c.checkpoint.empty()) write_bytes(c.checkpoint, save_checkpoint(*net));
    emit(c.format == "json" ? log.to_json() : log.to_csv(), c.out, out);
    return ok;
}

struct AnalyzeCmd {
    std::string arch;
    std::string checkpoint;
    std::string scales = "1.0,1.5,2.0";
    DataFlags data;
    std::size_t images = 64;
    std::string units = "all";
    std::size_t window = 0;
    bool per_class = false;
    std::uint64_t seed = 0;
    std::string out;
};

int do_analyze(const AnalyzeCmd& c, std::ostream& out, std::ostream& err) {
    if (c.arch.empty() && c.checkpoint.empty()) throw UsageError("analyze needs --arch or --checkpoint");
    const std::vector<double> scales = parse_scales(c.scales);
    check_data_flags(c.data);
    std::unique_ptr<Network> net;
    if (!c.checkpoint.empty()) {
        net = load_checkpoint(read_bytes(c.checkpoint));
        if (!c.arch.empty()) {
            const ArchSpec want = resolve_arch(c.arch);
            if (!(want == net->spec())) {
                throw UsageError("--arch " + want.name + " does not match the checkpoint's " + net->spec().name);
            }
        }
    } else {
        net = build(resolve_arch(c.arch), c.seed);
    }
    print_config(err, {{"command", "analyze"},
                       {"arch", net->spec().name},
                       {"checkpoint", c.checkpoint},
                       {"scales", scales},
                       {"data", data_json(c.data)},
                       {"images", c.images},
                       {"units", c.units},
                       {"window", c.window},
                       {"per_class", c.per_class},
                       {"seed", c.seed},
                       {"out", c.out}});
    std::vector<LabeledImage> images;
    if (c.data.dataset == "synthetic") {
        images = images_of(gen_synthetic(synthetic_spec(c.data, c.seed), c.images));
    } else {
        images = take(load_cifar_split(c.data.dir, cifar_variant(c.data), false), c.images);
    }
    std::vector<AttentionRecord> records;
    try {
        records = collect(*net, images, scales, c.units);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    SummaryOptions opts;
    opts.window = c.window;
    opts.per_class = c.per_class;
    const auto summaries = summarize(records, opts);
    for (const auto& s : summaries) {
        if (s.unit == records.front().unit && !s.label) {
            err << "unit " << s.unit << " scale " << s.scale << " mean_diff " << s.mean_diff << '\n';
        }
    }
    emit(c.per_class ? emit_class_csv(summaries) : emit_csv(summaries), c.out, out);
    if (c.window && !c.out.empty()) write_text(c.out + ".windows.csv", emit_window_csv(summaries));
    return ok;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Selective-kernel network toolkit: costs, gradient checks, training, attention analysis", "sknet"};
    app.require_subcommand(1);

    CountCmd count;
    auto* sc = app.add_subcommand("count", "Parameter and multiply-add report");
    sc->add_option("--arch", count.arch, "Preset name or JSON config")->required();
    sc->add_option("--res", count.res, "Input side (default 224, 32 for CIFAR-style stems)");
    sc->add_option("--format", count.format, "json or table")->check(CLI::IsMember({"json", "table"}));
    sc->add_option("--out", count.out, "Write here instead of stdout");

    PresetsCmd presets;
    auto* sp = app.add_subcommand("presets", "List built-in architectures");
    sp->add_option("--format", presets.format, "json or table")->check(CLI::IsMember({"json", "table"}));

    GradCmd grad;
    auto* sg = app.add_subcommand("gradcheck", "Finite-difference check of a building block");
    sg->add_option("--unit", grad.spec.unit, "sk, sk-naive, sknet, sknet-naive, resnext, senet or toynet");
    sg->add_option("--channels", grad.spec.channels, "Channel width");
    sg->add_option("--groups", grad.spec.groups, "Group count (0: gcd(channels, 32))");
    sg->add_option("--reduction", grad.spec.reduction, "SK reduction ratio r");
    sg->add_option("--min-dim", grad.spec.min_dim, "SK minimum fuse width L");
    sg->add_option("--batch", grad.spec.batch, "Batch size");
    sg->add_option("--spatial", grad.spec.spatial, "Input side");
    sg->add_option("--seed", grad.spec.seed, "RNG seed");
    sg->add_option("--step", grad.spec.step, "Finite-difference step");
    sg->add_option("--tolerance", grad.tolerance, "Fail when the max relative error reaches this");
    sg->add_option("--out", grad.out, "Write here instead of stdout");

    TrainCmd tr;
    auto* st = app.add_subcommand("train", "Train with SGD and write the epoch log");
    st->add_option("--arch", tr.arch, "Preset name or JSON config")->required();
    add_data_flags(st, tr.data);
    st->add_option("--epochs", tr.epochs, "Epochs");
    st->add_option("--batch", tr.batch, "Mini-batch size");
    st->add_option("--lr0", tr.lr0, "Initial learning rate");
    st->add_option("--momentum", tr.momentum, "SGD momentum");
    st->add_option("--weight-decay", tr.weight_decay, "Weight decay on conv and fc weights");
    st->add_option("--label-smoothing", tr.label_smoothing, "Label smoothing epsilon");
    st->add_option("--schedule", tr.schedule, "step (/10 at 50% and 75%) or none")
        ->check(CLI::IsMember({"step", "none"}));
    st->add_option("--augment", tr.augment, "none or cifar (pad 4, crop, flip)")->check(CLI::IsMember({"none", "cifar"}));
    st->add_option("--samples", tr.samples, "Training images to use (0: all; synthetic default 256)");
    st->add_option("--eval-samples", tr.eval_samples, "Evaluation images (0: all; synthetic default 128)");
    st->add_option("--accumulation", tr.accumulation, "Micro-batches per optimizer step");
    st->add_option("--seed", tr.seed, "RNG seed for initialization, data order and synthetic data");
    st->add_option("--format", tr.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    st->add_option("--out", tr.out, "Write the log here instead of stdout");
    st->add_option("--checkpoint", tr.checkpoint, "Save the trained model here");

    AnalyzeCmd an;
    auto* sa = app.add_subcommand("analyze", "Attention response to enlarged central objects");
    sa->add_option("--arch", an.arch, "Preset name or JSON config");
    sa->add_option("--checkpoint", an.checkpoint, "Trained model");
    sa->add_option("--scales", an.scales, "Comma-separated scale factors >= 1");
    add_data_flags(sa, an.data);
    sa->add_option("--images", an.images, "Number of images");
    sa->add_option("--units", an.units, "all, first, or comma-separated unit ids");
    sa->add_option("--window", an.window, "Also write channel-window averages of this width");
    sa->add_flag("--per-class", an.per_class, "Summaries per class label");
    sa->add_option("--seed", an.seed, "RNG seed");
    sa->add_option("--format", [](const std::vector<std::string>& v) { return v.size() == 1 && v[0] == "csv"; },
                   "csv");
    sa->add_option("--out", an.out, "Write the CSV here instead of stdout");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        return usage_error;
    }

    try {
        if (sc->parsed()) return do_count(count, out, err);
        if (sp->parsed()) return do_presets(presets, out, err);
        if (sg->parsed()) return do_gradcheck(grad, out, err);
        if (st->parsed()) return do_train(tr, out, err);
        if (sa->parsed()) return do_analyze(an, out, err);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return usage_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return runtime_error;
    }
    return usage_error;
}

} // namespace sknet::cli
