#include "sknet/attention_lab.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace sknet {

Tensor scale_transform(const Tensor& img, double s) {
    if (!(s >= 1.0) || !std::isfinite(s)) throw std::invalid_argument("scale factor must be finite and >= 1");
    if (s == 1.0) return img;
    const Shape sh = img.shape();
    const double ch = static_cast<double>(sh.h) / s;
    const double cw = static_cast<double>(sh.w) / s;
    if (ch < 2.0 || cw < 2.0) {
        throw std::invalid_argument("scale " + std::to_string(s) + " leaves a crop window under 2x2 on " + sh.str());
    }
    const double y0 = (static_cast<double>(sh.h) - ch) / 2.0;
    const double x0 = (static_cast<double>(sh.w) - cw) / 2.0;

    // Precompute the two taps and weights of every output row and column.
    struct Tap {
        std::size_t lo, hi;
        double t;
    };
    auto taps = [](std::size_t out, double origin, double window, std::size_t in) {
        std::vector<Tap> v(out);
        const double step = window / static_cast<double>(out);
        for (std::size_t i = 0; i < out; ++i) {
            double src = origin + (static_cast<double>(i) + 0.5) * step - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::size_t>(std::floor(src));
            const std::size_t hi = std::min(lo + 1, in - 1);
            v[i] = {lo, hi, src - static_cast<double>(lo)};
        }
        return v;
    };
    const auto ty = taps(sh.h, y0, ch, sh.h);
    const auto tx = taps(sh.w, x0, cw, sh.w);

    Tensor out(sh);
    for (std::size_t n = 0; n < sh.n; ++n) {
        for (std::size_t c = 0; c < sh.c; ++c) {
            const double* src = img.plane(n, c);
            double* dst = out.plane(n, c);
            for (std::size_t y = 0; y < sh.h; ++y) {
                const double* r0 = src + ty[y].lo * sh.w;
                const double* r1 = src + ty[y].hi * sh.w;
                const double a = ty[y].t;
                for (std::size_t x = 0; x < sh.w; ++x) {
                    const Tap& t = tx[x];
                    const double top = r0[t.lo] + t.t * (r0[t.hi] - r0[t.lo]);
                    const double bot = r1[t.lo] + t.t * (r1[t.hi] - r1[t.lo]);
                    dst[y * sh.w + x] = top + a * (bot - top);
                }
            }
        }
    }
    return out;
}

std::vector<std::string> select_units(const Network& net, const std::string& selector) {
    const auto ids = net.sk_unit_ids();
    std::vector<std::string> chosen;
    if (selector == "all") {
        chosen = ids;
    } else if (selector == "first") {
        if (!ids.empty()) chosen.push_back(ids.front());
    } else {
        std::stringstream ss(selector);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (std::find(ids.begin(), ids.end(), item) == ids.end()) {
                throw std::invalid_argument("unit selector: '" + item + "' is not an SK attention unit");
            }
            chosen.push_back(item);
        }
    }
    if (chosen.empty()) throw std::invalid_argument("unit selector '" + selector + "' matches no SK attention unit");
    return chosen;
}

std::vector<AttentionRecord> collect(const Network& net, std::span<const LabeledImage> images,
                                     std::span<const double> scales, const std::string& selector,
                                     std::size_t batch) {
    const auto units = select_units(net, selector);
    if (images.empty()) throw std::invalid_argument("collect: no images");
    if (scales.empty()) throw std::invalid_argument("collect: no scales");
    if (batch == 0) throw std::invalid_argument("collect: batch must be positive");
    const std::set<std::string> wanted(units.begin(), units.end());

    // records[sample][scale][unit]
    const std::size_t nu = units.size();
    std::vector<AttentionRecord> flat(images.size() * scales.size() * nu);
    auto slot = [&](std::size_t sample, std::size_t si, std::size_t ui) -> AttentionRecord& {
        return flat[(sample * scales.size() + si) * nu + ui];
    };

    for (std::size_t si = 0; si < scales.size(); ++si) {
        for (std::size_t begin = 0; begin < images.size(); begin += batch) {
            const std::size_t count = std::min(batch, images.size() - begin);
            std::vector<Tensor> parts;
            parts.reserve(count);
            for (std::size_t i = 0; i < count; ++i) parts.push_back(scale_transform(images[begin + i].pixels, scales[si]));
            Tensor input = stack_batch(parts);
            AttentionSink sink;
            net.infer(input, &sink);
            std::size_t ui = 0;
            for (const auto& cap : sink) {
                if (!wanted.count(cap.unit)) continue;
                const std::size_t m = cap.path_extents.size();
                const std::size_t c = cap.attention.shape().c / m;
                for (std::size_t i = 0; i < count; ++i) {
                    AttentionRecord& r = slot(begin + i, si, ui);
                    r.unit = cap.unit;
                    r.sample = begin + i;
                    r.label = images[begin + i].label;
                    r.scale = scales[si];
                    r.paths = m;
                    r.channels = c;
                    r.path_extents = cap.path_extents;
                    const double* a = cap.attention.plane(i, 0);
                    r.values.assign(a, a + m * c);
                }
                ++ui;
            }
            if (ui != nu) throw std::logic_error("collect: attention capture count does not match selected units");
        }
    }
    return flat;
}

std::pair<std::size_t, std::size_t> large_small_paths(std::span<const std::size_t> extents) {
    if (extents.size() < 2) throw std::invalid_argument("attention difference needs at least two paths");
    std::size_t large = 0, small = 0;
    for (std::size_t i = 1; i < extents.size(); ++i) {
        if (extents[i] >= extents[large]) large = i;
        if (extents[i] < extents[small]) small = i;
    }
    if (large == small) small = 0;  // every extent equal: last versus first
    return {large, small};
}

double mean_attention_difference(const AttentionRecord& r) {
    const auto [large, small] = large_small_paths(r.path_extents);
    double acc = 0.0;
    for (std::size_t c = 0; c < r.channels; ++c) acc += r.at(large, c) - r.at(small, c);
    return acc / static_cast<double>(r.channels);
}

bool unit_less(const std::string& a, const std::string& b) {
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const bool da = std::isdigit(static_cast<unsigned char>(a[i]));
        const bool db = std::isdigit(static_cast<unsigned char>(b[j]));
        if (da && db) {
            std::size_t ie = i, je = j;
            while (ie < a.size() && std::isdigit(static_cast<unsigned char>(a[ie]))) ++ie;
            while (je < b.size() && std::isdigit(static_cast<unsigned char>(b[je]))) ++je;
            const unsigned long long na = std::stoull(a.substr(i, ie - i));
            const unsigned long long nb = std::stoull(b.substr(j, je - j));
            if (na != nb) return na < nb;
            i = ie;
            j = je;
        } else {
            if (a[i] != b[j]) return a[i] < b[j];
            ++i;
            ++j;
        }
    }
    return a.size() - i < b.size() - j;
}

std::vector<AttentionSummary> summarize(std::span<const AttentionRecord> records, const SummaryOptions& options) {
    if (records.empty()) throw std::invalid_argument("summarize: no records");
    const std::size_t m = records.front().paths;
    for (const auto& r : records) {
        if (r.paths != m) throw std::invalid_argument("summarize: records mix different path counts");
        if (r.values.size() != r.paths * r.channels || r.path_extents.size() != r.paths) {
            throw std::invalid_argument("summarize: malformed record for unit " + r.unit);
        }
    }

    struct Key {
        std::string unit;
        double scale;
        std::optional<std::size_t> label;
        bool operator<(const Key& o) const {
            if (unit != o.unit) return unit_less(unit, o.unit);
            if (scale != o.scale) return scale < o.scale;
            return label < o.label;
        }
    };
    std::map<Key, std::vector<const AttentionRecord*>> groups;
    for (const auto& r : records) {
        Key k{r.unit, r.scale, options.per_class ? std::optional<std::size_t>(r.label) : std::nullopt};
        groups[k].push_back(&r);
    }

    std::vector<AttentionSummary> out;
    out.reserve(groups.size());
    for (auto& [key, members] : groups) {
        // Order members by sample so floating-point sums do not depend on input order.
        std::sort(members.begin(), members.end(), [](const AttentionRecord* a, const AttentionRecord* b) {
            return std::tie(a->sample, a->label) < std::tie(b->sample, b->label);
        });
        AttentionSummary s;
        s.unit = key.unit;
        s.scale = key.scale;
        s.label = key.label;
        s.n = members.size();
        s.path_mean.assign(m, 0.0);
        const std::size_t channels = members.front()->channels;
        const std::size_t windows = options.window ? (channels + options.window - 1) / options.window : 0;
        s.window_means.assign(windows, 0.0);
        std::vector<double> diffs;
        diffs.reserve(members.size());
        for (const AttentionRecord* r : members) {
            if (r->channels != channels) throw std::invalid_argument("summarize: unit " + r->unit + " changes width");
            for (std::size_t p = 0; p < m; ++p) {
                double acc = 0.0;
                for (std::size_t c = 0; c < channels; ++c) acc += r->at(p, c);
                s.path_mean[p] += acc / static_cast<double>(channels);
            }
            diffs.push_back(mean_attention_difference(*r));
            if (windows) {
                const std::size_t large = large_small_paths(r->path_extents).first;
                for (std::size_t w = 0; w < windows; ++w) {
                    const std::size_t lo = w * options.window;
                    const std::size_t hi = std::min(channels, lo + options.window);
                    double acc = 0.0;
                    for (std::size_t c = lo; c < hi; ++c) acc += r->at(large, c);
                    s.window_means[w] += acc / static_cast<double>(hi - lo);
                }
            }
        }
        const double n = static_cast<double>(s.n);
        for (auto& v : s.path_mean) v /= n;
        for (auto& v : s.window_means) v /= n;
        double mean = 0.0;
        for (double d : diffs) mean += d;
        mean /= n;
        double var = 0.0;
        for (double d : diffs) var += (d - mean) * (d - mean);
        s.mean_diff = mean;
        s.std = std::sqrt(var / n);
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<const AttentionSummary*> sorted(std::span<const AttentionSummary> summaries) {
    std::vector<const AttentionSummary*> v;
    for (const auto& s : summaries) v.push_back(&s);
    std::stable_sort(v.begin(), v.end(), [](const AttentionSummary* a, const AttentionSummary* b) {
        if (a->unit != b->unit) return unit_less(a->unit, b->unit);
        if (a->scale != b->scale) return a->scale < b->scale;
        return a->label < b->label;
    });
    return v;
}

} // namespace

std::string emit_csv(std::span<const AttentionSummary> summaries) {
    std::string out = "unit,scale,path,mean_attention,mean_diff,std,n\n";
    for (const AttentionSummary* s : sorted(summaries)) {
        for (std::size_t p = 0; p < s->path_mean.size(); ++p) {
            out += s->unit + "," + num(s->scale) + "," + std::to_string(p) + "," + num(s->path_mean[p]) + "," +
                   num(s->mean_diff) + "," + num(s->std) + "," + std::to_string(s->n) + "\n";
        }
    }
    return out;
}

std::string emit_class_csv(std::span<const AttentionSummary> summaries) {
    std::string out = "unit,scale,class,path,mean_attention,mean_diff,std,n\n";
    for (const AttentionSummary* s : sorted(summaries)) {
        const std::string cls = s->label ? std::to_string(*s->label) : "";
        for (std::size_t p = 0; p < s->path_mean.size(); ++p) {
            out += s->unit + "," + num(s->scale) + "," + cls + "," + std::to_string(p) + "," + num(s->path_mean[p]) +
                   "," + num(s->mean_diff) + "," + num(s->std) + "," + std::to_string(s->n) + "\n";
        }
    }
    return out;
}

std::string emit_window_csv(std::span<const AttentionSummary> summaries) {
    std::string out = "unit,scale,window,mean_attention\n";
    for (const AttentionSummary* s : sorted(summaries)) {
        for (std::size_t w = 0; w < s->window_means.size(); ++w) {
            out += s->unit + "," + num(s->scale) + "," + std::to_string(w) + "," + num(s->window_means[w]) + "\n";
        }
    }
    return out;
}

std::vector<AttentionCsvRow> parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "unit,scale,path,mean_attention,mean_diff,std,n") {
        throw std::invalid_argument("attention CSV: unexpected header");
    }
    std::vector<AttentionCsvRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw std::invalid_argument("attention CSV line " + std::to_string(lineno) + ": expected 7 fields");
        try {
            AttentionCsvRow r;
            r.unit = f[0];
            r.scale = std::stod(f[1]);
            r.path = std::stoul(f[2]);
            r.mean_attention = std::stod(f[3]);
            r.mean_diff = std::stod(f[4]);
            r.std = std::stod(f[5]);
            r.n = std::stoul(f[6]);
            rows.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw std::invalid_argument("attention CSV line " + std::to_string(lineno) + ": bad number");
        }
    }
    return rows;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << text;
    if (!out) throw std::runtime_error("write to " + path + " failed");
}

} // namespace sknet
