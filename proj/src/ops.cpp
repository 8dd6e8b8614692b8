#include "sknet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sknet {

ConvGeometry ConvGeometry::same(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                                std::size_t stride, std::size_t groups, std::size_t dilation) {
    ConvGeometry g;
    g.in_channels = in_channels;
    g.out_channels = out_channels;
    g.kernel = kernel;
    g.dilation = dilation;
    g.groups = groups;
    g.stride = stride;
    g.padding = dilation * (kernel - 1) / 2;
    return g;
}

std::size_t ConvGeometry::output_size(std::size_t input) const {
    const std::size_t padded = input + 2 * padding;
    if (padded < extent()) {
        throw std::invalid_argument("convolution input " + std::to_string(input) + " smaller than kernel extent " +
                                    std::to_string(extent()));
    }
    return (padded - extent()) / stride + 1;
}

void ConvGeometry::validate() const {
    if (in_channels == 0 || out_channels == 0 || kernel == 0 || dilation == 0 || groups == 0 || stride == 0) {
        throw std::invalid_argument("convolution geometry has a zero field");
    }
    if (kernel % 2 == 0) throw std::invalid_argument("convolution kernel must be odd");
    if (in_channels % groups != 0 || out_channels % groups != 0) {
        throw std::invalid_argument("channels (" + std::to_string(in_channels) + " -> " +
                                    std::to_string(out_channels) + ") not divisible by groups " +
                                    std::to_string(groups));
    }
}

namespace {

struct ConvPlan {
    std::size_t n, h, w, ho, wo, cin_g, cout_g, k_cols, p;
    bool direct;  // 1x1, stride 1, no padding: the input plane is already the column matrix
};

ConvPlan plan_conv(const Tensor& input, const Tensor& weight, const ConvGeometry& geom) {
    geom.validate();
    const Shape& s = input.shape();
    if (s.c != geom.in_channels) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(s.c) + " channels, geometry expects " +
                                    std::to_string(geom.in_channels));
    }
    if (weight.shape() != geom.weight_shape()) {
        throw std::invalid_argument("conv2d: weight shape " + weight.shape().str() + " expected " +
                                    geom.weight_shape().str());
    }
    ConvPlan p{};
    p.n = s.n;
    p.h = s.h;
    p.w = s.w;
    p.ho = geom.output_size(s.h);
    p.wo = geom.output_size(s.w);
    p.cin_g = geom.in_channels / geom.groups;
    p.cout_g = geom.out_channels / geom.groups;
    p.k_cols = p.cin_g * geom.kernel * geom.kernel;
    p.p = p.ho * p.wo;
    p.direct = geom.kernel == 1 && geom.stride == 1 && geom.padding == 0;
    return p;
}

// col[(ci*k + ky)*k + kx][oy*wo + ox] for the channels of one group of one sample.
void im2col(const double* in, const ConvPlan& p, const ConvGeometry& g, double* col) {
    const std::size_t k = g.kernel;
    const long pad = static_cast<long>(g.padding);
    for (std::size_t ci = 0; ci < p.cin_g; ++ci) {
        const double* plane = in + ci * p.h * p.w;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = col + ((ci * k + ky) * k + kx) * p.p;
                const long dy = static_cast<long>(ky * g.dilation) - pad;
                const long dx = static_cast<long>(kx * g.dilation) - pad;
                for (std::size_t oy = 0; oy < p.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride) + dy;
                    double* dst = row + oy * p.wo;
                    if (iy < 0 || iy >= static_cast<long>(p.h)) {
                        std::fill(dst, dst + p.wo, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * p.w;
                    for (std::size_t ox = 0; ox < p.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride) + dx;
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(p.w)) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvPlan& p, const ConvGeometry& g, double* in) {
    const std::size_t k = g.kernel;
    const long pad = static_cast<long>(g.padding);
    for (std::size_t ci = 0; ci < p.cin_g; ++ci) {
        double* plane = in + ci * p.h * p.w;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = col + ((ci * k + ky) * k + kx) * p.p;
                const long dy = static_cast<long>(ky * g.dilation) - pad;
                const long dx = static_cast<long>(kx * g.dilation) - pad;
                for (std::size_t oy = 0; oy < p.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride) + dy;
                    if (iy < 0 || iy >= static_cast<long>(p.h)) continue;
                    double* dst = plane + static_cast<std::size_t>(iy) * p.w;
                    const double* src = row + oy * p.wo;
                    for (std::size_t ox = 0; ox < p.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride) + dx;
                        if (ix >= 0 && ix < static_cast<long>(p.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const ConvGeometry& geom) {
    const ConvPlan p = plan_conv(input, weight, geom);
    Tensor out({p.n, geom.out_channels, p.ho, p.wo});
    std::vector<double> col(p.direct ? 0 : p.k_cols * p.p);
    for (std::size_t n = 0; n < p.n; ++n) {
        for (std::size_t g = 0; g < geom.groups; ++g) {
            const double* in = input.plane(n, g * p.cin_g);
            const double* cols = in;
            if (!p.direct) {
                im2col(in, p, geom, col.data());
                cols = col.data();
            }
            for (std::size_t oc = 0; oc < p.cout_g; ++oc) {
                const std::size_t o = g * p.cout_g + oc;
                double* dst = out.plane(n, o);
                const double* wrow = weight.ptr() + o * p.k_cols;
                for (std::size_t kk = 0; kk < p.k_cols; ++kk) {
                    const double wv = wrow[kk];
                    const double* src = cols + kk * p.p;
                    for (std::size_t i = 0; i < p.p; ++i) dst[i] += wv * src[i];
                }
            }
        }
    }
    return out;
}

void conv2d_backward(const Tensor& input, const Tensor& weight, const ConvGeometry& geom, const Tensor& grad_output,
                     Tensor* grad_input, Tensor* grad_weight) {
    const ConvPlan p = plan_conv(input, weight, geom);
    if (grad_output.shape() != Shape{p.n, geom.out_channels, p.ho, p.wo}) {
        throw std::invalid_argument("conv2d_backward: grad_output shape " + grad_output.shape().str());
    }
    if (grad_input && grad_input->shape() != input.shape()) {
        throw std::invalid_argument("conv2d_backward: grad_input shape mismatch");
    }
    if (grad_weight && grad_weight->shape() != weight.shape()) {
        throw std::invalid_argument("conv2d_backward: grad_weight shape mismatch");
    }
    std::vector<double> col(p.direct ? 0 : p.k_cols * p.p);
    std::vector<double> dcol(grad_input ? p.k_cols * p.p : 0);
    for (std::size_t n = 0; n < p.n; ++n) {
        for (std::size_t g = 0; g < geom.groups; ++g) {
            const double* in = input.plane(n, g * p.cin_g);
            if (grad_weight) {
                const double* cols = in;
                if (!p.direct) {
                    im2col(in, p, geom, col.data());
                    cols = col.data();
                }
                for (std::size_t oc = 0; oc < p.cout_g; ++oc) {
                    const std::size_t o = g * p.cout_g + oc;
                    const double* go = grad_output.plane(n, o);
                    double* gw = grad_weight->ptr() + o * p.k_cols;
                    for (std::size_t kk = 0; kk < p.k_cols; ++kk) {
                        const double* src = cols + kk * p.p;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < p.p; ++i) acc += go[i] * src[i];
                        gw[kk] += acc;
                    }
                }
            }
            if (grad_input) {
                std::fill(dcol.begin(), dcol.end(), 0.0);
                for (std::size_t oc = 0; oc < p.cout_g; ++oc) {
                    const std::size_t o = g * p.cout_g + oc;
                    const double* go = grad_output.plane(n, o);
                    const double* wrow = weight.ptr() + o * p.k_cols;
                    for (std::size_t kk = 0; kk < p.k_cols; ++kk) {
                        const double wv = wrow[kk];
                        double* dst = dcol.data() + kk * p.p;
                        for (std::size_t i = 0; i < p.p; ++i) dst[i] += wv * go[i];
                    }
                }
                double* gin = grad_input->plane(n, g * p.cin_g);
                if (p.direct) {
                    for (std::size_t i = 0; i < p.k_cols * p.p; ++i) gin[i] += dcol[i];
                } else {
                    col2im_add(dcol.data(), p, geom, gin);
                }
            }
        }
    }
}

BatchNormState::BatchNormState(std::size_t channels)
    : gamma(channels, 1.0), beta(channels, 0.0), running_mean(channels, 0.0), running_var(channels, 1.0) {}

BatchNormView view_of(BatchNormState& state) {
    return {state.gamma, state.beta, state.running_mean, state.running_var, state.momentum, state.epsilon};
}

Tensor batch_norm(const Tensor& input, BatchNormState& state, bool training, BatchNormCache* cache) {
    return batch_norm(input, view_of(state), training, cache);
}

Tensor batch_norm(const Tensor& input, const BatchNormView& bn, bool training, BatchNormCache* cache) {
    const Shape& s = input.shape();
    if (bn.gamma.size() != s.c || bn.beta.size() != s.c || bn.running_mean.size() != s.c ||
        bn.running_var.size() != s.c) {
        throw std::invalid_argument("batch_norm: state has " + std::to_string(bn.gamma.size()) +
                                    " channels, input has " + std::to_string(s.c));
    }
    if (!(bn.epsilon > 0.0)) throw std::invalid_argument("batch_norm: epsilon must be positive");
    const std::size_t count = s.n * s.plane();
    if (training && count < 2) {
        throw std::invalid_argument("batch_norm: training mode needs more than one value per channel");
    }
    Tensor out(s);
    Tensor normalized;
    if (cache) normalized = Tensor(s);
    std::vector<double> inv_std(s.c);
    for (std::size_t c = 0; c < s.c; ++c) {
        double mean = 0.0;
        double var = 0.0;
        if (training) {
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* x = input.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) mean += x[i];
            }
            mean /= static_cast<double>(count);
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* x = input.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const double d = x[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(count);
            const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
            bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean;
            bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased;
        } else {
            mean = bn.running_mean[c];
            var = bn.running_var[c];
            if (var < 0.0) throw std::invalid_argument("batch_norm: negative running variance");
        }
        const double is = 1.0 / std::sqrt(var + bn.epsilon);
        inv_std[c] = is;
        const double g = bn.gamma[c];
        const double b = bn.beta[c];
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* x = input.plane(n, c);
            double* y = out.plane(n, c);
            double* xn = cache ? normalized.plane(n, c) : nullptr;
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const double v = (x[i] - mean) * is;
                if (xn) xn[i] = v;
                y[i] = g * v + b;
            }
        }
    }
    if (cache) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
        cache->training = training;
    }
    return out;
}

Tensor batch_norm_backward(const Tensor& grad_output, std::span<const double> gamma, const BatchNormCache& cache,
                           std::span<double> grad_gamma, std::span<double> grad_beta) {
    const Shape& s = grad_output.shape();
    if (cache.normalized.shape() != s) throw std::invalid_argument("batch_norm_backward: cache shape mismatch");
    const double count = static_cast<double>(s.n * s.plane());
    Tensor grad_in(s);
    for (std::size_t c = 0; c < s.c; ++c) {
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* g = grad_output.plane(n, c);
            const double* xn = cache.normalized.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                sum_g += g[i];
                sum_gx += g[i] * xn[i];
            }
        }
        if (!grad_gamma.empty()) grad_gamma[c] += sum_gx;
        if (!grad_beta.empty()) grad_beta[c] += sum_g;
        const double k = gamma[c] * cache.inv_std[c];
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* g = grad_output.plane(n, c);
            const double* xn = cache.normalized.plane(n, c);
            double* gi = grad_in.plane(n, c);
            if (cache.training) {
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    gi[i] = k * (g[i] - sum_g / count - xn[i] * sum_gx / count);
                }
            } else {
                for (std::size_t i = 0; i < s.plane(); ++i) gi[i] = k * g[i];
            }
        }
    }
    return grad_in;
}

Tensor relu(const Tensor& input) {
    Tensor out(input.shape());
    for (std::size_t i = 0; i < input.numel(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_output) {
    Tensor out(input.shape());
    for (std::size_t i = 0; i < input.numel(); ++i) out[i] = input[i] > 0.0 ? grad_output[i] : 0.0;
    return out;
}

Tensor sigmoid(const Tensor& input) {
    Tensor out(input.shape());
    for (std::size_t i = 0; i < input.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-input[i]));
    return out;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_output) {
    Tensor out(output.shape());
    for (std::size_t i = 0; i < output.numel(); ++i) out[i] = grad_output[i] * output[i] * (1.0 - output[i]);
    return out;
}

Tensor global_avg_pool(const Tensor& input) {
    const Shape& s = input.shape();
    Tensor out({s.n, s.c, 1, 1});
    const double inv = 1.0 / static_cast<double>(s.plane());
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const double* x = input.plane(n, c);
            double acc = 0.0;
            for (std::size_t i = 0; i < s.plane(); ++i) acc += x[i];
            out.at(n, c, 0, 0) = acc * inv;
        }
    }
    return out;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_output) {
    Tensor out(input_shape);
    const double inv = 1.0 / static_cast<double>(input_shape.plane());
    for (std::size_t n = 0; n < input_shape.n; ++n) {
        for (std::size_t c = 0; c < input_shape.c; ++c) {
            const double g = grad_output.at(n, c, 0, 0) * inv;
            double* dst = out.plane(n, c);
            std::fill(dst, dst + input_shape.plane(), g);
        }
    }
    return out;
}

MaxPoolResult max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
    const Shape& s = input.shape();
    if (kernel == 0 || stride == 0) throw std::invalid_argument("max_pool2d: zero kernel or stride");
    if (s.h + 2 * padding < kernel || s.w + 2 * padding < kernel) {
        throw std::invalid_argument("max_pool2d: input smaller than window");
    }
    const std::size_t ho = (s.h + 2 * padding - kernel) / stride + 1;
    const std::size_t wo = (s.w + 2 * padding - kernel) / stride + 1;
    MaxPoolResult r{Tensor({s.n, s.c, ho, wo}), std::vector<std::size_t>(s.n * s.c * ho * wo)};
    const long pad = static_cast<long>(padding);
    std::size_t idx = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t base = input.index(n, c, 0, 0);
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox, ++idx) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t arg = base;
                    for (std::size_t ky = 0; ky < kernel; ++ky) {
                        const long iy = static_cast<long>(oy * stride + ky) - pad;
                        if (iy < 0 || iy >= static_cast<long>(s.h)) continue;
                        for (std::size_t kx = 0; kx < kernel; ++kx) {
                            const long ix = static_cast<long>(ox * stride + kx) - pad;
                            if (ix < 0 || ix >= static_cast<long>(s.w)) continue;
                            const std::size_t at = base + static_cast<std::size_t>(iy) * s.w +
                                                   static_cast<std::size_t>(ix);
                            if (input[at] > best) {
                                best = input[at];
                                arg = at;
                            }
                        }
                    }
                    r.output[idx] = best;
                    r.argmax[idx] = arg;
                }
            }
        }
    }
    return r;
}

Tensor max_pool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                           const Tensor& grad_output) {
    Tensor out(input_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) out[argmax[i]] += grad_output[i];
    return out;
}

std::vector<double> fully_connected(std::span<const double> input, const Tensor& weight,
                                    std::optional<std::span<const double>> bias) {
    const std::size_t out_dim = weight.shape().n;
    const std::size_t in_dim = weight.shape().c * weight.shape().h * weight.shape().w;
    if (input.size() != in_dim) {
        throw std::invalid_argument("fully_connected: input length " + std::to_string(input.size()) +
                                    " expected " + std::to_string(in_dim));
    }
    if (bias && bias->size() != out_dim) throw std::invalid_argument("fully_connected: bias length mismatch");
    std::vector<double> out(out_dim);
    for (std::size_t o = 0; o < out_dim; ++o) {
        const double* row = weight.ptr() + o * in_dim;
        double acc = bias ? (*bias)[o] : 0.0;
        for (std::size_t i = 0; i < in_dim; ++i) acc += row[i] * input[i];
        out[o] = acc;
    }
    return out;
}

Tensor linear(const Tensor& input, const Tensor& weight, std::optional<std::span<const double>> bias) {
    const Shape& s = input.shape();
    const std::size_t in_dim = s.c * s.h * s.w;
    Tensor out({s.n, weight.shape().n, 1, 1});
    for (std::size_t n = 0; n < s.n; ++n) {
        auto row = fully_connected(std::span<const double>(input.plane(n, 0), in_dim), weight, bias);
        std::copy(row.begin(), row.end(), out.plane(n, 0));
    }
    return out;
}

void linear_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_output, Tensor* grad_input,
                     Tensor* grad_weight, std::span<double> grad_bias) {
    const Shape& s = input.shape();
    const std::size_t in_dim = s.c * s.h * s.w;
    const std::size_t out_dim = weight.shape().n;
    if (grad_output.shape() != Shape{s.n, out_dim, 1, 1}) {
        throw std::invalid_argument("linear_backward: grad_output shape mismatch");
    }
    for (std::size_t n = 0; n < s.n; ++n) {
        const double* x = input.plane(n, 0);
        const double* g = grad_output.plane(n, 0);
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double go = g[o];
            if (!grad_bias.empty()) grad_bias[o] += go;
            if (grad_weight) {
                double* gw = grad_weight->ptr() + o * in_dim;
                for (std::size_t i = 0; i < in_dim; ++i) gw[i] += go * x[i];
            }
            if (grad_input) {
                const double* w = weight.ptr() + o * in_dim;
                double* gi = grad_input->plane(n, 0);
                for (std::size_t i = 0; i < in_dim; ++i) gi[i] += go * w[i];
            }
        }
    }
}

Tensor softmax_over_paths(const Tensor& logits, std::size_t paths) {
    const Shape& s = logits.shape();
    if (paths < 2 || s.c % paths != 0 || s.h != 1 || s.w != 1) {
        throw std::invalid_argument("softmax_over_paths: logits must be (n, M*C, 1, 1) with M >= 2, got " + s.str());
    }
    const std::size_t channels = s.c / paths;
    Tensor out(s);
    for (std::size_t n = 0; n < s.n; ++n) {
        const double* x = logits.plane(n, 0);
        double* y = out.plane(n, 0);
        for (std::size_t c = 0; c < channels; ++c) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t m = 0; m < paths; ++m) {
                const double v = x[m * channels + c];
                if (!std::isfinite(v)) throw std::domain_error("softmax_over_paths: non-finite logit");
                mx = std::max(mx, v);
            }
            double denom = 0.0;
            for (std::size_t m = 0; m < paths; ++m) {
                const double e = std::exp(x[m * channels + c] - mx);
                y[m * channels + c] = e;
                denom += e;
            }
            for (std::size_t m = 0; m < paths; ++m) y[m * channels + c] /= denom;
        }
    }
    return out;
}

Tensor softmax_over_paths_backward(const Tensor& output, const Tensor& grad_output, std::size_t paths) {
    const Shape& s = output.shape();
    const std::size_t channels = s.c / paths;
    Tensor grad(s);
    for (std::size_t n = 0; n < s.n; ++n) {
        const double* y = output.plane(n, 0);
        const double* g = grad_output.plane(n, 0);
        double* gi = grad.plane(n, 0);
        for (std::size_t c = 0; c < channels; ++c) {
            double dot = 0.0;
            for (std::size_t m = 0; m < paths; ++m) dot += g[m * channels + c] * y[m * channels + c];
            for (std::size_t m = 0; m < paths; ++m) {
                const std::size_t i = m * channels + c;
                gi[i] = y[i] * (g[i] - dot);
            }
        }
    }
    return grad;
}

namespace {
void check_paths(std::span<const Tensor> paths, const Tensor& attention) {
    if (paths.empty()) throw std::invalid_argument("weighted_path_sum: no paths");
    const Shape& s = paths.front().shape();
    for (const auto& p : paths) {
        if (p.shape() != s) throw std::invalid_argument("weighted_path_sum: path shapes disagree");
    }
    if (attention.shape() != Shape{s.n, paths.size() * s.c, 1, 1}) {
        throw std::invalid_argument("weighted_path_sum: attention shape " + attention.shape().str());
    }
}
} // namespace

Tensor weighted_path_sum(std::span<const Tensor> paths, const Tensor& attention) {
    check_paths(paths, attention);
    const Shape& s = paths.front().shape();
    Tensor out(s);
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            double* y = out.plane(n, c);
            for (std::size_t m = 0; m < paths.size(); ++m) {
                const double a = attention.at(n, m * s.c + c, 0, 0);
                const double* x = paths[m].plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) y[i] += a * x[i];
            }
        }
    }
    return out;
}

void weighted_path_sum_backward(std::span<const Tensor> paths, const Tensor& attention, const Tensor& grad_output,
                                std::span<Tensor> grad_paths, Tensor* grad_attention) {
    check_paths(paths, attention);
    const Shape& s = paths.front().shape();
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const double* g = grad_output.plane(n, c);
            for (std::size_t m = 0; m < paths.size(); ++m) {
                const std::size_t ai = attention.index(n, m * s.c + c, 0, 0);
                const double* x = paths[m].plane(n, c);
                if (grad_attention) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < s.plane(); ++i) acc += g[i] * x[i];
                    (*grad_attention)[ai] += acc;
                }
                if (!grad_paths.empty() && !grad_paths[m].empty()) {
                    const double a = attention[ai];
                    double* gp = grad_paths[m].plane(n, c);
                    for (std::size_t i = 0; i < s.plane(); ++i) gp[i] += a * g[i];
                }
            }
        }
    }
}

Tensor channel_scale(const Tensor& input, const Tensor& gate) {
    const Shape& s = input.shape();
    if (gate.shape() != Shape{s.n, s.c, 1, 1}) throw std::invalid_argument("channel_scale: gate shape mismatch");
    Tensor out(s);
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const double gv = gate.at(n, c, 0, 0);
            const double* x = input.plane(n, c);
            double* y = out.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) y[i] = x[i] * gv;
        }
    }
    return out;
}

void channel_scale_backward(const Tensor& input, const Tensor& gate, const Tensor& grad_output, Tensor* grad_input,
                            Tensor* grad_gate) {
    const Shape& s = input.shape();
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const double gv = gate.at(n, c, 0, 0);
            const double* x = input.plane(n, c);
            const double* g = grad_output.plane(n, c);
            if (grad_gate) {
                double acc = 0.0;
                for (std::size_t i = 0; i < s.plane(); ++i) acc += g[i] * x[i];
                grad_gate->at(n, c, 0, 0) += acc;
            }
            if (grad_input) {
                double* gi = grad_input->plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) gi[i] += g[i] * gv;
            }
        }
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    out += b;
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (auto& v : out.data()) v *= s;
    return out;
}

Tensor concat_channels(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no tensors");
    Shape s = parts.front().shape();
    std::size_t channels = 0;
    for (const auto& p : parts) {
        if (p.shape().n != s.n || p.shape().h != s.h || p.shape().w != s.w) {
            throw std::invalid_argument("concat_channels: inconsistent shapes");
        }
        channels += p.shape().c;
    }
    Tensor out({s.n, channels, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n) {
        double* dst = out.plane(n, 0);
        for (const auto& p : parts) {
            const std::size_t len = p.shape().c * s.plane();
            std::copy(p.plane(n, 0), p.plane(n, 0) + len, dst);
            dst += len;
        }
    }
    return out;
}

} // namespace sknet
