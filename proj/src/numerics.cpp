#include "cvr/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace cvr {

namespace detail {

std::vector<AxisTap> bilinear_taps(int64_t in, int64_t out) {
    std::vector<AxisTap> taps(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        auto i0 = std::min(static_cast<int64_t>(std::floor(src)), in - 1);
        auto i1 = std::min(i0 + 1, in - 1);
        float w = (i1 == i0) ? 0.0f : static_cast<float>(src - static_cast<double>(i0));
        taps[static_cast<std::size_t>(o)] = {i0, i1, w};
    }
    return taps;
}

void resize_grid(const float* src, float* dst, int64_t outer, int64_t in_h, int64_t in_w, int64_t inner,
                 int64_t out_h, int64_t out_w) {
    const auto ty = bilinear_taps(in_h, out_h);
    const auto tx = bilinear_taps(in_w, out_w);
    const int64_t in_plane = in_h * in_w * inner;
    const int64_t out_plane = out_h * out_w * inner;
    for (int64_t o = 0; o < outer; ++o) {
        const float* s = src + o * in_plane;
        float* d = dst + o * out_plane;
        for (int64_t y = 0; y < out_h; ++y) {
            const auto& [y0, y1, wy] = ty[static_cast<std::size_t>(y)];
            for (int64_t x = 0; x < out_w; ++x) {
                const auto& [x0, x1, wx] = tx[static_cast<std::size_t>(x)];
                const float* a = s + (y0 * in_w + x0) * inner;
                const float* b = s + (y0 * in_w + x1) * inner;
                const float* c = s + (y1 * in_w + x0) * inner;
                const float* e = s + (y1 * in_w + x1) * inner;
                float* out = d + (y * out_w + x) * inner;
                for (int64_t i = 0; i < inner; ++i) {
                    float top = a[i] + wx * (b[i] - a[i]);
                    float bot = c[i] + wx * (e[i] - c[i]);
                    out[i] = top + wy * (bot - top);
                }
            }
        }
    }
}

void resize_grid_backward(const float* grad_out, float* grad_src, int64_t outer, int64_t in_h, int64_t in_w,
                          int64_t inner, int64_t out_h, int64_t out_w) {
    const auto ty = bilinear_taps(in_h, out_h);
    const auto tx = bilinear_taps(in_w, out_w);
    const int64_t in_plane = in_h * in_w * inner;
    const int64_t out_plane = out_h * out_w * inner;
    for (int64_t o = 0; o < outer; ++o) {
        float* s = grad_src + o * in_plane;
        const float* d = grad_out + o * out_plane;
        for (int64_t y = 0; y < out_h; ++y) {
            const auto& [y0, y1, wy] = ty[static_cast<std::size_t>(y)];
            for (int64_t x = 0; x < out_w; ++x) {
                const auto& [x0, x1, wx] = tx[static_cast<std::size_t>(x)];
                float* a = s + (y0 * in_w + x0) * inner;
                float* b = s + (y0 * in_w + x1) * inner;
                float* c = s + (y1 * in_w + x0) * inner;
                float* e = s + (y1 * in_w + x1) * inner;
                const float* g = d + (y * out_w + x) * inner;
                for (int64_t i = 0; i < inner; ++i) {
                    float gtop = g[i] * (1.0f - wy);
                    float gbot = g[i] * wy;
                    a[i] += gtop * (1.0f - wx);
                    b[i] += gtop * wx;
                    c[i] += gbot * (1.0f - wx);
                    e[i] += gbot * wx;
                }
            }
        }
    }
}

}  // namespace detail

Tensor resize_bilinear(const Tensor& src, int64_t out_h, int64_t out_w) {
    if (src.rank() != 3) throw Error("resize_bilinear expects C x H x W, got " + shape_str(src.shape()));
    if (src.empty()) throw Error("degenerate shape");
    if (out_h < 1 || out_w < 1) throw Error("degenerate shape: target " + std::to_string(out_h) + "x" +
                                            std::to_string(out_w));
    Tensor dst({src.dim(0), out_h, out_w});
    detail::resize_grid(src.data(), dst.data(), src.dim(0), src.dim(1), src.dim(2), 1, out_h, out_w);
    return dst;
}

Tensor resize_bilinear_backward(const Tensor& grad_out, int64_t in_h, int64_t in_w) {
    if (grad_out.rank() != 3) throw Error("resize_bilinear_backward expects C x H x W");
    Tensor grad({grad_out.dim(0), in_h, in_w});
    detail::resize_grid_backward(grad_out.data(), grad.data(), grad_out.dim(0), in_h, in_w, 1, grad_out.dim(1),
                                 grad_out.dim(2));
    return grad;
}

namespace {

struct ConvGeometry {
    int64_t cin, h, w, cout, kh, kw, oh, ow;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& k, int stride, int pad) {
    if (x.rank() != 3) throw Error("conv2d input must be Cin x H x W, got " + shape_str(x.shape()));
    if (k.rank() != 4) throw Error("conv2d kernel must be Cout x Cin x kh x kw, got " + shape_str(k.shape()));
    if (k.dim(1) != x.dim(0))
        throw Error("conv2d channel mismatch: input has " + std::to_string(x.dim(0)) + " channels, kernel expects " +
                    std::to_string(k.dim(1)));
    if (k.dim(2) % 2 == 0 || k.dim(3) % 2 == 0) throw Error("conv2d kernel extents must be odd");
    if (stride != 1 && stride != 2) throw Error("conv2d stride must be 1 or 2");
    if (pad < 0) throw Error("conv2d padding must be non-negative");
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), k.dim(0), k.dim(2), k.dim(3), 0, 0};
    int64_t nh = g.h + 2 * pad - g.kh;
    int64_t nw = g.w + 2 * pad - g.kw;
    if (nh < 0 || nw < 0) throw Error("conv2d output would be empty");
    g.oh = nh / stride + 1;
    g.ow = nw / stride + 1;
    return g;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad, const Tensor* bias) {
    const auto g = conv_geometry(x, kernel, stride, pad);
    if (bias && !bias->empty() && (bias->rank() != 1 || bias->dim(0) != g.cout))
        throw Error("conv2d bias must have Cout entries");
    Tensor out({g.cout, g.oh, g.ow});
    const float* xd = x.data();
    const float* kd = kernel.data();
    for (int64_t co = 0; co < g.cout; ++co) {
        float* o = out.data() + co * g.oh * g.ow;
        if (bias && !bias->empty()) std::fill(o, o + g.oh * g.ow, (*bias)[static_cast<std::size_t>(co)]);
        for (int64_t ci = 0; ci < g.cin; ++ci) {
            const float* xp = xd + ci * g.h * g.w;
            for (int64_t i = 0; i < g.kh; ++i) {
                for (int64_t j = 0; j < g.kw; ++j) {
                    const float kv = kd[((co * g.cin + ci) * g.kh + i) * g.kw + j];
                    for (int64_t oy = 0; oy < g.oh; ++oy) {
                        const int64_t iy = oy * stride + i - pad;
                        if (iy < 0 || iy >= g.h) continue;
                        for (int64_t ox = 0; ox < g.ow; ++ox) {
                            const int64_t ix = ox * stride + j - pad;
                            if (ix < 0 || ix >= g.w) continue;
                            o[oy * g.ow + ox] += kv * xp[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    return out;
}

Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& kernel, int stride, int pad, const Tensor& grad_out) {
    const auto g = conv_geometry(x, kernel, stride, pad);
    if (grad_out.shape() != Shape{g.cout, g.oh, g.ow})
        throw Error("conv2d_backward: gradient shape " + shape_str(grad_out.shape()) + " does not match output");
    Conv2dGrads grads{Tensor::zeros_like(x), Tensor::zeros_like(kernel), Tensor({g.cout})};
    const float* xd = x.data();
    const float* kd = kernel.data();
    for (int64_t co = 0; co < g.cout; ++co) {
        const float* go = grad_out.data() + co * g.oh * g.ow;
        float bsum = 0.0f;
        for (int64_t p = 0; p < g.oh * g.ow; ++p) bsum += go[p];
        grads.bias[static_cast<std::size_t>(co)] = bsum;
        for (int64_t ci = 0; ci < g.cin; ++ci) {
            const float* xp = xd + ci * g.h * g.w;
            float* gx = grads.input.data() + ci * g.h * g.w;
            for (int64_t i = 0; i < g.kh; ++i) {
                for (int64_t j = 0; j < g.kw; ++j) {
                    const std::size_t kidx = static_cast<std::size_t>(((co * g.cin + ci) * g.kh + i) * g.kw + j);
                    const float kv = kd[kidx];
                    float kacc = 0.0f;
                    for (int64_t oy = 0; oy < g.oh; ++oy) {
                        const int64_t iy = oy * stride + i - pad;
                        if (iy < 0 || iy >= g.h) continue;
                        for (int64_t ox = 0; ox < g.ow; ++ox) {
                            const int64_t ix = ox * stride + j - pad;
                            if (ix < 0 || ix >= g.w) continue;
                            const float gv = go[oy * g.ow + ox];
                            kacc += gv * xp[iy * g.w + ix];
                            gx[iy * g.w + ix] += gv * kv;
                        }
                    }
                    grads.kernel[kidx] += kacc;
                }
            }
        }
    }
    return grads;
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.values()) v = v > 0.0f ? v : 0.0f;
    return y;
}

Tensor relu_backward(const Tensor& y, const Tensor& grad_out) {
    if (!y.same_shape(grad_out)) throw Error("relu_backward shape mismatch");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i)
        if (!(y[i] > 0.0f)) g[i] = 0.0f;
    return g;
}

Tensor gem_pool(const Tensor& x, float p) {
    if (x.rank() != 3) throw Error("gem_pool expects C x H x W, got " + shape_str(x.shape()));
    if (!(p >= 1.0f)) throw Error("gem_pool power must be >= 1");
    const int64_t c = x.dim(0);
    const int64_t n = x.dim(1) * x.dim(2);
    Tensor out({c});
    for (int64_t ch = 0; ch < c; ++ch) {
        const float* v = x.data() + ch * n;
        float acc = 0.0f;
        for (int64_t i = 0; i < n; ++i) acc += std::pow(std::max(v[i], kGemClamp), p);
        out[static_cast<std::size_t>(ch)] = std::pow(acc / static_cast<float>(n), 1.0f / p);
    }
    return out;
}

GemGrads gem_pool_backward(const Tensor& x, float p, const Tensor& grad_out) {
    if (x.rank() != 3 || grad_out.rank() != 1 || grad_out.dim(0) != x.dim(0))
        throw Error("gem_pool_backward shape mismatch");
    const int64_t c = x.dim(0);
    const int64_t n = x.dim(1) * x.dim(2);
    const auto nf = static_cast<float>(n);
    GemGrads g{Tensor::zeros_like(x), 0.0f};
    for (int64_t ch = 0; ch < c; ++ch) {
        const float* v = x.data() + ch * n;
        float* gv = g.input.data() + ch * n;
        float sum_p = 0.0f;
        float sum_p_log = 0.0f;
        for (int64_t i = 0; i < n; ++i) {
            const float cl = std::max(v[i], kGemClamp);
            const float cp = std::pow(cl, p);
            sum_p += cp;
            sum_p_log += cp * std::log(cl);
        }
        const float m = sum_p / nf;
        const float y = std::pow(m, 1.0f / p);
        const float go = grad_out[static_cast<std::size_t>(ch)];
        // dy/dx_i = y / m * x_i^(p-1) / n on the unclamped region.
        const float scale = go * y / (m * nf);
        for (int64_t i = 0; i < n; ++i)
            if (v[i] > kGemClamp) gv[i] = scale * std::pow(v[i], p - 1.0f);
        g.power += go * y * (-std::log(m) / (p * p) + (sum_p_log / nf) / (m * p));
    }
    return g;
}

float dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw Error("dot: length mismatch");
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

float l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

Normalized l2_normalize(const Tensor& x) {
    Normalized r{Tensor::zeros_like(x), l2_norm(x.values()), false};
    if (!(r.norm > kNormFloor)) {
        r.degenerate = true;
        return r;
    }
    for (std::size_t i = 0; i < x.size(); ++i) r.value[i] = x[i] / r.norm;
    return r;
}

Tensor l2_normalize_backward(const Normalized& y, const Tensor& grad_out) {
    if (!y.value.same_shape(grad_out)) throw Error("l2_normalize_backward shape mismatch");
    Tensor g = Tensor::zeros_like(grad_out);
    if (y.degenerate) return g;
    const float proj = dot(y.value.values(), grad_out.values());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (grad_out[i] - y.value[i] * proj) / y.norm;
    return g;
}

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const Tensor& analytic_grad, double eps, int probes,
                           uint64_t seed) {
    if (!x.same_shape(analytic_grad)) throw Error("grad_check: gradient shape does not match input");
    if (eps < 1e-4 || eps > 1e-2) throw Error("grad_check: eps must lie in [1e-4, 1e-2]");
    if (probes < 1) throw Error("grad_check: need at least one probe");

    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (static_cast<std::size_t>(probes) < coords.size()) {
        std::mt19937_64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(static_cast<std::size_t>(probes));
    }

    GradCheckReport report;
    double max_mag = 0.0;
    Tensor probe = x;
    for (auto idx : coords) {
        const float orig = probe[idx];
        probe[idx] = static_cast<float>(orig + eps);
        const double up = f(probe);
        probe[idx] = static_cast<float>(orig - eps);
        const double down = f(probe);
        probe[idx] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) throw Error("grad_check: non-finite function value");
        // Use the actually representable step so float rounding of x +/- eps does not bias the estimate.
        const double h = static_cast<double>(static_cast<float>(orig + eps)) -
                         static_cast<double>(static_cast<float>(orig - eps));
        const double numeric = (up - down) / h;
        const double analytic = analytic_grad[idx];
        report.max_abs_diff = std::max(report.max_abs_diff, std::abs(numeric - analytic));
        max_mag = std::max({max_mag, std::abs(numeric), std::abs(analytic)});
    }
    report.probe_count = static_cast<int>(coords.size());
    report.max_rel_diff = report.max_abs_diff / std::max(max_mag, 1e-12);
    return report;
}

}  // namespace cvr
