#include "cvr/encoder4d.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "cvr/numerics.hpp"

namespace cvr {

namespace {

struct Geometry4d {
    int64_t cin, hq, wq, hk, wk;
    int64_t cout, kh, kw, ph, pw;
    int64_t oq_h, oq_w, ok_h, ok_w;
};

Geometry4d geometry(const Tensor& x, const CenterPivotKernel& k, int sq, int sk) {
    if (x.rank() != 5) throw Error("4D convolution input must be C x Hq x Wq x Hk x Wk, got " + shape_str(x.shape()));
    if (k.query_side.rank() != 4 || !k.query_side.same_shape(k.key_side))
        throw Error("center-pivot kernel slices must share a Cout x Cin x kh x kw shape");
    if (k.query_side.dim(1) != x.dim(0))
        throw Error("4D convolution channel mismatch: input has " + std::to_string(x.dim(0)) +
                    " channels, kernel expects " + std::to_string(k.query_side.dim(1)));
    if (k.query_side.dim(2) % 2 == 0 || k.query_side.dim(3) % 2 == 0)
        throw Error("center-pivot kernel extents must be odd");
    if ((sq != 1 && sq != 2) || (sk != 1 && sk != 2)) throw Error("4D convolution strides must be 1 or 2");
    if (k.bias.rank() != 1 || k.bias.dim(0) != k.query_side.dim(0)) throw Error("center-pivot bias must have Cout entries");
    Geometry4d g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4),
                 k.query_side.dim(0), k.query_side.dim(2), k.query_side.dim(3),
                 (k.query_side.dim(2) - 1) / 2, (k.query_side.dim(3) - 1) / 2, 0, 0, 0, 0};
    g.oq_h = strided_extent(g.hq, sq);
    g.oq_w = strided_extent(g.wq, sq);
    g.ok_h = strided_extent(g.hk, sk);
    g.ok_w = strided_extent(g.wk, sk);
    return g;
}

// Per kernel tap, the output positions [first, second) whose source
// o * stride + tap - pad falls inside [0, extent).
std::vector<std::pair<int64_t, int64_t>> tap_ranges(int64_t out, int64_t extent, int64_t stride, int64_t taps,
                                                    int64_t pad) {
    std::vector<std::pair<int64_t, int64_t>> r;
    for (int64_t t = 0; t < taps; ++t) {
        const int64_t lo = std::max<int64_t>(0, (pad - t + stride - 1) / stride);
        const int64_t top = extent - 1 + pad - t;
        const int64_t hi = top < 0 ? 0 : std::min(out, top / stride + 1);
        r.emplace_back(lo, std::max(lo, hi));
    }
    return r;
}

// Eight independent partial sums, so the loop vectorizes without reassociation flags.
float dot_lanes(const float* a, const float* b, int64_t n) {
    std::array<float, 8> lane{};
    int64_t p = 0;
    for (; p + 8 <= n; p += 8)
        for (int l = 0; l < 8; ++l) lane[static_cast<std::size_t>(l)] += a[p + l] * b[p + l];
    float tail = 0.0f;
    for (; p < n; ++p) tail += a[p] * b[p];
    return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7])) + tail;
}

// Stride-1 key side over a flattened key plane. Tap (i, j) reads the input at a
// constant offset; the per-column mask drops positions whose source column
// wraps into a neighbouring row.
struct KeyTap {
    int64_t shift;
    int64_t begin;
    int64_t end;
    const float* mask;
};

struct KeyPlan {
    std::vector<float> masks;  // kw x (hk * wk)
    std::vector<KeyTap> taps;  // kh x kw
};

KeyPlan key_plan(const Geometry4d& g, const std::vector<std::pair<int64_t, int64_t>>& rows,
                 const std::vector<std::pair<int64_t, int64_t>>& cols) {
    const int64_t n = g.hk * g.wk;
    KeyPlan plan;
    plan.masks.assign(static_cast<std::size_t>(g.kw * n), 0.0f);
    for (int64_t j = 0; j < g.kw; ++j)
        for (int64_t c = 0; c < g.hk; ++c)
            for (int64_t d = cols[static_cast<std::size_t>(j)].first; d < cols[static_cast<std::size_t>(j)].second; ++d)
                plan.masks[static_cast<std::size_t>(j * n + c * g.wk + d)] = 1.0f;
    for (int64_t i = 0; i < g.kh; ++i)
        for (int64_t j = 0; j < g.kw; ++j) {
            const int64_t shift = (i - g.ph) * g.wk + (j - g.pw);
            const auto r = rows[static_cast<std::size_t>(i)];
            const int64_t begin = std::max(r.first * g.wk, -shift);
            const int64_t end = std::max(begin, std::min(r.second * g.wk, n - shift));
            plan.taps.push_back({shift, begin, end, plan.masks.data() + j * n});
        }
    return plan;
}

}  // namespace

Tensor conv4d_center_pivot(const Tensor& x, const CenterPivotKernel& k, int sq, int sk) {
    const auto g = geometry(x, k, sq, sk);
    Tensor out({g.cout, g.oq_h, g.oq_w, g.ok_h, g.ok_w});
    const int64_t in_key = g.hk * g.wk;
    const int64_t in_q = g.hq * g.wq;
    const int64_t out_key = g.ok_h * g.ok_w;
    const int64_t out_q = g.oq_h * g.oq_w;
    const float* xd = x.data();
    const auto rows_k = tap_ranges(g.ok_h, g.hk, sk, g.kh, g.ph);
    const auto cols_k = tap_ranges(g.ok_w, g.wk, sk, g.kw, g.pw);
    const auto plan = sk == 1 ? key_plan(g, rows_k, cols_k) : KeyPlan{};

    for (int64_t co = 0; co < g.cout; ++co) {
        float* o = out.data() + co * out_q * out_key;
        std::fill(o, o + out_q * out_key, k.bias[static_cast<std::size_t>(co)]);
        for (int64_t ci = 0; ci < g.cin; ++ci) {
            const float* xc = xd + ci * in_q * in_key;
            const float* kq = k.query_side.data() + (co * g.cin + ci) * g.kh * g.kw;
            const float* kk = k.key_side.data() + (co * g.cin + ci) * g.kh * g.kw;
            // Query-side slice: 2D convolution over (Hq, Wq) with the key position at its pivot.
            for (int64_t a = 0; a < g.oq_h; ++a) {
                for (int64_t b = 0; b < g.oq_w; ++b) {
                    float* ob = o + (a * g.oq_w + b) * out_key;
                    for (int64_t i = 0; i < g.kh; ++i) {
                        const int64_t ia = a * sq + i - g.ph;
                        if (ia < 0 || ia >= g.hq) continue;
                        for (int64_t j = 0; j < g.kw; ++j) {
                            const int64_t ib = b * sq + j - g.pw;
                            if (ib < 0 || ib >= g.wq) continue;
                            const float kv = kq[i * g.kw + j];
                            const float* plane = xc + (ia * g.wq + ib) * in_key;
                            if (sk == 1) {
                                for (int64_t p = 0; p < out_key; ++p) ob[p] += kv * plane[p];
                            } else {
                                for (int64_t c = 0; c < g.ok_h; ++c)
                                    for (int64_t d = 0; d < g.ok_w; ++d)
                                        ob[c * g.ok_w + d] += kv * plane[(c * sk) * g.wk + d * sk];
                            }
                        }
                    }
                }
            }
            // Key-side slice: 2D convolution over (Hk, Wk) with the query position at its pivot.
            if (sk == 1) {
                for (int64_t a = 0; a < g.oq_h; ++a)
                    for (int64_t b = 0; b < g.oq_w; ++b) {
                        float* ob = o + (a * g.oq_w + b) * out_key;
                        const float* plane = xc + ((a * sq) * g.wq + b * sq) * in_key;
                        for (std::size_t t = 0; t < plan.taps.size(); ++t) {
                            const auto& tap = plan.taps[t];
                            const float kv = kk[t];
                            const float* src = plane + tap.shift;
                            for (int64_t p = tap.begin; p < tap.end; ++p) ob[p] += kv * tap.mask[p] * src[p];
                        }
                    }
                continue;
            }
            for (int64_t a = 0; a < g.oq_h; ++a) {
                for (int64_t b = 0; b < g.oq_w; ++b) {
                    float* ob = o + (a * g.oq_w + b) * out_key;
                    const float* plane = xc + ((a * sq) * g.wq + b * sq) * in_key;
                    for (int64_t i = 0; i < g.kh; ++i) {
                        const auto rows = rows_k[static_cast<std::size_t>(i)];
                        for (int64_t j = 0; j < g.kw; ++j) {
                            const auto cols = cols_k[static_cast<std::size_t>(j)];
                            const float kv = kk[i * g.kw + j];
                            for (int64_t c = rows.first; c < rows.second; ++c) {
                                const float* row = plane + (c * sk + i - g.ph) * g.wk + (j - g.pw);
                                float* orow = ob + c * g.ok_w;
                                if (sk == 1) {
                                    for (int64_t d = cols.first; d < cols.second; ++d) orow[d] += kv * row[d];
                                } else {
                                    for (int64_t d = cols.first; d < cols.second; ++d) orow[d] += kv * row[d * sk];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

CenterPivotGrads conv4d_center_pivot_backward(const Tensor& x, const CenterPivotKernel& k, int sq, int sk,
                                              const Tensor& grad_out) {
    const auto g = geometry(x, k, sq, sk);
    if (grad_out.shape() != Shape{g.cout, g.oq_h, g.oq_w, g.ok_h, g.ok_w})
        throw Error("conv4d backward: gradient shape " + shape_str(grad_out.shape()) + " does not match output");
    CenterPivotGrads grads{Tensor::zeros_like(x),
                           {Tensor::zeros_like(k.query_side), Tensor::zeros_like(k.key_side), Tensor::zeros_like(k.bias)}};
    const int64_t in_key = g.hk * g.wk;
    const int64_t in_q = g.hq * g.wq;
    const int64_t out_key = g.ok_h * g.ok_w;
    const int64_t out_q = g.oq_h * g.oq_w;
    const float* xd = x.data();
    float* gx = grads.input.data();
    const auto rows_k = tap_ranges(g.ok_h, g.hk, sk, g.kh, g.ph);
    const auto cols_k = tap_ranges(g.ok_w, g.wk, sk, g.kw, g.pw);
    const auto plan = sk == 1 ? key_plan(g, rows_k, cols_k) : KeyPlan{};
    std::vector<float> masked(sk == 1 ? static_cast<std::size_t>(g.kw * out_key) : 0);

    for (int64_t co = 0; co < g.cout; ++co) {
        const float* go = grad_out.data() + co * out_q * out_key;
        float bsum = 0.0f;
        for (int64_t p = 0; p < out_q * out_key; ++p) bsum += go[p];
        grads.kernel.bias[static_cast<std::size_t>(co)] = bsum;
        for (int64_t ci = 0; ci < g.cin; ++ci) {
            const float* xc = xd + ci * in_q * in_key;
            float* gxc = gx + ci * in_q * in_key;
            const std::size_t kbase = static_cast<std::size_t>((co * g.cin + ci) * g.kh * g.kw);
            const float* kq = k.query_side.data() + kbase;
            const float* kk = k.key_side.data() + kbase;
            float* gkq = grads.kernel.query_side.data() + kbase;
            float* gkk = grads.kernel.key_side.data() + kbase;
            for (int64_t a = 0; a < g.oq_h; ++a) {
                for (int64_t b = 0; b < g.oq_w; ++b) {
                    const float* gb = go + (a * g.oq_w + b) * out_key;
                    for (int64_t i = 0; i < g.kh; ++i) {
                        const int64_t ia = a * sq + i - g.ph;
                        if (ia < 0 || ia >= g.hq) continue;
                        for (int64_t j = 0; j < g.kw; ++j) {
                            const int64_t ib = b * sq + j - g.pw;
                            if (ib < 0 || ib >= g.wq) continue;
                            const float kv = kq[i * g.kw + j];
                            const std::size_t off = static_cast<std::size_t>((ia * g.wq + ib) * in_key);
                            const float* plane = xc + off;
                            float* gplane = gxc + off;
                            float acc = 0.0f;
                            if (sk == 1) {
                                acc = dot_lanes(gb, plane, out_key);
                                for (int64_t p = 0; p < out_key; ++p) gplane[p] += kv * gb[p];
                            } else {
                                for (int64_t c = 0; c < g.ok_h; ++c)
                                    for (int64_t d = 0; d < g.ok_w; ++d) {
                                        const int64_t src = (c * sk) * g.wk + d * sk;
                                        const float gv = gb[c * g.ok_w + d];
                                        acc += gv * plane[src];
                                        gplane[src] += kv * gv;
                                    }
                            }
                            gkq[i * g.kw + j] += acc;
                        }
                    }
                }
            }
            if (sk == 1) {
                for (int64_t a = 0; a < g.oq_h; ++a)
                    for (int64_t b = 0; b < g.oq_w; ++b) {
                        const float* gb = go + (a * g.oq_w + b) * out_key;
                        const std::size_t off = static_cast<std::size_t>(((a * sq) * g.wq + b * sq) * in_key);
                        for (int64_t j = 0; j < g.kw; ++j) {
                            const float* mask = plan.masks.data() + j * out_key;
                            float* m = masked.data() + j * out_key;
                            for (int64_t p = 0; p < out_key; ++p) m[p] = mask[p] * gb[p];
                        }
                        for (std::size_t t = 0; t < plan.taps.size(); ++t) {
                            const auto& tap = plan.taps[t];
                            const float* m = masked.data() + (static_cast<int64_t>(t) % g.kw) * out_key + tap.begin;
                            const float* src = xc + off + tap.shift + tap.begin;
                            float* gsrc = gxc + off + tap.shift + tap.begin;
                            const int64_t n = tap.end - tap.begin;
                            gkk[t] += dot_lanes(m, src, n);
                            const float kv = kk[t];
                            for (int64_t p = 0; p < n; ++p) gsrc[p] += kv * m[p];
                        }
                    }
                continue;
            }
            for (int64_t a = 0; a < g.oq_h; ++a) {
                for (int64_t b = 0; b < g.oq_w; ++b) {
                    const float* gb = go + (a * g.oq_w + b) * out_key;
                    const std::size_t off = static_cast<std::size_t>(((a * sq) * g.wq + b * sq) * in_key);
                    const float* plane = xc + off;
                    float* gplane = gxc + off;
                    for (int64_t i = 0; i < g.kh; ++i) {
                        const auto rows = rows_k[static_cast<std::size_t>(i)];
                        for (int64_t j = 0; j < g.kw; ++j) {
                            const auto cols = cols_k[static_cast<std::size_t>(j)];
                            const float kv = kk[i * g.kw + j];
                            float acc = 0.0f;
                            for (int64_t c = rows.first; c < rows.second; ++c) {
                                const int64_t src = (c * sk + i - g.ph) * g.wk + (j - g.pw);
                                const float* row = plane + src;
                                float* grow = gplane + src;
                                const float* grow_out = gb + c * g.ok_w;
                                for (int64_t d = cols.first; d < cols.second; ++d) {
                                    const float gv = grow_out[d];
                                    acc += gv * row[d * sk];
                                    grow[d * sk] += kv * gv;
                                }
                            }
                            gkk[i * g.kw + j] += acc;
                        }
                    }
                }
            }
        }
    }
    return grads;
}

int group_count(int64_t channels) { return static_cast<int>(std::gcd<int64_t, int64_t>(kMaxGroups, channels)); }

void EncoderConfig::validate() const {
    if (num_scales < 1) throw Error("encoder config: num_scales must be >= 1");
    if (in_channels < 1 || reduced_channels < 1) throw Error("encoder config: channel counts must be >= 1");
    if (num_blocks() < 2) throw Error("encoder config: need at least 2 blocks");
    for (int c : block_channels)
        if (c < 1) throw Error("encoder config: block widths must be >= 1");
    if (convs_per_block < 1) throw Error("encoder config: convs_per_block must be >= 1");
    if (mlp_hidden < 1) throw Error("encoder config: mlp_hidden must be >= 1");
}

namespace {

Tensor he_normal(Shape shape, double fan_in, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

}  // namespace

EncoderWeights EncoderWeights::init(const EncoderConfig& config, uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    EncoderWeights w;
    w.config = config;
    const int64_t cin = config.in_channels;
    const int64_t cred = config.reduced_channels;
    for (int s = 0; s < config.num_scales; ++s) {
        // Center tap picks evenly strided input channels. Backbone activations are
        // non-negative, so the reduced maps start out preserving their cosines.
        Tensor k({cred, cin, 3, 3});
        for (int64_t o = 0; o < cred; ++o) k[static_cast<std::size_t>(((o * cin + o * cin / cred) * 3 + 1) * 3 + 1)] = 1.0f;
        w.reducer.kernels.push_back(std::move(k));
        w.reducer.biases.emplace_back(Shape{cred});
    }
    int64_t prev = static_cast<int64_t>(config.num_scales) * config.num_scales;
    for (int b = 0; b < config.num_blocks(); ++b) {
        const int64_t width = config.block_channels[static_cast<std::size_t>(b)];
        for (int c = 0; c < config.convs_per_block; ++c) {
            Conv4dLayer layer;
            const double fan_in = static_cast<double>(prev * 9 * 2);
            layer.kernel.query_side = he_normal({width, prev, 3, 3}, fan_in, rng);
            layer.kernel.key_side = he_normal({width, prev, 3, 3}, fan_in, rng);
            layer.kernel.bias = Tensor({width});
            layer.gn_gamma = Tensor({width}, 1.0f);
            layer.gn_beta = Tensor({width});
            layer.stride = (c == config.convs_per_block - 1 && b < config.num_blocks() - 1) ? 2 : 1;
            w.layers.push_back(std::move(layer));
            prev = width;
        }
    }
    const int64_t hidden = config.mlp_hidden;
    w.fc1_weight = he_normal({hidden, prev}, static_cast<double>(prev), rng);
    w.fc1_bias = Tensor({hidden});
    w.fc2_weight = he_normal({2, hidden}, static_cast<double>(2 * hidden), rng);
    w.fc2_bias = Tensor({2});
    return w;
}

EncoderWeights EncoderWeights::zeros_like() const {
    EncoderWeights z = *this;
    for (auto& p : z.parameters()) p.tensor->fill(0.0f);
    return z;
}

std::vector<EncoderWeights::Named> EncoderWeights::parameters() {
    std::vector<Named> out;
    for (std::size_t s = 0; s < reducer.kernels.size(); ++s) {
        out.push_back({"reducer." + std::to_string(s) + ".weight", &reducer.kernels[s]});
        out.push_back({"reducer." + std::to_string(s) + ".bias", &reducer.biases[s]});
    }
    const int per_block = config.convs_per_block;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string prefix = "block" + std::to_string(static_cast<int>(l) / per_block) + ".conv" +
                                   std::to_string(static_cast<int>(l) % per_block) + ".";
        out.push_back({prefix + "query", &layers[l].kernel.query_side});
        out.push_back({prefix + "key", &layers[l].kernel.key_side});
        out.push_back({prefix + "bias", &layers[l].kernel.bias});
        out.push_back({prefix + "gn_gamma", &layers[l].gn_gamma});
        out.push_back({prefix + "gn_beta", &layers[l].gn_beta});
    }
    out.push_back({"mlp.fc1.weight", &fc1_weight});
    out.push_back({"mlp.fc1.bias", &fc1_bias});
    out.push_back({"mlp.fc2.weight", &fc2_weight});
    out.push_back({"mlp.fc2.bias", &fc2_bias});
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> EncoderWeights::parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& p : const_cast<EncoderWeights*>(this)->parameters()) out.emplace_back(p.name, p.tensor);
    return out;
}

std::size_t EncoderWeights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.second->size();
    return n;
}

namespace {

// Group normalization over a C x (spatial) tensor; statistics per group of channels.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, GroupNormCache* cache) {
    const int64_t c = x.dim(0);
    const int64_t spatial = static_cast<int64_t>(x.size()) / c;
    const int groups = group_count(c);
    const int64_t per_group = c / groups;
    const int64_t n = per_group * spatial;
    Tensor y = Tensor::zeros_like(x);
    Tensor xhat = Tensor::zeros_like(x);
    std::vector<float> inv_std(static_cast<std::size_t>(groups));
    for (int grp = 0; grp < groups; ++grp) {
        const float* xs = x.data() + grp * n;
        double sum = 0.0;
        for (int64_t i = 0; i < n; ++i) sum += xs[i];
        const double mean = sum / static_cast<double>(n);
        double var = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double d = xs[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const auto istd = static_cast<float>(1.0 / std::sqrt(var + kGroupNormEps));
        inv_std[static_cast<std::size_t>(grp)] = istd;
        for (int64_t ch = 0; ch < per_group; ++ch) {
            const int64_t cc = grp * per_group + ch;
            const float ga = gamma[static_cast<std::size_t>(cc)];
            const float be = beta[static_cast<std::size_t>(cc)];
            const int64_t base = cc * spatial;
            for (int64_t i = 0; i < spatial; ++i) {
                const float h = static_cast<float>(x[static_cast<std::size_t>(base + i)] - mean) * istd;
                xhat[static_cast<std::size_t>(base + i)] = h;
                y[static_cast<std::size_t>(base + i)] = ga * h + be;
            }
        }
    }
    if (cache) *cache = {std::move(xhat), std::move(inv_std)};
    return y;
}

Tensor group_norm_backward(const GroupNormCache& cache, const Tensor& gamma, const Tensor& grad_out, Tensor& grad_gamma,
                           Tensor& grad_beta) {
    const auto& xhat = cache.normalized;
    const int64_t c = xhat.dim(0);
    const int64_t spatial = static_cast<int64_t>(xhat.size()) / c;
    const int groups = group_count(c);
    const int64_t per_group = c / groups;
    const auto n = static_cast<double>(per_group * spatial);
    Tensor gx = Tensor::zeros_like(xhat);
    for (int grp = 0; grp < groups; ++grp) {
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (int64_t ch = 0; ch < per_group; ++ch) {
            const int64_t cc = grp * per_group + ch;
            const float ga = gamma[static_cast<std::size_t>(cc)];
            float dgamma = 0.0f;
            float dbeta = 0.0f;
            for (int64_t i = 0; i < spatial; ++i) {
                const auto idx = static_cast<std::size_t>(cc * spatial + i);
                const float go = grad_out[idx];
                dgamma += go * xhat[idx];
                dbeta += go;
                const double gh = static_cast<double>(go) * ga;
                sum_g += gh;
                sum_gx += gh * xhat[idx];
            }
            grad_gamma[static_cast<std::size_t>(cc)] += dgamma;
            grad_beta[static_cast<std::size_t>(cc)] += dbeta;
        }
        const double mean_g = sum_g / n;
        const double mean_gx = sum_gx / n;
        const float istd = cache.inv_std[static_cast<std::size_t>(grp)];
        for (int64_t ch = 0; ch < per_group; ++ch) {
            const int64_t cc = grp * per_group + ch;
            const float ga = gamma[static_cast<std::size_t>(cc)];
            for (int64_t i = 0; i < spatial; ++i) {
                const auto idx = static_cast<std::size_t>(cc * spatial + i);
                const double gh = static_cast<double>(grad_out[idx]) * ga;
                gx[idx] = static_cast<float>((gh - mean_g - xhat[idx] * mean_gx) * istd);
            }
        }
    }
    return gx;
}

void check_volume(const Tensor& volume, const EncoderWeights& w) {
    const int64_t s2 = static_cast<int64_t>(w.config.num_scales) * w.config.num_scales;
    if (volume.rank() != 5 || volume.dim(0) != s2)
        throw Error("encoder expects an S^2 x Hq x Wq x Hk x Wk volume with S^2 = " + std::to_string(s2) + ", got " +
                    shape_str(volume.shape()));
    if (w.layers.size() != static_cast<std::size_t>(w.config.num_blocks() * w.config.convs_per_block))
        throw Error("encoder weights do not match their config");
}

}  // namespace

PairLogit encoder_forward(const Tensor& volume, const EncoderWeights& w, EncoderCache* cache) {
    check_volume(volume, w);
    if (cache) *cache = EncoderCache{};
    Tensor x = volume;
    for (const auto& layer : w.layers) {
        if (layer.stride == 2)
            for (std::size_t ax = 1; ax < 5; ++ax)
                if (x.dim(ax) < 2) throw Error("input too small for encoder depth");
        Tensor pre = conv4d_center_pivot(x, layer.kernel, layer.stride, layer.stride);
        GroupNormCache gn;
        Tensor y = relu(group_norm(pre, layer.gn_gamma, layer.gn_beta, cache ? &gn : nullptr));
        if (cache) {
            cache->inputs.push_back(std::move(x));
            cache->norm.push_back(std::move(gn));
            cache->outputs.push_back(y);
        }
        x = std::move(y);
    }
    const int64_t c = x.dim(0);
    const int64_t spatial = static_cast<int64_t>(x.size()) / c;
    Tensor pooled({c});
    for (int64_t ch = 0; ch < c; ++ch) {
        float acc = 0.0f;
        for (int64_t i = 0; i < spatial; ++i) acc += x[static_cast<std::size_t>(ch * spatial + i)];
        pooled[static_cast<std::size_t>(ch)] = acc / static_cast<float>(spatial);
    }
    const int64_t hidden_n = w.fc1_weight.dim(0);
    Tensor hidden({hidden_n});
    for (int64_t h = 0; h < hidden_n; ++h) {
        float acc = w.fc1_bias[static_cast<std::size_t>(h)];
        for (int64_t ch = 0; ch < c; ++ch)
            acc += w.fc1_weight[static_cast<std::size_t>(h * c + ch)] * pooled[static_cast<std::size_t>(ch)];
        hidden[static_cast<std::size_t>(h)] = acc > 0.0f ? acc : 0.0f;
    }
    std::array<float, 2> z{};
    for (int64_t k = 0; k < 2; ++k) {
        float acc = w.fc2_bias[static_cast<std::size_t>(k)];
        for (int64_t h = 0; h < hidden_n; ++h)
            acc += w.fc2_weight[static_cast<std::size_t>(k * hidden_n + h)] * hidden[static_cast<std::size_t>(h)];
        z[static_cast<std::size_t>(k)] = acc;
    }
    if (cache) {
        cache->pooled = std::move(pooled);
        cache->hidden = std::move(hidden);
    }
    return {z[0], z[1]};
}

PairLogit encoder_forward(const CrossScaleCorrelation& c, const EncoderWeights& w, EncoderCache* cache) {
    return encoder_forward(c.volume, w, cache);
}

Tensor encoder_backward(const EncoderCache& cache, const EncoderWeights& w, const PairLogit& grad_logit,
                        EncoderWeights& grads) {
    if (cache.inputs.size() != w.layers.size()) throw Error("encoder cache does not match weights");
    const int64_t hidden_n = w.fc1_weight.dim(0);
    const int64_t c = cache.pooled.dim(0);
    const std::array<float, 2> gz{grad_logit.z0, grad_logit.z1};

    Tensor ghidden({hidden_n});
    for (int64_t k = 0; k < 2; ++k) {
        grads.fc2_bias[static_cast<std::size_t>(k)] += gz[static_cast<std::size_t>(k)];
        for (int64_t h = 0; h < hidden_n; ++h) {
            grads.fc2_weight[static_cast<std::size_t>(k * hidden_n + h)] +=
                gz[static_cast<std::size_t>(k)] * cache.hidden[static_cast<std::size_t>(h)];
            ghidden[static_cast<std::size_t>(h)] +=
                gz[static_cast<std::size_t>(k)] * w.fc2_weight[static_cast<std::size_t>(k * hidden_n + h)];
        }
    }
    Tensor gpooled({c});
    for (int64_t h = 0; h < hidden_n; ++h) {
        if (!(cache.hidden[static_cast<std::size_t>(h)] > 0.0f)) continue;
        const float g = ghidden[static_cast<std::size_t>(h)];
        grads.fc1_bias[static_cast<std::size_t>(h)] += g;
        for (int64_t ch = 0; ch < c; ++ch) {
            grads.fc1_weight[static_cast<std::size_t>(h * c + ch)] += g * cache.pooled[static_cast<std::size_t>(ch)];
            gpooled[static_cast<std::size_t>(ch)] += g * w.fc1_weight[static_cast<std::size_t>(h * c + ch)];
        }
    }
    const Tensor& last = cache.outputs.back();
    Tensor g = Tensor::zeros_like(last);
    const int64_t spatial = static_cast<int64_t>(last.size()) / c;
    for (int64_t ch = 0; ch < c; ++ch) {
        const float v = gpooled[static_cast<std::size_t>(ch)] / static_cast<float>(spatial);
        for (int64_t i = 0; i < spatial; ++i) g[static_cast<std::size_t>(ch * spatial + i)] = v;
    }
    for (std::size_t l = w.layers.size(); l-- > 0;) {
        const auto& layer = w.layers[l];
        auto& gl = grads.layers[l];
        Tensor gnorm = relu_backward(cache.outputs[l], g);
        Tensor gpre = group_norm_backward(cache.norm[l], layer.gn_gamma, gnorm, gl.gn_gamma, gl.gn_beta);
        auto cg = conv4d_center_pivot_backward(cache.inputs[l], layer.kernel, layer.stride, layer.stride, gpre);
        gl.kernel.query_side += cg.kernel.query_side;
        gl.kernel.key_side += cg.kernel.key_side;
        gl.kernel.bias += cg.kernel.bias;
        g = std::move(cg.input);
    }
    return g;
}

float similarity_from_logit(const PairLogit& z) {
    const float m = std::max(z.z0, z.z1);
    const float e0 = std::exp(z.z0 - m);
    const float e1 = std::exp(z.z1 - m);
    return e1 / (e0 + e1);
}

PairLogit score_pair(const FeaturePyramid& reduced_q, const FeaturePyramid& reduced_k, const EncoderWeights& w) {
    return encoder_forward(assemble_cross_scale(reduced_q, reduced_k).volume, w);
}

namespace {

constexpr std::array<char, 4> kWeightsMagic = {'C', 'V', 'W', '1'};

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error("truncated weights file");
    return v;
}

}  // namespace

// Layout after the magic: u32 num_scales, u32 in_channels, u32 reduced_channels, u32 num_blocks,
// u32 width per block, u32 convs_per_block, u32 mlp_hidden, u32 record count, then per record
// u32 name length, name bytes, one tensor record.
void save_weights(const std::string& path, const EncoderWeights& w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open for writing: " + path);
    os.write(kWeightsMagic.data(), kWeightsMagic.size());
    const auto& c = w.config;
    put_u32(os, static_cast<uint32_t>(c.num_scales));
    put_u32(os, static_cast<uint32_t>(c.in_channels));
    put_u32(os, static_cast<uint32_t>(c.reduced_channels));
    put_u32(os, static_cast<uint32_t>(c.num_blocks()));
    for (int b : c.block_channels) put_u32(os, static_cast<uint32_t>(b));
    put_u32(os, static_cast<uint32_t>(c.convs_per_block));
    put_u32(os, static_cast<uint32_t>(c.mlp_hidden));
    const auto params = w.parameters();
    put_u32(os, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, *t);
    }
    if (!os) throw Error("failed writing weights: " + path);
}

EncoderWeights load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open: " + path);
    try {
        std::array<char, 4> magic{};
        if (!is.read(magic.data(), magic.size()) || magic != kWeightsMagic) throw Error("bad weights magic (expected CVW1)");
        EncoderConfig c;
        c.num_scales = static_cast<int>(get_u32(is));
        c.in_channels = static_cast<int>(get_u32(is));
        c.reduced_channels = static_cast<int>(get_u32(is));
        const uint32_t blocks = get_u32(is);
        if (blocks > 64) throw Error("implausible block count " + std::to_string(blocks));
        c.block_channels.assign(blocks, 0);
        for (auto& b : c.block_channels) b = static_cast<int>(get_u32(is));
        c.convs_per_block = static_cast<int>(get_u32(is));
        c.mlp_hidden = static_cast<int>(get_u32(is));
        EncoderWeights w = EncoderWeights::init(c, 0);
        std::map<std::string, Tensor*> slots;
        for (auto& p : w.parameters()) slots[p.name] = p.tensor;
        const uint32_t count = get_u32(is);
        if (count != slots.size())
            throw Error("weights file has " + std::to_string(count) + " records, config implies " +
                        std::to_string(slots.size()));
        for (uint32_t r = 0; r < count; ++r) {
            const uint32_t len = get_u32(is);
            if (len > 256) throw Error("implausible record name length");
            std::string name(len, '\0');
            if (!is.read(name.data(), len)) throw Error("truncated weights file");
            auto it = slots.find(name);
            if (it == slots.end()) throw Error("unexpected weights record '" + name + "'");
            Tensor t = read_tensor(is);
            if (!t.same_shape(*it->second))
                throw Error("record '" + name + "' has shape " + shape_str(t.shape()) + ", config expects " +
                            shape_str(it->second->shape()));
            *it->second = std::move(t);
            slots.erase(it);
        }
        return w;
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

}  // namespace cvr
