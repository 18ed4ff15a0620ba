#include "cvr/correlation.hpp"

#include <cmath>

#include "cvr/numerics.hpp"

namespace cvr {

FeatureMap::FeatureMap(Tensor data) : data_(std::move(data)) {
    if (data_.rank() != 3) throw Error("feature map must be C x H x W, got " + shape_str(data_.shape()));
    if (data_.dim(1) < 4 || data_.dim(2) < 4)
        throw Error("feature map spatial extent must be at least 4x4, got " + shape_str(data_.shape()));
    for (float v : data_.values())
        if (!std::isfinite(v)) throw Error("feature map contains non-finite values");
}

int64_t pyramid_extent(int64_t extent, int level) {
    const double scaled = std::pow(M_SQRT1_2, level) * static_cast<double>(extent);
    return static_cast<int64_t>(std::floor(scaled + 0.5));
}

FeaturePyramid build_pyramid(const FeatureMap& f, int num_scales) {
    if (num_scales < 1) throw Error("pyramid needs at least one scale");
    FeaturePyramid pyr;
    for (int s = 0; s < num_scales; ++s) {
        const int64_t h = pyramid_extent(f.height(), s);
        const int64_t w = pyramid_extent(f.width(), s);
        if (h < 1 || w < 1) throw Error("pyramid too deep");
        pyr.scales.push_back(std::pow(M_SQRT1_2, s));
        pyr.levels.push_back(s == 0 ? f.tensor() : resize_bilinear(f.tensor(), h, w));
    }
    return pyr;
}

namespace {

void check_reducer(const FeaturePyramid& pyr, const ReducerWeights& w) {
    if (w.kernels.size() != pyr.size() || w.biases.size() != pyr.size())
        throw Error("reducer has " + std::to_string(w.kernels.size()) + " kernels for a " +
                    std::to_string(pyr.size()) + "-level pyramid");
    for (std::size_t s = 0; s < pyr.size(); ++s) {
        const auto& k = w.kernels[s];
        if (k.rank() != 4 || k.dim(2) != 3 || k.dim(3) != 3)
            throw Error("reducer kernel must be C' x C x 3 x 3, got " + shape_str(k.shape()));
        if (k.dim(1) != pyr.levels[s].dim(0))
            throw Error("reducer kernel expects " + std::to_string(k.dim(1)) + " input channels, level has " +
                        std::to_string(pyr.levels[s].dim(0)));
    }
}

}  // namespace

FeaturePyramid reduce_scalewise(const FeaturePyramid& pyr, const ReducerWeights& w) {
    check_reducer(pyr, w);
    FeaturePyramid out;
    out.scales = pyr.scales;
    for (std::size_t s = 0; s < pyr.size(); ++s)
        out.levels.push_back(relu(conv2d(pyr.levels[s], w.kernels[s], 1, 1, &w.biases[s])));
    return out;
}

ReducerWeights reduce_scalewise_backward(const FeaturePyramid& input, const FeaturePyramid& reduced,
                                         const std::vector<Tensor>& grad_reduced, const ReducerWeights& w) {
    check_reducer(input, w);
    ReducerWeights g;
    for (std::size_t s = 0; s < input.size(); ++s) {
        auto gpre = relu_backward(reduced.levels[s], grad_reduced[s]);
        auto cg = conv2d_backward(input.levels[s], w.kernels[s], 1, 1, gpre);
        g.kernels.push_back(std::move(cg.kernel));
        g.biases.push_back(std::move(cg.bias));
    }
    return g;
}

namespace {

// Position-major unit vectors (P x C) and the per-position norms.
struct UnitColumns {
    std::vector<float> unit;
    std::vector<float> norm;
};

UnitColumns unit_columns(const Tensor& f) {
    const int64_t c = f.dim(0);
    const int64_t p = f.dim(1) * f.dim(2);
    UnitColumns u{std::vector<float>(static_cast<std::size_t>(p * c), 0.0f),
                  std::vector<float>(static_cast<std::size_t>(p), 0.0f)};
    for (int64_t i = 0; i < p; ++i) {
        float acc = 0.0f;
        for (int64_t ch = 0; ch < c; ++ch) {
            const float v = f[static_cast<std::size_t>(ch * p + i)];
            acc += v * v;
        }
        const float n = std::sqrt(acc);
        u.norm[static_cast<std::size_t>(i)] = n;
        if (n > kNormFloor)
            for (int64_t ch = 0; ch < c; ++ch)
                u.unit[static_cast<std::size_t>(i * c + ch)] = f[static_cast<std::size_t>(ch * p + i)] / n;
    }
    return u;
}

void check_pair(const Tensor& fq, const Tensor& fk) {
    if (fq.rank() != 3 || fk.rank() != 3) throw Error("correlate expects two C x H x W maps");
    if (fq.dim(0) != fk.dim(0))
        throw Error("correlate channel mismatch: " + std::to_string(fq.dim(0)) + " vs " + std::to_string(fk.dim(0)));
}

}  // namespace

Tensor correlate(const Tensor& fq, const Tensor& fk) {
    check_pair(fq, fk);
    const int64_t c = fq.dim(0);
    const int64_t pq = fq.dim(1) * fq.dim(2);
    const int64_t pk = fk.dim(1) * fk.dim(2);
    const auto uq = unit_columns(fq);
    const auto uk = unit_columns(fk);
    Tensor out({fq.dim(1), fq.dim(2), fk.dim(1), fk.dim(2)});
    for (int64_t a = 0; a < pq; ++a) {
        const float* qa = uq.unit.data() + a * c;
        for (int64_t b = 0; b < pk; ++b) {
            const float* kb = uk.unit.data() + b * c;
            float acc = 0.0f;
            for (int64_t ch = 0; ch < c; ++ch) acc += qa[ch] * kb[ch];
            out[static_cast<std::size_t>(a * pk + b)] = acc > 0.0f ? acc : 0.0f;
        }
    }
    return out;
}

CorrelationGrads correlate_backward(const Tensor& fq, const Tensor& fk, const Tensor& corr, const Tensor& grad_corr) {
    check_pair(fq, fk);
    const int64_t c = fq.dim(0);
    const int64_t pq = fq.dim(1) * fq.dim(2);
    const int64_t pk = fk.dim(1) * fk.dim(2);
    const auto uq = unit_columns(fq);
    const auto uk = unit_columns(fk);
    // Gradients with respect to the unit vectors first, then projected through the normalization.
    std::vector<float> gq(static_cast<std::size_t>(pq * c), 0.0f);
    std::vector<float> gk(static_cast<std::size_t>(pk * c), 0.0f);
    for (int64_t a = 0; a < pq; ++a) {
        const float* qa = uq.unit.data() + a * c;
        float* ga = gq.data() + a * c;
        for (int64_t b = 0; b < pk; ++b) {
            const auto idx = static_cast<std::size_t>(a * pk + b);
            if (!(corr[idx] > 0.0f)) continue;
            const float g = grad_corr[idx];
            const float* kb = uk.unit.data() + b * c;
            float* gb = gk.data() + b * c;
            for (int64_t ch = 0; ch < c; ++ch) {
                ga[ch] += g * kb[ch];
                gb[ch] += g * qa[ch];
            }
        }
    }
    auto project = [c](const UnitColumns& u, const std::vector<float>& gu, Tensor& out) {
        const int64_t p = static_cast<int64_t>(u.norm.size());
        for (int64_t i = 0; i < p; ++i) {
            const float n = u.norm[static_cast<std::size_t>(i)];
            if (!(n > kNormFloor)) continue;
            const float* ui = u.unit.data() + i * c;
            const float* gi = gu.data() + i * c;
            float proj = 0.0f;
            for (int64_t ch = 0; ch < c; ++ch) proj += ui[ch] * gi[ch];
            for (int64_t ch = 0; ch < c; ++ch)
                out[static_cast<std::size_t>(ch * p + i)] = (gi[ch] - ui[ch] * proj) / n;
        }
    };
    CorrelationGrads grads{Tensor::zeros_like(fq), Tensor::zeros_like(fk)};
    project(uq, gq, grads.query);
    project(uk, gk, grads.key);
    return grads;
}

CrossScaleCorrelation assemble_cross_scale(const FeaturePyramid& pq, const FeaturePyramid& pk,
                                           CrossScaleCache* cache) {
    if (pq.size() == 0 || pq.size() != pk.size())
        throw Error("cross-scale correlation needs pyramids with the same, non-zero level count");
    const auto s_count = static_cast<int64_t>(pq.size());
    const int64_t hq = pq.levels[0].dim(1), wq = pq.levels[0].dim(2);
    const int64_t hk = pk.levels[0].dim(1), wk = pk.levels[0].dim(2);
    const int64_t slice = hq * wq * hk * wk;
    CrossScaleCorrelation out{Tensor({s_count * s_count, hq, wq, hk, wk}), {}, {}};
    if (cache) cache->raw.assign(static_cast<std::size_t>(s_count * s_count), Tensor());
    for (int64_t sq = 0; sq < s_count; ++sq) {
        for (int64_t sk = 0; sk < s_count; ++sk) {
            const auto& lq = pq.levels[static_cast<std::size_t>(sq)];
            const auto& lk = pk.levels[static_cast<std::size_t>(sk)];
            Tensor raw = correlate(lq, lk);
            const int64_t rq_h = lq.dim(1), rq_w = lq.dim(2), rk_h = lk.dim(1), rk_w = lk.dim(2);
            float* dst = out.volume.data() + (sq * s_count + sk) * slice;
            // Query-side grid first ([1][rq_h][rq_w][rk_h*rk_w]), then key-side grid per query position.
            std::vector<float> mid(static_cast<std::size_t>(hq * wq * rk_h * rk_w));
            detail::resize_grid(raw.data(), mid.data(), 1, rq_h, rq_w, rk_h * rk_w, hq, wq);
            detail::resize_grid(mid.data(), dst, hq * wq, rk_h, rk_w, 1, hk, wk);
            if (cache) cache->raw[static_cast<std::size_t>(sq * s_count + sk)] = std::move(raw);
        }
    }
    return out;
}

PyramidGrads assemble_cross_scale_backward(const FeaturePyramid& pq, const FeaturePyramid& pk,
                                           const CrossScaleCache& cache, const Tensor& grad_volume) {
    const auto s_count = static_cast<int64_t>(pq.size());
    if (cache.raw.size() != static_cast<std::size_t>(s_count * s_count))
        throw Error("cross-scale cache does not match pyramid depth");
    const int64_t hq = pq.levels[0].dim(1), wq = pq.levels[0].dim(2);
    const int64_t hk = pk.levels[0].dim(1), wk = pk.levels[0].dim(2);
    const int64_t slice = hq * wq * hk * wk;
    PyramidGrads grads;
    for (const auto& l : pq.levels) grads.query.push_back(Tensor::zeros_like(l));
    for (const auto& l : pk.levels) grads.key.push_back(Tensor::zeros_like(l));
    for (int64_t sq = 0; sq < s_count; ++sq) {
        for (int64_t sk = 0; sk < s_count; ++sk) {
            const auto& lq = pq.levels[static_cast<std::size_t>(sq)];
            const auto& lk = pk.levels[static_cast<std::size_t>(sk)];
            const auto& raw = cache.raw[static_cast<std::size_t>(sq * s_count + sk)];
            const int64_t rq_h = lq.dim(1), rq_w = lq.dim(2), rk_h = lk.dim(1), rk_w = lk.dim(2);
            const float* g = grad_volume.data() + (sq * s_count + sk) * slice;
            std::vector<float> gmid(static_cast<std::size_t>(hq * wq * rk_h * rk_w), 0.0f);
            detail::resize_grid_backward(g, gmid.data(), hq * wq, rk_h, rk_w, 1, hk, wk);
            Tensor graw = Tensor::zeros_like(raw);
            detail::resize_grid_backward(gmid.data(), graw.data(), 1, rq_h, rq_w, rk_h * rk_w, hq, wq);
            auto cg = correlate_backward(lq, lk, raw, graw);
            grads.query[static_cast<std::size_t>(sq)] += cg.query;
            grads.key[static_cast<std::size_t>(sk)] += cg.key;
        }
    }
    return grads;
}

}  // namespace cvr
