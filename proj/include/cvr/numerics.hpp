#pragma once

#include <cstdint>
#include <functional>

#include "cvr/tensor.hpp"

namespace cvr {

// ---------------------------------------------------------------------------
// Bilinear resizing (align_corners = false).
//
// Source coordinate for output index o is (o + 0.5) * in / out - 0.5, clamped
// at zero; blends use the lerp form a + w * (b - a) so constants and identity
// resizes are reproduced bit for bit.
// ---------------------------------------------------------------------------

Tensor resize_bilinear(const Tensor& src, int64_t out_h, int64_t out_w);
/// Adjoint of resize_bilinear: scatters output gradients back onto the source grid.
Tensor resize_bilinear_backward(const Tensor& grad_out, int64_t in_h, int64_t in_w);

namespace detail {

struct AxisTap {
    int64_t i0 = 0;
    int64_t i1 = 0;
    float w = 0.0f;
};

std::vector<AxisTap> bilinear_taps(int64_t in, int64_t out);

// Resizes every [H][W] grid of a buffer laid out as [outer][H][W][inner].
void resize_grid(const float* src, float* dst, int64_t outer, int64_t in_h, int64_t in_w, int64_t inner,
                 int64_t out_h, int64_t out_w);
// Accumulating adjoint of resize_grid (dst is added into, not overwritten).
void resize_grid_backward(const float* grad_out, float* grad_src, int64_t outer, int64_t in_h, int64_t in_w,
                          int64_t inner, int64_t out_h, int64_t out_w);

}  // namespace detail

// ---------------------------------------------------------------------------
// 2D convolution (cross-correlation), fixed loop order.
// ---------------------------------------------------------------------------

struct Conv2dGrads {
    Tensor input;
    Tensor kernel;
    Tensor bias;
};

/// x: Cin x H x W, kernel: Cout x Cin x kh x kw, bias: Cout (or empty).
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad, const Tensor* bias = nullptr);
Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& kernel, int stride, int pad, const Tensor& grad_out);

Tensor relu(const Tensor& x);
/// grad * 1[y > 0], where y is the ReLU output.
Tensor relu_backward(const Tensor& y, const Tensor& grad_out);

// ---------------------------------------------------------------------------
// Pooling and normalization.
// ---------------------------------------------------------------------------

constexpr float kGemClamp = 1e-6f;
constexpr float kNormFloor = 1e-12f;

/// Generalized mean per channel of a C x H x W map: (mean(max(x, 1e-6)^p))^(1/p).
Tensor gem_pool(const Tensor& x, float p);

struct GemGrads {
    Tensor input;
    float power = 0.0f;
};
GemGrads gem_pool_backward(const Tensor& x, float p, const Tensor& grad_out);

struct Normalized {
    Tensor value;
    float norm = 0.0f;
    bool degenerate = false;
};

/// Unit-norm copy of x; near-zero input yields the zero vector with degenerate set.
Normalized l2_normalize(const Tensor& x);
Tensor l2_normalize_backward(const Normalized& y, const Tensor& grad_out);

float dot(std::span<const float> a, std::span<const float> b);
float l2_norm(std::span<const float> a);

// ---------------------------------------------------------------------------
// Finite-difference gradient checker.
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_abs_diff = 0.0;
    // Largest |analytic - numeric| relative to the largest gradient magnitude seen among the probes.
    double max_rel_diff = 0.0;
    int probe_count = 0;
};

using ScalarFn = std::function<double(const Tensor&)>;

/// Central differences at `probes` randomly chosen coordinates of x (all of them if x is smaller).
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const Tensor& analytic_grad, double eps,
                           int probes = 32, uint64_t seed = 7);

}  // namespace cvr
