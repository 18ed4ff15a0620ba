#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cvr/tensor.hpp"

namespace cvr {

/// Dense C x H x W activation grid of one image, as produced by a frozen backbone stage.
class FeatureMap {
public:
    FeatureMap() = default;
    /// Validates rank, finiteness, and the minimum 4 x 4 spatial extent.
    explicit FeatureMap(Tensor data);

    const Tensor& tensor() const { return data_; }
    int64_t channels() const { return data_.dim(0); }
    int64_t height() const { return data_.dim(1); }
    int64_t width() const { return data_.dim(2); }

private:
    Tensor data_;
};

struct FeaturePyramid {
    std::vector<Tensor> levels;  // each C x H_s x W_s, level 0 at full resolution
    std::vector<double> scales;  // descending, scales[0] == 1

    std::size_t size() const { return levels.size(); }
};

/// Scale-wise 3x3 channel reducers, one kernel/bias pair per pyramid level.
struct ReducerWeights {
    std::vector<Tensor> kernels;  // C' x C x 3 x 3
    std::vector<Tensor> biases;   // C'
};

struct CrossScaleCorrelation {
    Tensor volume;  // S^2 x Hq x Wq x Hk x Wk, slice index s_q * S + s_k
    std::string query_id;
    std::string key_id;
};

/// Extent of pyramid level `level`: round-half-up of (1/sqrt 2)^level * extent.
int64_t pyramid_extent(int64_t extent, int level);

/// Level s is the input bilinearly resized by (1/sqrt 2)^s; level 0 is an exact copy.
FeaturePyramid build_pyramid(const FeatureMap& f, int num_scales);

/// relu(conv3x3(level_s, kernel_s) + bias_s) per level, stride 1, padding 1.
FeaturePyramid reduce_scalewise(const FeaturePyramid& pyr, const ReducerWeights& w);

/// Gradients of the reducer parameters given the reduced outputs and their upstream gradients.
ReducerWeights reduce_scalewise_backward(const FeaturePyramid& input, const FeaturePyramid& reduced,
                                         const std::vector<Tensor>& grad_reduced, const ReducerWeights& w);

/// ReLU'd cosine similarity between every query and key position: Hq x Wq x Hk x Wk.
/// Positions whose feature vector has (near) zero norm correlate to 0.
Tensor correlate(const Tensor& fq, const Tensor& fk);

struct CorrelationGrads {
    Tensor query;
    Tensor key;
};
CorrelationGrads correlate_backward(const Tensor& fq, const Tensor& fk, const Tensor& corr, const Tensor& grad_corr);

struct CrossScaleCache {
    std::vector<Tensor> raw;  // per slice, before interpolation
};

/// All S^2 level pairs correlated and bilinearly resized to the level-0 grid of each side.
CrossScaleCorrelation assemble_cross_scale(const FeaturePyramid& pq, const FeaturePyramid& pk,
                                           CrossScaleCache* cache = nullptr);

struct PyramidGrads {
    std::vector<Tensor> query;
    std::vector<Tensor> key;
};
PyramidGrads assemble_cross_scale_backward(const FeaturePyramid& pq, const FeaturePyramid& pk,
                                           const CrossScaleCache& cache, const Tensor& grad_volume);

}  // namespace cvr
