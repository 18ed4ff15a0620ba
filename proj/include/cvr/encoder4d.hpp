#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvr/correlation.hpp"
#include "cvr/tensor.hpp"

namespace cvr {

/// 4D kernel sparsified to its two center slices: one sweeping the query-side
/// grid with the key position pinned at the pivot, one sweeping the key side.
struct CenterPivotKernel {
    Tensor query_side;  // Cout x Cin x kh x kw
    Tensor key_side;    // Cout x Cin x kh x kw
    Tensor bias;        // Cout

    int64_t out_channels() const { return query_side.dim(0); }
    int64_t in_channels() const { return query_side.dim(1); }
};

/// x: Cin x Hq x Wq x Hk x Wk. Same-style padding (k - 1) / 2 on all four spatial axes.
Tensor conv4d_center_pivot(const Tensor& x, const CenterPivotKernel& k, int stride_q, int stride_k);

struct CenterPivotGrads {
    Tensor input;
    CenterPivotKernel kernel;
};
CenterPivotGrads conv4d_center_pivot_backward(const Tensor& x, const CenterPivotKernel& k, int stride_q, int stride_k,
                                              const Tensor& grad_out);

/// Output extent of a same-padded odd-kernel convolution.
inline int64_t strided_extent(int64_t extent, int stride) { return (extent - 1) / stride + 1; }

struct EncoderConfig {
    int num_scales = 3;
    int in_channels = 1024;     // backbone channels C_l fed to the reducers
    int reduced_channels = 256;  // C'_l
    std::vector<int> block_channels{16, 32, 64, 128};
    int convs_per_block = 2;
    int mlp_hidden = 128;

    int num_blocks() const { return static_cast<int>(block_channels.size()); }
    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

constexpr int kMaxGroups = 4;
constexpr float kGroupNormEps = 1e-5f;

/// Group count used for a block of `channels` channels: gcd(4, channels).
int group_count(int64_t channels);

struct Conv4dLayer {
    CenterPivotKernel kernel;
    Tensor gn_gamma;
    Tensor gn_beta;
    int stride = 1;
};

/// Every trainable parameter of the verification model: reducers, 4D blocks, MLP head.
struct EncoderWeights {
    EncoderConfig config;
    ReducerWeights reducer;
    std::vector<Conv4dLayer> layers;  // num_blocks * convs_per_block, block-major
    Tensor fc1_weight;                // hidden x C_last
    Tensor fc1_bias;
    Tensor fc2_weight;                // 2 x hidden
    Tensor fc2_bias;

    /// He-style random initialization; unit GN scale, zero shifts and biases.
    static EncoderWeights init(const EncoderConfig& config, uint64_t seed);
    /// Same structure, every tensor zero (gradient accumulator).
    EncoderWeights zeros_like() const;

    struct Named {
        std::string name;
        Tensor* tensor;
    };
    std::vector<Named> parameters();
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;

    std::size_t parameter_count() const;
};

struct PairLogit {
    float z0 = 0.0f;  // non-match
    float z1 = 0.0f;  // match
};

struct GroupNormCache {
    Tensor normalized;              // x-hat
    std::vector<float> inv_std;     // per group
};

struct EncoderCache {
    std::vector<Tensor> inputs;       // input of every 4D layer
    std::vector<GroupNormCache> norm;
    std::vector<Tensor> outputs;      // post-ReLU output of every 4D layer
    Tensor pooled;                    // C_last
    Tensor hidden;                    // post-ReLU hidden activations
};

/// 4D blocks (conv -> group norm -> ReLU), global average pool, 2-layer MLP.
PairLogit encoder_forward(const Tensor& volume, const EncoderWeights& w, EncoderCache* cache = nullptr);
PairLogit encoder_forward(const CrossScaleCorrelation& c, const EncoderWeights& w, EncoderCache* cache = nullptr);

/// Accumulates parameter gradients into `grads` and returns the gradient wrt the input volume.
Tensor encoder_backward(const EncoderCache& cache, const EncoderWeights& w, const PairLogit& grad_logit,
                        EncoderWeights& grads);

/// softmax(z)[match], evaluated with max subtraction.
float similarity_from_logit(const PairLogit& z);

/// Reduced query/key pyramids -> cross-scale volume -> logits.
PairLogit score_pair(const FeaturePyramid& reduced_q, const FeaturePyramid& reduced_k, const EncoderWeights& w);

// Weights file: "CVW1", config block, then named tensor records (see encoder4d.cpp).
void save_weights(const std::string& path, const EncoderWeights& w);
EncoderWeights load_weights(const std::string& path);

}  // namespace cvr
