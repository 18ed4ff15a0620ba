#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>

#include "cvr/encoder4d.hpp"
#include "cvr/numerics.hpp"
#include "cvr/tensor.hpp"

namespace cvr {

/// Adaptive CurricularFace margin state. The classification and contrastive
/// objectives each own one and commit their statistics independently.
struct MarginState {
    float t = 0.0f;          // moving average of positive cosine similarities
    float momentum = 0.99f;
    float margin = 0.15f;
    float inv_tau = 30.0f;   // logit scale 1 / tau
};

/// Margined logit (before the 1/tau scale). Target entries get cos(theta + m);
/// a negative is left unchanged when the margined target still beats it, and is
/// re-weighted to cos * (t + cos) otherwise.
float curricular_margin(float cos_theta, bool is_target, const MarginState& st, float margined_target = 0.0f);
/// d curricular_margin / d cos_theta with t and the branch selection held fixed.
float curricular_margin_grad(float cos_theta, bool is_target, const MarginState& st, float margined_target = 0.0f);
/// t <- momentum * t + (1 - momentum) * batch_mean_positive_cos, clamped to [0, 1].
void commit_margin(MarginState& st, float batch_mean_positive_cos);

struct QueueEntry {
    Tensor descriptor;
    int label = 0;
};

struct DescriptorBank {
    Tensor class_weights;  // N x C_g, rows unit-norm
    std::deque<QueueEntry> queue;
    std::size_t capacity = 0;
    float eta = 0.999f;

    DescriptorBank() = default;
    DescriptorBank(Tensor class_weights, std::size_t capacity);
    void normalize_class_weights();
};

/// Newest entry in, oldest out once the queue holds `capacity` entries.
void queue_update(DescriptorBank& bank, const Tensor& d_momentum, int label);

struct LossValue {
    double value = 0.0;
    std::map<std::string, Tensor> grads;
};

/// Margined softmax cross-entropy over the class weights; grads "dq" and "W".
LossValue classification_loss(const Tensor& dq, const DescriptorBank& bank, int target, const MarginState& st);

/// Momentum contrastive loss over the queue; each in-queue positive is scored
/// against itself plus all in-queue negatives. Grad "dq" only.
LossValue contrastive_loss(const Tensor& dq, const DescriptorBank& bank, int query_label, const MarginState& st);

/// lambda_cls * L_cls + lambda_con * L_con, gradients merged by name.
LossValue global_total_loss(const LossValue& cls, const LossValue& con, std::pair<double, double> lambdas = {0.5, 0.5});

/// CE(softmax(z), match indicator); grad "z" as a 2-vector (z0, z1).
LossValue rerank_pair_loss(const PairLogit& z, bool is_match);

/// Mean of the four directional pair losses; grads "z_qp", "z_pq", "z_qn", "z_nq".
LossValue rerank_total_loss(const PairLogit& z_qp, const PairLogit& z_pq, const PairLogit& z_qn, const PairLogit& z_nq);

inline PairLogit logit_grad(const LossValue& l, const std::string& name) {
    const auto& g = l.grads.at(name);
    return {g[0], g[1]};
}

/// Global descriptor head over a backbone map: GeM pooling with a learnable
/// power, whitening FC layer, L2 normalization.
struct GlobalHead {
    float gem_power = 3.0f;
    Tensor whiten_weight;  // C_g x C
    Tensor whiten_bias;    // C_g

    /// Identity whitening when out_dim == in_dim, otherwise He-normal.
    static GlobalHead init(int64_t in_dim, int64_t out_dim, uint64_t seed);

    struct Cache {
        Tensor input;
        Tensor pooled;
        Normalized out;
    };
    Tensor forward(const Tensor& feature_map, Cache* cache = nullptr) const;

    struct Grads {
        float gem_power = 0.0f;
        Tensor whiten_weight;
        Tensor whiten_bias;
    };
    Grads backward(const Cache& cache, const Tensor& grad_descriptor) const;

    /// theta_bar <- eta * theta_bar + (1 - eta) * theta.
    void momentum_update(const GlobalHead& online, float eta);
};

}  // namespace cvr
