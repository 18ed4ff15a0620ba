#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cvr/encoder4d.hpp"
#include "cvr/objectives.hpp"
#include "cvr/toy.hpp"

namespace cvr {

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Curriculum
// ---------------------------------------------------------------------------

struct CurriculumSchedule {
    double r_h_start = 0.2;
    double r_h_end = 1.0;
    double p_has_start = 0.0;
    double p_has_end = 0.2;
    int64_t total_steps = 1;

    void validate() const;
};

struct CurriculumPoint {
    double r_h = 0.0;
    double p_has = 0.0;
    bool clamped = false;  // step was outside [0, total_steps]
};

/// Linear ramp of the hard-negative rate and Hide-and-Seek probability.
CurriculumPoint schedule_at(const CurriculumSchedule& sch, int64_t step);

// ---------------------------------------------------------------------------
// Hard negatives and sampling
// ---------------------------------------------------------------------------

constexpr std::size_t kHardNegatives = 10;

struct LabeledDescriptor {
    int64_t id = 0;
    int label = 0;
    const Tensor* descriptor = nullptr;
};

/// Per sample: ids of the (up to) ten most similar differently-labelled samples,
/// by descending cosine, ties broken by ascending id. Lists follow input order.
std::vector<std::vector<int64_t>> mine_hard_negatives(std::span<const LabeledDescriptor> samples);

/// Zeroes whole spatial positions (all channels) independently with probability p_has.
Tensor hide_and_seek(const Tensor& f, double p_has, Rng& rng);

struct Triplet {
    std::size_t query = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
    bool hard = false;  // negative came from the mined list
};

/// Indices into `labels`; `hard_negatives` holds indices too (as produced by
/// mine_hard_negatives with id == index).
Triplet sample_triplet(std::span<const int> labels, const std::vector<std::vector<int64_t>>& hard_negatives,
                       double r_h, Rng& rng);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct SgdState {
    std::vector<Tensor> velocity;
};

/// v <- momentum * v + g; theta <- theta - lr * v. Throws "divergence" on non-finite gradients.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, SgdState& state, double lr,
              double momentum = 0.9);
void sgd_step(EncoderWeights& w, const EncoderWeights& grads, SgdState& state, double lr, double momentum = 0.9);

/// lr * 0.5 * (1 + cos(pi * step / steps)).
double cosine_lr(double lr, int64_t step, int64_t steps);

// ---------------------------------------------------------------------------
// Re-ranking model training on toy data
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 0.02;
    double momentum = 0.9;
    int batch_size = 1;
    uint64_t seed = 1;
    int64_t steps = 2000;

    void validate() const;
};

struct CurvePoint {
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double r_h = 0.0;
    double p_has = 0.0;
};

struct PairGradients {
    double loss = 0.0;
    PairLogit z_qp, z_pq, z_qn, z_nq;
};

/// Forward and backward of the symmetric four-pair loss for one triplet of raw
/// maps; parameter gradients are accumulated into `grads`.
PairGradients triplet_loss_and_grad(const Tensor& q, const Tensor& p, const Tensor& n, const EncoderWeights& w,
                                    EncoderWeights& grads);

/// Verification score s_r for a pair of raw feature maps.
float verify_pair(const Tensor& q, const Tensor& k, const EncoderWeights& w);

struct TrainResult {
    EncoderWeights weights;
    std::vector<CurvePoint> curve;
};

TrainResult train_rerank_toy(const ToyDataset& data, const TrainConfig& cfg, const CurriculumSchedule& sch,
                             const EncoderConfig& encoder);

struct PairEvaluation {
    double accuracy = 0.0;       // positives, hard negatives and random negatives
    double hard_accuracy = 0.0;  // hard negatives only
    double positive_accuracy = 0.0;
    double random_accuracy = 0.0;
    double mean_loss = 0.0;      // symmetric loss over (positive, hard negative) triplets
    std::size_t pairs = 0;
};

/// Per anchor: one positive, its top mined negative, and one random negative.
PairEvaluation evaluate_pairs(const ToyDataset& data, const EncoderWeights& w, uint64_t seed);

void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& curve);

// ---------------------------------------------------------------------------
// Line-oriented `key = value` configuration for train-toy.
// ---------------------------------------------------------------------------

struct ToyTrainSettings {
    TrainConfig train;
    CurriculumSchedule schedule;  // total_steps follows train.steps
    EncoderConfig encoder;
    ToyConfig data;
};

/// Defaults sized for desk-scale runs (small encoder, 8x8 maps).
ToyTrainSettings default_toy_settings();
ToyTrainSettings parse_train_config(std::istream& is, const std::string& origin = "<config>");

}  // namespace cvr
