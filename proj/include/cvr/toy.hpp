#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvr/tensor.hpp"

namespace cvr {

/// Planted-pattern feature maps. Classes come in families that share one bag of
/// local feature vectors; each class arranges the bag in its own spatial layout.
/// Siblings therefore have near-identical pooled descriptors but disagree
/// geometrically, which is what makes them hard negatives.
struct ToyConfig {
    int num_classes = 16;
    int samples_per_class = 8;
    int family_size = 2;
    int channels = 32;
    int height = 8;
    int width = 8;
    int pattern_size = 6;
    float threshold = 1.0f;     // vectors are max(0, N(0,1) - threshold); higher is sparser
    float background = 0.35f;   // amplitude of per-image clutter
    float noise = 0.15f;        // per-instance perturbation of the planted vectors
    float scale_prob = 0.25f;   // chance of rendering the pattern one pixel smaller
    uint64_t seed = 1;
};

struct ToyDataset {
    std::vector<Tensor> maps;         // C x H x W, non-negative
    std::vector<int> labels;
    std::vector<Tensor> descriptors;  // unit-norm global descriptors
    std::vector<int> family;          // family index per sample

    std::size_t size() const { return maps.size(); }
};

ToyDataset make_toy_dataset(const ToyConfig& cfg);

/// Training set plus fresh renders of the same classes for held-out evaluation.
struct ToySplit {
    ToyDataset train;
    ToyDataset held_out;
};
ToySplit make_toy_split(const ToyConfig& cfg, int held_out_per_class);

/// Retrieval benchmark: a database plus one extra query image for `num_queries` classes.
struct ToyCorpus {
    ToyDataset database;
    ToyDataset queries;
};
ToyCorpus make_toy_corpus(const ToyConfig& cfg, int num_queries);

inline std::string toy_id(const std::string& prefix, std::size_t index) {
    std::string digits = std::to_string(index);
    return prefix + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

}  // namespace cvr
