#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "cvr/correlation.hpp"
#include "cvr/encoder4d.hpp"
#include "cvr/tensor.hpp"

namespace cvr {

using QuantizedFeatureMap = QuantizedTensor;

/// Per-tensor affine uint8 quantization: scale = (max - min) / 255, zero_point = min.
/// Constant tensors get scale 1 and all-zero codes.
QuantizedFeatureMap quantize(const Tensor& x);
Tensor dequantize(const QuantizedFeatureMap& q);

struct StoreEntry {
    std::string id;
    Tensor descriptor;                     // unit-norm, kept in float32
    std::vector<QuantizedFeatureMap> quantized;  // reduced pyramid levels (quantized stores)
    std::vector<Tensor> levels;            // reduced pyramid levels (float stores)
};

/// Global descriptors plus reduced feature pyramids, keyed by image id.
class FeatureStore {
public:
    explicit FeatureStore(bool quantized = true) : quantized_(quantized) {}

    bool quantized() const { return quantized_; }
    std::size_t size() const { return entries_.size(); }
    const std::vector<StoreEntry>& entries() const { return entries_; }
    const StoreEntry& at(const std::string& id) const;
    bool contains(const std::string& id) const { return index_.count(id) != 0; }

    /// Normalizes the descriptor; levels are quantized when the store is.
    void add(std::string id, const Tensor& descriptor, const FeaturePyramid& reduced);

    /// Dequantized (or copied) reduced pyramid of an entry.
    FeaturePyramid pyramid(const std::string& id) const;

    int64_t descriptor_dim() const { return entries_.empty() ? 0 : entries_.front().descriptor.dim(0); }
    std::size_t level_count() const;
    /// Bytes of pyramid payload (codes or float32 values), excluding headers.
    std::size_t pyramid_payload_bytes() const;

    /// Directory layout: store.manifest (text) and store.payload (tensor records).
    void save(const std::string& dir) const;
    static FeatureStore load(const std::string& dir);

private:
    bool quantized_;
    std::vector<StoreEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Reads an id manifest of backbone dumps (`id feature.cvt descriptor.cvt` per
/// line, optional `dims <channels> <descriptor_dim>` directive), builds and
/// reduces pyramids with the reducers in `w`, and adds every entry to `store`.
void ingest(const std::string& manifest_path, const EncoderWeights& w, FeatureStore& store);

struct RankedEntry {
    std::string id;
    float s_g = 0.0f;
    std::optional<float> s_r;
    float s_fused = 0.0f;
};

struct RankedList {
    std::string query_id;
    std::vector<RankedEntry> entries;
};

/// Every store entry by descending descriptor dot product, ties by ascending id.
RankedList global_rank(const std::string& query_id, const Tensor& query_descriptor, const FeatureStore& store);

/// Scores the first k candidates with the verification model, fuses s_g + alpha * s_r,
/// and re-sorts only that prefix. `workers` > 1 fans candidate scoring out over threads.
RankedList rerank_topk(const FeaturePyramid& query_reduced, const RankedList& ranked, std::size_t k,
                       const EncoderWeights& w, float alpha, const FeatureStore& store, int workers = 1);

using Relevance = std::map<std::string, std::set<std::string>>;

/// AP per query: sum of precision at each relevant hit (within cutoff) divided by
/// min(#relevant, cutoff); mAP is the mean over the given rankings.
double average_precision(const RankedList& ranking, const std::set<std::string>& relevant,
                         std::optional<std::size_t> cutoff = std::nullopt);
double eval_map(const std::vector<RankedList>& rankings, const Relevance& relevance,
                std::optional<std::size_t> cutoff = std::nullopt);

// ranks.csv: header `rank,id,s_g,s_r,s_fused`; each query's block is preceded by
// a `# query=<id>` line. Numbers carry 6 decimals; s_r is empty outside the prefix.
void write_ranks_csv(std::ostream& os, const std::vector<RankedList>& lists, std::size_t top = 0);
std::vector<RankedList> read_ranks_csv(std::istream& is);
/// truth.csv: `query_id,relevant_id` rows (an optional header with those names is skipped).
Relevance read_truth_csv(std::istream& is);

}  // namespace cvr
