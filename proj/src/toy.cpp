#include "cvr/toy.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "cvr/numerics.hpp"
#include "cvr/objectives.hpp"

namespace cvr {

namespace {

struct ClassPattern {
    Tensor patch;  // C x P x P
    int family = 0;
};

std::vector<ClassPattern> make_patterns(const ToyConfig& cfg, std::mt19937_64& rng) {
    if (cfg.num_classes < 2 || cfg.family_size < 1) throw Error("toy config: need >= 2 classes");
    if (cfg.pattern_size < 2 || cfg.pattern_size > std::min(cfg.height, cfg.width))
        throw Error("toy config: pattern must fit inside the map");
    const int p = cfg.pattern_size;
    const int cells = p * p;
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<ClassPattern> out;
    std::vector<Tensor> bag;
    for (int cls = 0; cls < cfg.num_classes; ++cls) {
        const int member = cls % cfg.family_size;
        if (member == 0) {
            bag.clear();
            for (int i = 0; i < cells; ++i) {
                Tensor v({cfg.channels});
                for (auto& x : v.values()) x = std::max(0.0f, normal(rng) - cfg.threshold);
                bag.push_back(std::move(v));
            }
        }
        std::vector<int> layout(static_cast<std::size_t>(cells));
        std::iota(layout.begin(), layout.end(), 0);
        if (member != 0) std::shuffle(layout.begin(), layout.end(), rng);
        ClassPattern cp{Tensor({cfg.channels, p, p}), cls / cfg.family_size};
        for (int cell = 0; cell < cells; ++cell) {
            const auto& v = bag[static_cast<std::size_t>(layout[static_cast<std::size_t>(cell)])];
            for (int ch = 0; ch < cfg.channels; ++ch)
                cp.patch[static_cast<std::size_t>(ch * cells + cell)] = v[static_cast<std::size_t>(ch)];
        }
        out.push_back(std::move(cp));
    }
    return out;
}

Tensor render(const ToyConfig& cfg, const ClassPattern& cls, std::mt19937_64& rng) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    Tensor map({cfg.channels, cfg.height, cfg.width});
    for (auto& x : map.values()) x = cfg.background * std::max(0.0f, normal(rng) - cfg.threshold);

    Tensor patch = cls.patch;
    if (unit(rng) < cfg.scale_prob) patch = resize_bilinear(patch, cfg.pattern_size - 1, cfg.pattern_size - 1);
    const int64_t ph = patch.dim(1);
    const int64_t pw = patch.dim(2);
    std::uniform_int_distribution<int64_t> oy_dist(0, cfg.height - ph);
    std::uniform_int_distribution<int64_t> ox_dist(0, cfg.width - pw);
    const int64_t oy = oy_dist(rng);
    const int64_t ox = ox_dist(rng);
    const int64_t plane = static_cast<int64_t>(cfg.height) * cfg.width;
    for (int64_t ch = 0; ch < cfg.channels; ++ch)
        for (int64_t y = 0; y < ph; ++y)
            for (int64_t x = 0; x < pw; ++x) {
                const float v = patch[static_cast<std::size_t>((ch * ph + y) * pw + x)] + cfg.noise * normal(rng);
                map[static_cast<std::size_t>(ch * plane + (oy + y) * cfg.width + ox + x)] = std::max(0.0f, v);
            }
    return map;
}

void append(ToyDataset& ds, Tensor map, const ClassPattern& cls, int label, const GlobalHead& head) {
    ds.descriptors.push_back(head.forward(map));
    ds.maps.push_back(std::move(map));
    ds.labels.push_back(label);
    ds.family.push_back(cls.family);
}

}  // namespace

ToyDataset make_toy_dataset(const ToyConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    const auto patterns = make_patterns(cfg, rng);
    const auto head = GlobalHead::init(cfg.channels, cfg.channels, 0);
    ToyDataset ds;
    for (int cls = 0; cls < cfg.num_classes; ++cls)
        for (int i = 0; i < cfg.samples_per_class; ++i)
            append(ds, render(cfg, patterns[static_cast<std::size_t>(cls)], rng), patterns[static_cast<std::size_t>(cls)],
                   cls, head);
    return ds;
}

ToySplit make_toy_split(const ToyConfig& cfg, int held_out_per_class) {
    if (held_out_per_class < 1) throw Error("toy split: held-out count must be >= 1");
    std::mt19937_64 rng(cfg.seed);
    const auto patterns = make_patterns(cfg, rng);
    const auto head = GlobalHead::init(cfg.channels, cfg.channels, 0);
    ToySplit split;
    for (int cls = 0; cls < cfg.num_classes; ++cls)
        for (int i = 0; i < cfg.samples_per_class; ++i)
            append(split.train, render(cfg, patterns[static_cast<std::size_t>(cls)], rng),
                   patterns[static_cast<std::size_t>(cls)], cls, head);
    for (int cls = 0; cls < cfg.num_classes; ++cls)
        for (int i = 0; i < held_out_per_class; ++i)
            append(split.held_out, render(cfg, patterns[static_cast<std::size_t>(cls)], rng),
                   patterns[static_cast<std::size_t>(cls)], cls, head);
    return split;
}

ToyCorpus make_toy_corpus(const ToyConfig& cfg, int num_queries) {
    if (num_queries < 1 || num_queries > cfg.num_classes) throw Error("toy corpus: query count must be in [1, classes]");
    std::mt19937_64 rng(cfg.seed);
    const auto patterns = make_patterns(cfg, rng);
    const auto head = GlobalHead::init(cfg.channels, cfg.channels, 0);
    ToyCorpus corpus;
    for (int cls = 0; cls < cfg.num_classes; ++cls)
        for (int i = 0; i < cfg.samples_per_class; ++i)
            append(corpus.database, render(cfg, patterns[static_cast<std::size_t>(cls)], rng),
                   patterns[static_cast<std::size_t>(cls)], cls, head);
    // Spread queries over classes so every family can contribute one.
    for (int q = 0; q < num_queries; ++q) {
        const int cls = static_cast<int>((static_cast<int64_t>(q) * cfg.num_classes) / num_queries);
        append(corpus.queries, render(cfg, patterns[static_cast<std::size_t>(cls)], rng),
               patterns[static_cast<std::size_t>(cls)], cls, head);
    }
    return corpus;
}

}  // namespace cvr
