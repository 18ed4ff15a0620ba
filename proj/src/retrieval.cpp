#include "cvr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "cvr/numerics.hpp"

namespace fs = std::filesystem;

namespace cvr {

QuantizedFeatureMap quantize(const Tensor& x) {
    QuantizedFeatureMap q;
    q.shape = x.shape();
    q.codes.assign(x.size(), 0);
    if (x.empty()) return q;
    float lo = x[0];
    float hi = x[0];
    for (float v : x.values()) {
        if (!std::isfinite(v)) throw Error("cannot quantize non-finite values");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    q.zero_point = lo;
    if (hi == lo) {
        q.scale = 1.0f;
        return q;
    }
    q.scale = (hi - lo) / 255.0f;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float code = std::round((x[i] - lo) / q.scale);
        q.codes[i] = static_cast<uint8_t>(std::clamp(code, 0.0f, 255.0f));
    }
    return q;
}

Tensor dequantize(const QuantizedFeatureMap& q) {
    Tensor t(q.shape);
    for (std::size_t i = 0; i < q.codes.size(); ++i) t[i] = static_cast<float>(q.codes[i]) * q.scale + q.zero_point;
    return t;
}

const StoreEntry& FeatureStore::at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error("no store entry for id '" + id + "'");
    return entries_[it->second];
}

void FeatureStore::add(std::string id, const Tensor& descriptor, const FeaturePyramid& reduced) {
    if (contains(id)) throw Error("duplicate store id '" + id + "'");
    if (descriptor.rank() != 1) throw Error("descriptor of '" + id + "' must be a vector");
    if (!entries_.empty()) {
        if (descriptor.dim(0) != descriptor_dim())
            throw Error("descriptor of '" + id + "' has dimension " + std::to_string(descriptor.dim(0)) + ", store has " +
                        std::to_string(descriptor_dim()));
        if (reduced.size() != level_count())
            throw Error("pyramid of '" + id + "' has " + std::to_string(reduced.size()) + " levels, store has " +
                        std::to_string(level_count()));
    }
    auto norm = l2_normalize(descriptor);
    if (norm.degenerate) throw Error("descriptor of '" + id + "' has zero norm");
    StoreEntry e{id, std::move(norm.value), {}, {}};
    for (const auto& l : reduced.levels) {
        if (quantized_)
            e.quantized.push_back(quantize(l));
        else
            e.levels.push_back(l);
    }
    index_.emplace(e.id, entries_.size());
    entries_.push_back(std::move(e));
}

FeaturePyramid FeatureStore::pyramid(const std::string& id) const {
    const auto& e = at(id);
    FeaturePyramid p;
    const std::size_t n = quantized_ ? e.quantized.size() : e.levels.size();
    for (std::size_t s = 0; s < n; ++s) {
        p.levels.push_back(quantized_ ? dequantize(e.quantized[s]) : e.levels[s]);
        p.scales.push_back(std::pow(M_SQRT1_2, static_cast<double>(s)));
    }
    return p;
}

std::size_t FeatureStore::level_count() const {
    if (entries_.empty()) return 0;
    return quantized_ ? entries_.front().quantized.size() : entries_.front().levels.size();
}

std::size_t FeatureStore::pyramid_payload_bytes() const {
    std::size_t bytes = 0;
    for (const auto& e : entries_) {
        for (const auto& q : e.quantized) bytes += q.codes.size();
        for (const auto& l : e.levels) bytes += l.size() * sizeof(float);
    }
    return bytes;
}

void FeatureStore::save(const std::string& dir) const {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "store.manifest");
    std::ofstream payload(fs::path(dir) / "store.payload", std::ios::binary);
    if (!manifest || !payload) throw Error("cannot write store in " + dir);
    manifest << "cvstore 1\n"
             << "dtype " << (quantized_ ? "u8" : "f32") << '\n'
             << "count " << entries_.size() << '\n'
             << "levels " << level_count() << '\n'
             << "descriptor_dim " << descriptor_dim() << '\n';
    for (const auto& e : entries_) {
        manifest << e.id << '\n';
        write_tensor(payload, e.descriptor);
        for (const auto& q : e.quantized) write_tensor(payload, q);
        for (const auto& l : e.levels) write_tensor(payload, l);
    }
    if (!manifest || !payload) throw Error("failed writing store in " + dir);
}

FeatureStore FeatureStore::load(const std::string& dir) {
    const auto manifest_path = (fs::path(dir) / "store.manifest").string();
    const auto payload_path = (fs::path(dir) / "store.payload").string();
    std::ifstream manifest(manifest_path);
    std::ifstream payload(payload_path, std::ios::binary);
    if (!manifest) throw Error("cannot open " + manifest_path);
    if (!payload) throw Error("cannot open " + payload_path);
    auto expect = [&](const std::string& key) {
        std::string k;
        std::string v;
        if (!(manifest >> k >> v) || k != key) throw Error(manifest_path + ": malformed header, expected '" + key + "'");
        return v;
    };
    if (expect("cvstore") != "1") throw Error(manifest_path + ": unsupported store version");
    const std::string dtype = expect("dtype");
    if (dtype != "u8" && dtype != "f32") throw Error(manifest_path + ": unknown dtype " + dtype);
    const auto count = std::stoull(expect("count"));
    const auto levels = std::stoull(expect("levels"));
    const auto dim = std::stoll(expect("descriptor_dim"));
    FeatureStore store(dtype == "u8");
    for (std::size_t i = 0; i < count; ++i) {
        StoreEntry e;
        if (!(manifest >> e.id)) throw Error(manifest_path + ": manifest lists fewer ids than its count");
        try {
            e.descriptor = read_tensor(payload);
            if (e.descriptor.rank() != 1 || e.descriptor.dim(0) != dim)
                throw Error("descriptor of '" + e.id + "' does not match descriptor_dim");
            for (std::size_t s = 0; s < levels; ++s) {
                if (store.quantized_)
                    e.quantized.push_back(read_quantized(payload));
                else
                    e.levels.push_back(read_tensor(payload));
            }
        } catch (const Error& err) {
            throw Error(payload_path + ": " + err.what());
        }
        if (store.contains(e.id)) throw Error(manifest_path + ": duplicate id '" + e.id + "'");
        store.index_.emplace(e.id, store.entries_.size());
        store.entries_.push_back(std::move(e));
    }
    if (payload.peek() != std::char_traits<char>::eof()) throw Error(payload_path + ": trailing bytes after last entry");
    return store;
}

void ingest(const std::string& manifest_path, const EncoderWeights& w, FeatureStore& store) {
    std::ifstream is(manifest_path);
    if (!is) throw Error("cannot open manifest " + manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    auto resolve = [&base](const std::string& p) {
        fs::path path(p);
        return (path.is_absolute() ? path : base / path).string();
    };
    std::optional<int64_t> channels;
    std::optional<int64_t> desc_dim;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string first;
        if (!(ls >> first) || first[0] == '#') continue;
        const std::string where = manifest_path + ":" + std::to_string(lineno);
        if (first == "dims") {
            int64_t c = 0;
            int64_t d = 0;
            if (!(ls >> c >> d)) throw Error(where + ": malformed dims directive");
            channels = c;
            desc_dim = d;
            continue;
        }
        std::string feature_file;
        std::string descriptor_file;
        if (!(ls >> feature_file >> descriptor_file)) throw Error(where + ": expected 'id feature descriptor'");
        feature_file = resolve(feature_file);
        descriptor_file = resolve(descriptor_file);
        Tensor feat = load_tensor(feature_file);
        Tensor desc = load_tensor(descriptor_file);
        if (feat.rank() != 3) throw Error(feature_file + ": feature map must be C x H x W");
        if (desc.rank() != 1) throw Error(descriptor_file + ": descriptor must be a vector");
        if (!channels) channels = feat.dim(0);
        if (!desc_dim) desc_dim = desc.dim(0);
        if (feat.dim(0) != *channels)
            throw Error(feature_file + ": " + std::to_string(feat.dim(0)) + " channels, manifest expects " +
                        std::to_string(*channels));
        if (desc.dim(0) != *desc_dim)
            throw Error(descriptor_file + ": descriptor dimension " + std::to_string(desc.dim(0)) +
                        ", manifest expects " + std::to_string(*desc_dim));
        FeaturePyramid reduced;
        try {
            reduced = reduce_scalewise(build_pyramid(FeatureMap(std::move(feat)), w.config.num_scales), w.reducer);
        } catch (const Error& e) {
            throw Error(feature_file + ": " + e.what());
        }
        store.add(first, desc, reduced);
    }
}

RankedList global_rank(const std::string& query_id, const Tensor& query_descriptor, const FeatureStore& store) {
    if (store.size() == 0) throw Error("store is empty");
    if (query_descriptor.rank() != 1 || query_descriptor.dim(0) != store.descriptor_dim())
        throw Error("query descriptor dimension " + shape_str(query_descriptor.shape()) + " does not match store (" +
                    std::to_string(store.descriptor_dim()) + ")");
    RankedList out{query_id, {}};
    out.entries.reserve(store.size());
    for (const auto& e : store.entries()) {
        const float s = dot(query_descriptor.values(), e.descriptor.values());
        out.entries.push_back({e.id, s, std::nullopt, s});
    }
    std::sort(out.entries.begin(), out.entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
        return a.s_g != b.s_g ? a.s_g > b.s_g : a.id < b.id;
    });
    return out;
}

RankedList rerank_topk(const FeaturePyramid& query_reduced, const RankedList& ranked, std::size_t k,
                       const EncoderWeights& w, float alpha, const FeatureStore& store, int workers) {
    RankedList out = ranked;
    k = std::min(k, out.entries.size());
    for (std::size_t i = 0; i < k; ++i)
        if (!store.contains(out.entries[i].id))
            throw Error("missing pyramid for candidate '" + out.entries[i].id + "'");

    std::vector<float> scores(k, 0.0f);
    auto score_range = [&](std::size_t first, std::size_t stride) {
        for (std::size_t i = first; i < k; i += stride)
            scores[i] = similarity_from_logit(score_pair(query_reduced, store.pyramid(out.entries[i].id), w));
    };
    const auto n_workers = static_cast<std::size_t>(std::max(1, workers));
    if (n_workers == 1 || k < 2) {
        score_range(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(score_range, t, n_workers);
    }

    for (std::size_t i = 0; i < k; ++i) {
        auto& e = out.entries[i];
        e.s_r = scores[i];
        e.s_fused = e.s_g + alpha * scores[i];
    }
    std::stable_sort(out.entries.begin(), out.entries.begin() + static_cast<std::ptrdiff_t>(k),
                     [](const RankedEntry& a, const RankedEntry& b) { return a.s_fused > b.s_fused; });
    return out;
}

double average_precision(const RankedList& ranking, const std::set<std::string>& relevant,
                         std::optional<std::size_t> cutoff) {
    if (relevant.empty()) throw Error("query '" + ranking.query_id + "' has an empty relevance set");
    const std::size_t limit = cutoff ? std::min(*cutoff, ranking.entries.size()) : ranking.entries.size();
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < limit; ++i) {
        if (relevant.count(ranking.entries[i].id)) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    const std::size_t denom = cutoff ? std::min(relevant.size(), *cutoff) : relevant.size();
    return sum / static_cast<double>(denom);
}

double eval_map(const std::vector<RankedList>& rankings, const Relevance& relevance,
                std::optional<std::size_t> cutoff) {
    if (rankings.empty()) throw Error("no rankings to evaluate");
    double total = 0.0;
    for (const auto& r : rankings) {
        auto it = relevance.find(r.query_id);
        if (it == relevance.end() || it->second.empty())
            throw Error("query '" + r.query_id + "' has an empty relevance set");
        total += average_precision(r, it->second, cutoff);
    }
    return total / static_cast<double>(rankings.size());
}

void write_ranks_csv(std::ostream& os, const std::vector<RankedList>& lists, std::size_t top) {
    os << "rank,id,s_g,s_r,s_fused\n" << std::fixed << std::setprecision(6);
    for (const auto& l : lists) {
        os << "# query=" << l.query_id << '\n';
        const std::size_t n = top ? std::min(top, l.entries.size()) : l.entries.size();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& e = l.entries[i];
            os << (i + 1) << ',' << e.id << ',' << e.s_g << ',';
            if (e.s_r) os << *e.s_r;
            os << ',' << e.s_fused << '\n';
        }
    }
}

std::vector<RankedList> read_ranks_csv(std::istream& is) {
    std::vector<RankedList> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.rfind("rank,", 0) == 0) continue;
        if (line.rfind("# query=", 0) == 0) {
            out.push_back({line.substr(8), {}});
            continue;
        }
        if (line[0] == '#') continue;
        std::vector<std::string> cols;
        std::string col;
        std::istringstream ls(line);
        while (std::getline(ls, col, ',')) cols.push_back(col);
        if (line.back() == ',') cols.emplace_back();
        if (cols.size() != 5) throw Error("ranks.csv line " + std::to_string(lineno) + ": expected 5 columns");
        if (out.empty()) out.push_back({"", {}});
        RankedEntry e;
        e.id = cols[1];
        try {
            e.s_g = std::stof(cols[2]);
            if (!cols[3].empty()) e.s_r = std::stof(cols[3]);
            e.s_fused = std::stof(cols[4]);
        } catch (const std::exception&) {
            throw Error("ranks.csv line " + std::to_string(lineno) + ": bad number");
        }
        out.back().entries.push_back(std::move(e));
    }
    return out;
}

Relevance read_truth_csv(std::istream& is) {
    Relevance rel;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#' || line == "query_id,relevant_id") continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw Error("truth.csv line " + std::to_string(lineno) + ": expected 2 columns");
        rel[line.substr(0, comma)].insert(line.substr(comma + 1));
    }
    return rel;
}

}  // namespace cvr
