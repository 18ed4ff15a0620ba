#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cvr/retrieval.hpp"
#include "cvr/toy.hpp"
#include "cvr/training.hpp"

namespace fs = std::filesystem;
using namespace cvr;

namespace {

// A query argument names a file of ids (one per line) when such a file exists,
// otherwise it is taken as a single literal id.
std::vector<std::string> read_query_ids(const std::string& arg) {
    if (!fs::is_regular_file(arg)) return {arg};
    std::ifstream is(arg);
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(is, line)) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos || line[b] == '#') continue;
        const auto e = line.find_last_not_of(" \t\r");
        ids.push_back(line.substr(b, e - b + 1));
    }
    if (ids.empty()) throw Error(arg + ": no query ids");
    return ids;
}

std::ofstream open_out(const std::string& path) {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    return os;
}

// Channel count of the first feature dump listed in an ingest manifest.
int64_t manifest_channels(const std::string& manifest) {
    std::ifstream is(manifest);
    if (!is) throw Error("cannot open manifest " + manifest);
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string first;
        std::string feat;
        if (!(ls >> first) || first[0] == '#') continue;
        if (first == "dims") {
            int64_t c = 0;
            if (ls >> c) return c;
            continue;
        }
        if (!(ls >> feat)) break;
        fs::path p(feat);
        if (!p.is_absolute()) p = fs::path(manifest).parent_path() / p;
        return load_tensor(p.string()).dim(0);
    }
    throw Error(manifest + ": no entries");
}

void write_toy_split(const ToyDataset& ds, const std::string& prefix, const fs::path& dir, std::ostream& manifest,
                     std::vector<std::string>& ids) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string id = toy_id(prefix, i);
        save_tensor((dir / "feats" / (id + ".feat.cvt")).string(), ds.maps[i]);
        save_tensor((dir / "feats" / (id + ".desc.cvt")).string(), ds.descriptors[i]);
        manifest << id << " feats/" << id << ".feat.cvt feats/" << id << ".desc.cvt\n";
        ids.push_back(id);
    }
}

int cmd_make_toy(const ToyConfig& cfg, int queries, const std::string& out) {
    const fs::path dir(out);
    fs::create_directories(dir / "feats");
    const auto corpus = make_toy_corpus(cfg, queries);
    std::vector<std::string> db_ids;
    std::vector<std::string> q_ids;
    {
        auto m = open_out((dir / "database.txt").string());
        write_toy_split(corpus.database, "db", dir, m, db_ids);
        auto q = open_out((dir / "queries.txt").string());
        write_toy_split(corpus.queries, "q", dir, q, q_ids);
    }
    auto ids = open_out((dir / "query_ids.txt").string());
    for (const auto& id : q_ids) ids << id << '\n';
    auto truth = open_out((dir / "truth.csv").string());
    truth << "query_id,relevant_id\n";
    for (std::size_t q = 0; q < q_ids.size(); ++q)
        for (std::size_t d = 0; d < db_ids.size(); ++d)
            if (corpus.database.labels[d] == corpus.queries.labels[q]) truth << q_ids[q] << ',' << db_ids[d] << '\n';
    std::cout << "wrote " << db_ids.size() << " database and " << q_ids.size() << " query images to " << out << '\n';
    return 0;
}

int cmd_train_toy(const std::string& config, const std::string& out, const std::string& curve_path, int held_out) {
    std::ifstream is(config);
    if (!is) throw Error("cannot open config " + config);
    const auto s = parse_train_config(is, config);
    const auto split = make_toy_split(s.data, held_out);
    const auto result = train_rerank_toy(split.train, s.train, s.schedule, s.encoder);
    save_weights(out, result.weights);
    if (curve_path.empty()) {
        write_curve_csv(std::cout, result.curve);
    } else {
        auto os = open_out(curve_path);
        write_curve_csv(os, result.curve);
    }
    const auto ev = evaluate_pairs(split.held_out, result.weights, s.train.seed);
    std::cerr << std::fixed << std::setprecision(6) << "held-out pair accuracy " << ev.accuracy << " (hard negatives "
              << ev.hard_accuracy << ", " << ev.pairs << " pairs)\n";
    return 0;
}

EncoderWeights ingest_weights(const std::string& weights, const std::string& manifest) {
    if (!weights.empty()) return load_weights(weights);
    // Without trained weights, fall back to the seeded initial reducers.
    auto s = default_toy_settings();
    s.encoder.in_channels = static_cast<int>(manifest_channels(manifest));
    return EncoderWeights::init(s.encoder, s.train.seed);
}

int cmd_ingest(const std::string& manifest, const std::string& out, const std::string& weights, bool float_store) {
    const auto w = ingest_weights(weights, manifest);
    FeatureStore store(!float_store);
    ingest(manifest, w, store);
    store.save(out);
    std::cout << "ingested " << store.size() << " entries into " << out << " (" << store.pyramid_payload_bytes()
              << " payload bytes)\n";
    return 0;
}

int cmd_rank(const std::string& query, const std::string& store_dir, const std::string& query_store_dir,
             std::size_t top, const std::string& out, const std::optional<std::string>& weights, std::size_t k,
             float alpha, int workers) {
    const auto store = FeatureStore::load(store_dir);
    std::optional<FeatureStore> own_queries;
    if (!query_store_dir.empty()) own_queries = FeatureStore::load(query_store_dir);
    const FeatureStore& queries = own_queries ? *own_queries : store;
    std::optional<EncoderWeights> w;
    if (weights) w = load_weights(*weights);

    std::vector<RankedList> lists;
    for (const auto& id : read_query_ids(query)) {
        auto ranked = global_rank(id, queries.at(id).descriptor, store);
        if (w) ranked = rerank_topk(queries.pyramid(id), ranked, k, *w, alpha, store, workers);
        lists.push_back(std::move(ranked));
    }
    auto os = open_out(out);
    write_ranks_csv(os, lists, top);
    return 0;
}

int cmd_eval(const std::string& ranks, const std::string& truth, std::optional<std::size_t> cutoff) {
    std::ifstream rs(ranks);
    if (!rs) throw Error("cannot open " + ranks);
    std::ifstream ts(truth);
    if (!ts) throw Error("cannot open " + truth);
    const auto lists = read_ranks_csv(rs);
    const auto rel = read_truth_csv(ts);
    const double map = eval_map(lists, rel, cutoff);
    std::cout << std::fixed << std::setprecision(6) << (cutoff ? "mAP@" + std::to_string(*cutoff) : std::string("mAP"))
              << ' ' << map << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Correlation-verification re-ranking toolkit"};
    app.require_subcommand(1);

    ToyConfig toy;
    int toy_queries = 20;
    std::string toy_out;
    auto* make_toy = app.add_subcommand("make-toy", "Generate a planted-pattern toy corpus");
    make_toy->add_option("--out", toy_out, "Output directory")->required();
    make_toy->add_option("--classes", toy.num_classes, "Number of classes")->capture_default_str();
    make_toy->add_option("--per-class", toy.samples_per_class, "Database images per class")->capture_default_str();
    make_toy->add_option("--family", toy.family_size, "Classes sharing local vectors")->capture_default_str();
    make_toy->add_option("--channels", toy.channels, "Feature channels")->capture_default_str();
    make_toy->add_option("--size", toy.height, "Map height and width")->capture_default_str();
    make_toy->add_option("--pattern", toy.pattern_size, "Planted pattern extent")->capture_default_str();
    make_toy->add_option("--threshold", toy.threshold, "Offset subtracted before rectifying; higher is sparser")
        ->capture_default_str();
    make_toy->add_option("--queries", toy_queries, "Number of query images")->capture_default_str();
    make_toy->add_option("--seed", toy.seed, "Generator seed")->capture_default_str();

    std::string config;
    std::string weights_out;
    std::string curve;
    int held_out = 4;
    auto* train = app.add_subcommand("train-toy", "Train the verification model on toy data");
    train->add_option("--config", config, "key = value settings file")->required()->check(CLI::ExistingFile);
    train->add_option("--out", weights_out, "Weights file to write")->required();
    train->add_option("--curve", curve, "Write the loss curve here instead of stdout");
    train->add_option("--held-out", held_out, "Held-out renders per class for the final report")->capture_default_str();

    std::string manifest;
    std::string store_out;
    std::string ingest_weights_path;
    bool float_store = false;
    auto* ingest_cmd = app.add_subcommand("ingest", "Build a feature store from backbone dumps");
    ingest_cmd->add_option("--manifest", manifest, "Id manifest")->required()->check(CLI::ExistingFile);
    ingest_cmd->add_option("--out", store_out, "Store directory")->required();
    ingest_cmd->add_option("--weights", ingest_weights_path, "Weights whose reducers shrink the pyramids");
    ingest_cmd->add_flag("--float", float_store, "Keep pyramids in float32 instead of 8-bit codes");

    std::string query;
    std::string store_dir;
    std::string query_store;
    std::size_t top = 0;
    std::string ranks_out;
    auto* rank = app.add_subcommand("rank", "Global retrieval by descriptor similarity");
    rank->add_option("--query", query, "Query id, or a file of ids")->required();
    rank->add_option("--store", store_dir, "Database store")->required();
    rank->add_option("--query-store", query_store, "Store holding the query entries (default: --store)");
    rank->add_option("--top", top, "Rows per query (0 = all)")->capture_default_str();
    rank->add_option("--out", ranks_out, "ranks.csv to write")->required();

    std::string rerank_weights;
    std::size_t k = 100;
    float alpha = 0.5f;
    int workers = 1;
    auto* rerank = app.add_subcommand("rerank", "Global retrieval followed by verification of the top k");
    rerank->add_option("--query", query, "Query id, or a file of ids")->required();
    rerank->add_option("--store", store_dir, "Database store")->required();
    rerank->add_option("--query-store", query_store, "Store holding the query entries (default: --store)");
    rerank->add_option("--weights", rerank_weights, "Trained weights")->required()->check(CLI::ExistingFile);
    rerank->add_option("--k", k, "Candidates to verify")->capture_default_str();
    rerank->add_option("--alpha", alpha, "Weight of the verification score")->capture_default_str();
    rerank->add_option("--top", top, "Rows per query (0 = all)")->capture_default_str();
    rerank->add_option("--workers", workers, "Scoring threads")->capture_default_str();
    rerank->add_option("--out", ranks_out, "ranks.csv to write")->required();

    std::string ranks_in;
    std::string truth;
    std::optional<std::size_t> cutoff;
    auto* eval = app.add_subcommand("eval", "mAP of a ranks.csv against ground truth");
    eval->add_option("--ranks", ranks_in, "ranks.csv")->required()->check(CLI::ExistingFile);
    eval->add_option("--truth", truth, "truth.csv")->required()->check(CLI::ExistingFile);
    eval->add_option("--cutoff", cutoff, "Only the first N ranks count");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*make_toy) {
            toy.width = toy.height;
            return cmd_make_toy(toy, toy_queries, toy_out);
        }
        if (*train) return cmd_train_toy(config, weights_out, curve, held_out);
        if (*ingest_cmd) return cmd_ingest(manifest, store_out, ingest_weights_path, float_store);
        if (*rank) return cmd_rank(query, store_dir, query_store, top, ranks_out, std::nullopt, 0, 0.0f, 1);
        if (*rerank) return cmd_rank(query, store_dir, query_store, top, ranks_out, rerank_weights, k, alpha, workers);
        if (*eval) return cmd_eval(ranks_in, truth, cutoff);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
