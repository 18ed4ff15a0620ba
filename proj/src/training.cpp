#include "cvr/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "cvr/correlation.hpp"
#include "cvr/numerics.hpp"

namespace cvr {

void CurriculumSchedule::validate() const {
    for (double v : {r_h_start, r_h_end, p_has_start, p_has_end})
        if (v < 0.0 || v > 1.0) throw Error("curriculum endpoints must lie in [0, 1]");
    if (total_steps < 1) throw Error("curriculum total_steps must be >= 1");
}

CurriculumPoint schedule_at(const CurriculumSchedule& sch, int64_t step) {
    sch.validate();
    CurriculumPoint pt;
    if (step < 0 || step > sch.total_steps) {
        pt.clamped = true;
        step = std::clamp<int64_t>(step, 0, sch.total_steps);
    }
    if (step == sch.total_steps) {
        pt.r_h = sch.r_h_end;
        pt.p_has = sch.p_has_end;
        return pt;
    }
    const double frac = static_cast<double>(step) / static_cast<double>(sch.total_steps);
    pt.r_h = sch.r_h_start + (sch.r_h_end - sch.r_h_start) * frac;
    pt.p_has = sch.p_has_start + (sch.p_has_end - sch.p_has_start) * frac;
    return pt;
}

std::vector<std::vector<int64_t>> mine_hard_negatives(std::span<const LabeledDescriptor> samples) {
    std::vector<std::vector<int64_t>> out(samples.size());
    std::vector<std::pair<float, int64_t>> scored;
    for (std::size_t a = 0; a < samples.size(); ++a) {
        scored.clear();
        const auto& anchor = samples[a];
        for (std::size_t b = 0; b < samples.size(); ++b) {
            if (samples[b].label == anchor.label) continue;
            scored.emplace_back(dot(anchor.descriptor->values(), samples[b].descriptor->values()), samples[b].id);
        }
        if (scored.empty()) throw Error("sample " + std::to_string(anchor.id) + " has no negatives");
        const auto keep = std::min(kHardNegatives, scored.size());
        auto better = [](const auto& x, const auto& y) { return x.first != y.first ? x.first > y.first : x.second < y.second; };
        std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
        for (std::size_t i = 0; i < keep; ++i) out[a].push_back(scored[i].second);
    }
    return out;
}

Tensor hide_and_seek(const Tensor& f, double p_has, Rng& rng) {
    if (p_has < 0.0 || p_has > 1.0) throw Error("hide_and_seek probability must lie in [0, 1]");
    if (f.rank() != 3) throw Error("hide_and_seek expects C x H x W");
    Tensor out = f;
    const int64_t c = f.dim(0);
    const int64_t plane = f.dim(1) * f.dim(2);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int64_t pos = 0; pos < plane; ++pos) {
        // Draw for every position so the stream advances identically for any p_has.
        if (unit(rng) < p_has)
            for (int64_t ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(ch * plane + pos)] = 0.0f;
    }
    return out;
}

Triplet sample_triplet(std::span<const int> labels, const std::vector<std::vector<int64_t>>& hard_negatives,
                       double r_h, Rng& rng) {
    if (labels.size() != hard_negatives.size()) throw Error("hard-negative index does not cover the dataset");
    std::uniform_int_distribution<std::size_t> pick(0, labels.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<std::size_t> pool;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Triplet t;
        t.query = pick(rng);
        const int label = labels[t.query];
        pool.clear();
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (i != t.query && labels[i] == label) pool.push_back(i);
        if (pool.empty()) continue;  // singleton class: resample the anchor
        t.positive = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        const auto& mined = hard_negatives[t.query];
        if (!mined.empty() && unit(rng) < r_h) {
            t.negative = static_cast<std::size_t>(mined[std::uniform_int_distribution<std::size_t>(0, mined.size() - 1)(rng)]);
            t.hard = true;
        } else {
            pool.clear();
            for (std::size_t i = 0; i < labels.size(); ++i)
                if (labels[i] != label) pool.push_back(i);
            if (pool.empty()) throw Error("dataset has a single label");
            t.negative = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
            t.hard = std::find(mined.begin(), mined.end(), static_cast<int64_t>(t.negative)) != mined.end();
        }
        return t;
    }
    throw Error("could not sample a triplet: no label has two samples");
}

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, SgdState& state, double lr,
              double momentum) {
    if (params.size() != grads.size()) throw Error("sgd_step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!params[i]->same_shape(*grads[i])) throw Error("sgd_step: shape mismatch");
        for (float g : grads[i]->values())
            if (!std::isfinite(g)) throw Error("divergence");
    }
    if (state.velocity.empty())
        for (const auto* g : grads) state.velocity.push_back(Tensor::zeros_like(*g));
    if (state.velocity.size() != grads.size()) throw Error("sgd_step: optimizer state does not match parameters");
    const auto mu = static_cast<float>(momentum);
    const auto step = static_cast<float>(lr);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto& v = state.velocity[i];
        auto& p = *params[i];
        const auto& g = *grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = mu * v[j] + g[j];
            p[j] -= step * v[j];
        }
    }
}

void sgd_step(EncoderWeights& w, const EncoderWeights& grads, SgdState& state, double lr, double momentum) {
    std::vector<Tensor*> params;
    for (auto& p : w.parameters()) params.push_back(p.tensor);
    std::vector<const Tensor*> gs;
    for (const auto& g : grads.parameters()) gs.push_back(g.second);
    sgd_step(params, gs, state, lr, momentum);
}

double cosine_lr(double lr, int64_t step, int64_t steps) {
    if (steps < 1) throw Error("cosine_lr: steps must be >= 1");
    return lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(steps)));
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw Error("train config: lr must be > 0");
    if (steps < 1) throw Error("train config: steps must be >= 1");
    if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw Error("train config: momentum must lie in [0, 1)");
}

namespace {

struct ImageState {
    FeaturePyramid raw;
    FeaturePyramid reduced;
    std::vector<Tensor> grad;
};

ImageState prepare(const Tensor& map, const EncoderWeights& w) {
    ImageState s;
    s.raw = build_pyramid(FeatureMap(map), w.config.num_scales);
    s.reduced = reduce_scalewise(s.raw, w.reducer);
    for (const auto& l : s.reduced.levels) s.grad.push_back(Tensor::zeros_like(l));
    return s;
}

PairLogit pair_forward_backward(ImageState& q, ImageState& k, const EncoderWeights& w, bool is_match,
                                EncoderWeights& grads, double weight, double& loss) {
    CrossScaleCache cc;
    auto vol = assemble_cross_scale(q.reduced, k.reduced, &cc);
    EncoderCache ec;
    PairLogit z = encoder_forward(vol.volume, w, &ec);
    auto l = rerank_pair_loss(z, is_match);
    loss += weight * l.value;
    PairLogit gz = logit_grad(l, "z");
    gz.z0 *= static_cast<float>(weight);
    gz.z1 *= static_cast<float>(weight);
    Tensor gvol = encoder_backward(ec, w, gz, grads);
    auto pg = assemble_cross_scale_backward(q.reduced, k.reduced, cc, gvol);
    for (std::size_t s = 0; s < q.grad.size(); ++s) {
        q.grad[s] += pg.query[s];
        k.grad[s] += pg.key[s];
    }
    return z;
}

void accumulate_reducer(const ImageState& s, const EncoderWeights& w, EncoderWeights& grads) {
    auto rg = reduce_scalewise_backward(s.raw, s.reduced, s.grad, w.reducer);
    for (std::size_t i = 0; i < rg.kernels.size(); ++i) {
        grads.reducer.kernels[i] += rg.kernels[i];
        grads.reducer.biases[i] += rg.biases[i];
    }
}

}  // namespace

PairGradients triplet_loss_and_grad(const Tensor& q, const Tensor& p, const Tensor& n, const EncoderWeights& w,
                                    EncoderWeights& grads) {
    ImageState sq = prepare(q, w);
    ImageState sp = prepare(p, w);
    ImageState sn = prepare(n, w);
    PairGradients out;
    // Each directional loss enters the total with weight 1/4.
    out.z_qp = pair_forward_backward(sq, sp, w, true, grads, 0.25, out.loss);
    out.z_pq = pair_forward_backward(sp, sq, w, true, grads, 0.25, out.loss);
    out.z_qn = pair_forward_backward(sq, sn, w, false, grads, 0.25, out.loss);
    out.z_nq = pair_forward_backward(sn, sq, w, false, grads, 0.25, out.loss);
    accumulate_reducer(sq, w, grads);
    accumulate_reducer(sp, w, grads);
    accumulate_reducer(sn, w, grads);
    return out;
}

float verify_pair(const Tensor& q, const Tensor& k, const EncoderWeights& w) {
    const auto rq = reduce_scalewise(build_pyramid(FeatureMap(q), w.config.num_scales), w.reducer);
    const auto rk = reduce_scalewise(build_pyramid(FeatureMap(k), w.config.num_scales), w.reducer);
    return similarity_from_logit(score_pair(rq, rk, w));
}

namespace {

std::vector<std::vector<int64_t>> mine_dataset(const ToyDataset& data) {
    std::vector<LabeledDescriptor> samples;
    for (std::size_t i = 0; i < data.size(); ++i)
        samples.push_back({static_cast<int64_t>(i), data.labels[i], &data.descriptors[i]});
    return mine_hard_negatives(samples);
}

}  // namespace

TrainResult train_rerank_toy(const ToyDataset& data, const TrainConfig& cfg, const CurriculumSchedule& sch_in,
                             const EncoderConfig& encoder) {
    cfg.validate();
    CurriculumSchedule sch = sch_in;
    sch.total_steps = cfg.steps;
    sch.validate();
    if (data.size() == 0) throw Error("training set is empty");
    if (encoder.in_channels != data.maps.front().dim(0))
        throw Error("encoder expects " + std::to_string(encoder.in_channels) + " input channels, data has " +
                    std::to_string(data.maps.front().dim(0)));

    TrainResult result{EncoderWeights::init(encoder, cfg.seed), {}};
    auto& w = result.weights;
    const auto hard = mine_dataset(data);
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    SgdState opt;
    const double inv_batch = 1.0 / cfg.batch_size;

    for (int64_t step = 0; step < cfg.steps; ++step) {
        const auto pt = schedule_at(sch, step);
        const double lr = cosine_lr(cfg.lr, step, cfg.steps);
        EncoderWeights grads = w.zeros_like();
        double loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto t = sample_triplet(data.labels, hard, pt.r_h, rng);
            const Tensor q = hide_and_seek(data.maps[t.query], pt.p_has, rng);
            const Tensor p = hide_and_seek(data.maps[t.positive], pt.p_has, rng);
            const Tensor n = hide_and_seek(data.maps[t.negative], pt.p_has, rng);
            loss += triplet_loss_and_grad(q, p, n, w, grads).loss * inv_batch;
        }
        if (!std::isfinite(loss)) {
            std::ostringstream msg;
            msg << "NaN loss at step " << step << " (lr " << lr << ", r_h " << pt.r_h << ", p_has " << pt.p_has << ")";
            throw Error(msg.str());
        }
        if (cfg.batch_size > 1)
            for (auto& g : grads.parameters()) *g.tensor *= static_cast<float>(inv_batch);
        sgd_step(w, grads, opt, lr, cfg.momentum);
        result.curve.push_back({step, loss, lr, pt.r_h, pt.p_has});
    }
    return result;
}

PairEvaluation evaluate_pairs(const ToyDataset& data, const EncoderWeights& w, uint64_t seed) {
    const auto hard = mine_dataset(data);
    Rng rng(seed);
    PairEvaluation ev;
    std::size_t correct = 0;
    std::size_t hard_correct = 0;
    std::size_t pos_correct = 0;
    std::size_t rand_correct = 0;
    std::size_t anchors = 0;
    std::vector<std::size_t> pool;
    for (std::size_t a = 0; a < data.size(); ++a) {
        pool.clear();
        for (std::size_t i = 0; i < data.size(); ++i)
            if (i != a && data.labels[i] == data.labels[a]) pool.push_back(i);
        if (pool.empty()) continue;
        const std::size_t pos = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        const auto hneg = static_cast<std::size_t>(hard[a].front());
        pool.clear();
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data.labels[i] != data.labels[a]) pool.push_back(i);
        const std::size_t rneg = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];

        const auto rq = reduce_scalewise(build_pyramid(FeatureMap(data.maps[a]), w.config.num_scales), w.reducer);
        auto reduced = [&](std::size_t i) {
            return reduce_scalewise(build_pyramid(FeatureMap(data.maps[i]), w.config.num_scales), w.reducer);
        };
        const auto rp = reduced(pos);
        const auto rh = reduced(hneg);
        const auto rr = reduced(rneg);
        const PairLogit z_qp = score_pair(rq, rp, w);
        const PairLogit z_qh = score_pair(rq, rh, w);
        const PairLogit z_qr = score_pair(rq, rr, w);
        const bool ok_p = similarity_from_logit(z_qp) > 0.5f;
        const bool ok_h = similarity_from_logit(z_qh) <= 0.5f;
        const bool ok_r = similarity_from_logit(z_qr) <= 0.5f;
        correct += ok_p + ok_h + ok_r;
        hard_correct += ok_h;
        pos_correct += ok_p;
        rand_correct += ok_r;
        ev.mean_loss += rerank_total_loss(z_qp, score_pair(rp, rq, w), z_qh, score_pair(rh, rq, w)).value;
        ++anchors;
    }
    if (anchors == 0) throw Error("evaluation set has no anchor with a positive");
    ev.pairs = anchors * 3;
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.pairs);
    const auto n = static_cast<double>(anchors);
    ev.hard_accuracy = static_cast<double>(hard_correct) / n;
    ev.positive_accuracy = static_cast<double>(pos_correct) / n;
    ev.random_accuracy = static_cast<double>(rand_correct) / n;
    ev.mean_loss /= static_cast<double>(anchors);
    return ev;
}

void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& curve) {
    os << "step,loss,lr,r_h,p_has\n";
    os << std::fixed << std::setprecision(6);
    for (const auto& c : curve) os << c.step << ',' << c.loss << ',' << c.lr << ',' << c.r_h << ',' << c.p_has << '\n';
}

ToyTrainSettings default_toy_settings() {
    ToyTrainSettings s;
    s.train.lr = 0.02;
    s.train.batch_size = 6;
    s.train.steps = 2000;
    s.train.seed = 1;
    s.encoder.num_scales = 3;
    s.encoder.in_channels = s.data.channels;
    s.encoder.reduced_channels = 16;
    s.encoder.block_channels = {8, 16, 16};
    s.encoder.convs_per_block = 1;
    s.encoder.mlp_hidden = 32;
    s.schedule.total_steps = s.train.steps;
    return s;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& value, const std::string& where) {
    std::istringstream is(value);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw Error(where + ": cannot parse '" + value + "'");
    return v;
}

std::vector<int> parse_int_list(const std::string& value, const std::string& where) {
    std::vector<int> out;
    std::string item;
    std::istringstream is(value);
    while (std::getline(is, item, ',')) out.push_back(parse_number<int>(trim(item), where));
    if (out.empty()) throw Error(where + ": empty list");
    return out;
}

}  // namespace

ToyTrainSettings parse_train_config(std::istream& is, const std::string& origin) {
    ToyTrainSettings s = default_toy_settings();
    bool in_channels_set = false;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = origin + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw Error(where + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto d = [&] { return parse_number<double>(value, where); };
        auto i = [&] { return parse_number<int64_t>(value, where); };
        if (key == "lr") s.train.lr = d();
        else if (key == "momentum") s.train.momentum = d();
        else if (key == "batch_size") s.train.batch_size = static_cast<int>(i());
        else if (key == "seed") s.train.seed = static_cast<uint64_t>(i());
        else if (key == "steps") s.train.steps = i();
        else if (key == "r_h_start") s.schedule.r_h_start = d();
        else if (key == "r_h_end") s.schedule.r_h_end = d();
        else if (key == "p_has_start") s.schedule.p_has_start = d();
        else if (key == "p_has_end") s.schedule.p_has_end = d();
        else if (key == "num_scales") s.encoder.num_scales = static_cast<int>(i());
        else if (key == "in_channels") { s.encoder.in_channels = static_cast<int>(i()); in_channels_set = true; }
        else if (key == "reduced_channels") s.encoder.reduced_channels = static_cast<int>(i());
        else if (key == "block_channels") s.encoder.block_channels = parse_int_list(value, where);
        else if (key == "convs_per_block") s.encoder.convs_per_block = static_cast<int>(i());
        else if (key == "mlp_hidden") s.encoder.mlp_hidden = static_cast<int>(i());
        else if (key == "data_classes") s.data.num_classes = static_cast<int>(i());
        else if (key == "data_per_class") s.data.samples_per_class = static_cast<int>(i());
        else if (key == "data_family_size") s.data.family_size = static_cast<int>(i());
        else if (key == "data_channels") s.data.channels = static_cast<int>(i());
        else if (key == "data_height") s.data.height = static_cast<int>(i());
        else if (key == "data_width") s.data.width = static_cast<int>(i());
        else if (key == "data_pattern") s.data.pattern_size = static_cast<int>(i());
        else if (key == "data_threshold") s.data.threshold = static_cast<float>(d());
        else if (key == "data_background") s.data.background = static_cast<float>(d());
        else if (key == "data_noise") s.data.noise = static_cast<float>(d());
        else if (key == "data_scale_prob") s.data.scale_prob = static_cast<float>(d());
        else if (key == "data_seed") s.data.seed = static_cast<uint64_t>(i());
        else throw Error(where + ": unknown key '" + key + "'");
    }
    if (!in_channels_set) s.encoder.in_channels = s.data.channels;
    s.schedule.total_steps = s.train.steps;
    s.train.validate();
    s.schedule.validate();
    s.encoder.validate();
    return s;
}

}  // namespace cvr
