#include "cvr/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace cvr {

namespace {

// Past theta = pi - m the target term would stop being monotone in theta;
// CurricularFace falls back to a linear penalty there.
struct TargetMargin {
    float threshold;  // cos(pi - m)
    float linear;     // sin(pi - m) * m
};

TargetMargin target_margin(float m) {
    return {std::cos(static_cast<float>(M_PI) - m), std::sin(static_cast<float>(M_PI) - m) * m};
}

}  // namespace

float curricular_margin(float cos_theta, bool is_target, const MarginState& st, float margined_target) {
    const float c = std::clamp(cos_theta, -1.0f, 1.0f);
    if (is_target) {
        const auto tm = target_margin(st.margin);
        if (c <= tm.threshold) return c - tm.linear;
        const float sin_theta = std::sqrt(std::max(0.0f, 1.0f - c * c));
        return c * std::cos(st.margin) - sin_theta * std::sin(st.margin);
    }
    if (margined_target >= c) return c;
    return c * (st.t + c);
}

float curricular_margin_grad(float cos_theta, bool is_target, const MarginState& st, float margined_target) {
    const float c = std::clamp(cos_theta, -1.0f, 1.0f);
    if (is_target) {
        const auto tm = target_margin(st.margin);
        if (c <= tm.threshold) return 1.0f;
        const float sin_theta = std::sqrt(std::max(1e-12f, 1.0f - c * c));
        return std::cos(st.margin) + c * std::sin(st.margin) / sin_theta;
    }
    if (margined_target >= c) return 1.0f;
    return st.t + 2.0f * c;
}

void commit_margin(MarginState& st, float batch_mean_positive_cos) {
    st.t = std::clamp(st.momentum * st.t + (1.0f - st.momentum) * batch_mean_positive_cos, 0.0f, 1.0f);
}

DescriptorBank::DescriptorBank(Tensor weights, std::size_t cap) : class_weights(std::move(weights)), capacity(cap) {
    if (class_weights.rank() != 2) throw Error("class weights must be N x C_g");
    if (capacity < 1) throw Error("queue capacity must be >= 1");
    normalize_class_weights();
}

void DescriptorBank::normalize_class_weights() {
    const int64_t n = class_weights.dim(0);
    const int64_t c = class_weights.dim(1);
    for (int64_t i = 0; i < n; ++i) {
        std::span<float> row(class_weights.data() + i * c, static_cast<std::size_t>(c));
        const float norm = l2_norm(row);
        if (norm > kNormFloor)
            for (auto& v : row) v /= norm;
    }
}

void queue_update(DescriptorBank& bank, const Tensor& d_momentum, int label) {
    const float norm = l2_norm(d_momentum.values());
    if (std::abs(norm - 1.0f) > 1e-3f) throw Error("queued descriptors must be unit-norm");
    bank.queue.push_back({d_momentum, label});
    while (bank.queue.size() > bank.capacity) bank.queue.pop_front();
}

namespace {

void require_unit(const Tensor& dq) {
    if (dq.rank() != 1) throw Error("descriptor must be a vector");
    const float norm = l2_norm(dq.values());
    if (std::abs(norm - 1.0f) > 1e-3f)
        throw Error("descriptor is not unit-norm (norm " + std::to_string(norm) + ")");
}

// -log softmax(logits)[target] and its gradient wrt the logits, in double.
double cross_entropy(const std::vector<double>& logits, std::size_t target, std::vector<double>& grad) {
    const double m = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - m);
    grad.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) grad[i] = std::exp(logits[i] - m) / denom;
    grad[target] -= 1.0;
    return -(logits[target] - m - std::log(denom));
}

}  // namespace

LossValue classification_loss(const Tensor& dq, const DescriptorBank& bank, int target, const MarginState& st) {
    require_unit(dq);
    const auto& w = bank.class_weights;
    const int64_t n = w.dim(0);
    const int64_t c = w.dim(1);
    if (c != dq.dim(0)) throw Error("descriptor dimension does not match class weights");
    if (target < 0 || target >= n) throw Error("target class out of range");

    std::vector<float> cosines(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        cosines[static_cast<std::size_t>(i)] =
            dot(std::span<const float>(w.data() + i * c, static_cast<std::size_t>(c)), dq.values());
    const auto ti = static_cast<std::size_t>(target);
    const float margined_target = curricular_margin(cosines[ti], true, st);
    std::vector<double> logits(static_cast<std::size_t>(n));
    std::vector<float> dlogit_dcos(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const bool is_t = i == ti;
        logits[i] = static_cast<double>(curricular_margin(cosines[i], is_t, st, margined_target)) * st.inv_tau;
        dlogit_dcos[i] = curricular_margin_grad(cosines[i], is_t, st, margined_target) * st.inv_tau;
    }
    std::vector<double> gl;
    LossValue out;
    out.value = cross_entropy(logits, ti, gl);
    Tensor gdq = Tensor::zeros_like(dq);
    Tensor gw = Tensor::zeros_like(w);
    for (int64_t i = 0; i < n; ++i) {
        const auto g = static_cast<float>(gl[static_cast<std::size_t>(i)]) * dlogit_dcos[static_cast<std::size_t>(i)];
        for (int64_t k = 0; k < c; ++k) {
            gdq[static_cast<std::size_t>(k)] += g * w[static_cast<std::size_t>(i * c + k)];
            gw[static_cast<std::size_t>(i * c + k)] = g * dq[static_cast<std::size_t>(k)];
        }
    }
    out.grads.emplace("dq", std::move(gdq));
    out.grads.emplace("W", std::move(gw));
    return out;
}

LossValue contrastive_loss(const Tensor& dq, const DescriptorBank& bank, int query_label, const MarginState& st) {
    require_unit(dq);
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
    std::vector<float> cosines(bank.queue.size());
    for (std::size_t i = 0; i < bank.queue.size(); ++i) {
        const auto& e = bank.queue[i];
        if (e.descriptor.size() != dq.size()) throw Error("queue descriptor dimension mismatch");
        cosines[i] = dot(e.descriptor.values(), dq.values());
        (e.label == query_label ? positives : negatives).push_back(i);
    }
    if (positives.empty()) throw Error("positive missing from queue");

    LossValue out;
    Tensor gdq = Tensor::zeros_like(dq);
    const double inv_p = 1.0 / static_cast<double>(positives.size());
    std::vector<double> logits;
    std::vector<float> dcos;
    std::vector<double> gl;
    for (std::size_t p : positives) {
        const float margined = curricular_margin(cosines[p], true, st);
        logits.assign(1, static_cast<double>(margined) * st.inv_tau);
        dcos.assign(1, curricular_margin_grad(cosines[p], true, st) * st.inv_tau);
        for (std::size_t n : negatives) {
            logits.push_back(static_cast<double>(curricular_margin(cosines[n], false, st, margined)) * st.inv_tau);
            dcos.push_back(curricular_margin_grad(cosines[n], false, st, margined) * st.inv_tau);
        }
        out.value += inv_p * cross_entropy(logits, 0, gl);
        for (std::size_t j = 0; j < logits.size(); ++j) {
            const std::size_t qi = j == 0 ? p : negatives[j - 1];
            const auto g = static_cast<float>(inv_p * gl[j]) * dcos[j];
            const auto& d = bank.queue[qi].descriptor;
            for (std::size_t k = 0; k < gdq.size(); ++k) gdq[k] += g * d[k];
        }
    }
    out.grads.emplace("dq", std::move(gdq));
    return out;
}

LossValue global_total_loss(const LossValue& cls, const LossValue& con, std::pair<double, double> lambdas) {
    LossValue out;
    out.value = lambdas.first * cls.value + lambdas.second * con.value;
    auto merge = [&out](const LossValue& part, double lambda) {
        for (const auto& [name, g] : part.grads) {
            Tensor scaled = g;
            scaled *= static_cast<float>(lambda);
            auto it = out.grads.find(name);
            if (it == out.grads.end())
                out.grads.emplace(name, std::move(scaled));
            else
                it->second += scaled;
        }
    };
    merge(cls, lambdas.first);
    merge(con, lambdas.second);
    return out;
}

LossValue rerank_pair_loss(const PairLogit& z, bool is_match) {
    std::vector<double> gl;
    LossValue out;
    out.value = cross_entropy({z.z0, z.z1}, is_match ? 1 : 0, gl);
    out.grads.emplace("z", Tensor({2}, {static_cast<float>(gl[0]), static_cast<float>(gl[1])}));
    return out;
}

LossValue rerank_total_loss(const PairLogit& z_qp, const PairLogit& z_pq, const PairLogit& z_qn,
                            const PairLogit& z_nq) {
    const std::pair<const char*, std::pair<PairLogit, bool>> parts[] = {
        {"z_qp", {z_qp, true}}, {"z_pq", {z_pq, true}}, {"z_qn", {z_qn, false}}, {"z_nq", {z_nq, false}}};
    LossValue out;
    for (const auto& [name, spec] : parts) {
        auto l = rerank_pair_loss(spec.first, spec.second);
        out.value += 0.25 * l.value;
        Tensor g = l.grads.at("z");
        g *= 0.25f;
        out.grads.emplace(name, std::move(g));
    }
    return out;
}

GlobalHead GlobalHead::init(int64_t in_dim, int64_t out_dim, uint64_t seed) {
    GlobalHead h;
    h.whiten_weight = Tensor({out_dim, in_dim});
    h.whiten_bias = Tensor({out_dim});
    if (in_dim == out_dim) {
        for (int64_t i = 0; i < in_dim; ++i) h.whiten_weight[static_cast<std::size_t>(i * in_dim + i)] = 1.0f;
    } else {
        std::mt19937_64 rng(seed);
        std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(1.0 / static_cast<double>(in_dim))));
        for (auto& v : h.whiten_weight.values()) v = dist(rng);
    }
    return h;
}

Tensor GlobalHead::forward(const Tensor& feature_map, Cache* cache) const {
    Tensor pooled = gem_pool(feature_map, gem_power);
    const int64_t out_dim = whiten_weight.dim(0);
    const int64_t in_dim = whiten_weight.dim(1);
    if (pooled.dim(0) != in_dim) throw Error("global head expects " + std::to_string(in_dim) + " channels");
    Tensor white({out_dim});
    for (int64_t o = 0; o < out_dim; ++o) {
        float acc = whiten_bias[static_cast<std::size_t>(o)];
        for (int64_t i = 0; i < in_dim; ++i)
            acc += whiten_weight[static_cast<std::size_t>(o * in_dim + i)] * pooled[static_cast<std::size_t>(i)];
        white[static_cast<std::size_t>(o)] = acc;
    }
    Normalized n = l2_normalize(white);
    Tensor d = n.value;
    if (cache) *cache = {feature_map, std::move(pooled), std::move(n)};
    return d;
}

GlobalHead::Grads GlobalHead::backward(const Cache& cache, const Tensor& grad_descriptor) const {
    const int64_t out_dim = whiten_weight.dim(0);
    const int64_t in_dim = whiten_weight.dim(1);
    Tensor gwhite = l2_normalize_backward(cache.out, grad_descriptor);
    Grads g{0.0f, Tensor::zeros_like(whiten_weight), gwhite};
    Tensor gpooled({in_dim});
    for (int64_t o = 0; o < out_dim; ++o) {
        const float go = gwhite[static_cast<std::size_t>(o)];
        for (int64_t i = 0; i < in_dim; ++i) {
            g.whiten_weight[static_cast<std::size_t>(o * in_dim + i)] = go * cache.pooled[static_cast<std::size_t>(i)];
            gpooled[static_cast<std::size_t>(i)] += go * whiten_weight[static_cast<std::size_t>(o * in_dim + i)];
        }
    }
    g.gem_power = gem_pool_backward(cache.input, gem_power, gpooled).power;
    return g;
}

void GlobalHead::momentum_update(const GlobalHead& online, float eta) {
    gem_power = eta * gem_power + (1.0f - eta) * online.gem_power;
    for (std::size_t i = 0; i < whiten_weight.size(); ++i)
        whiten_weight[i] = eta * whiten_weight[i] + (1.0f - eta) * online.whiten_weight[i];
    for (std::size_t i = 0; i < whiten_bias.size(); ++i)
        whiten_bias[i] = eta * whiten_bias[i] + (1.0f - eta) * online.whiten_bias[i];
}

}  // namespace cvr
