#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "cvr/training.hpp"
#include "support/oracles.hpp"

using namespace cvr;

namespace {

CurriculumSchedule schedule(int64_t steps) {
    CurriculumSchedule s;
    s.total_steps = steps;
    return s;
}

std::vector<std::vector<int64_t>> mine_oracle(const std::vector<LabeledDescriptor>& samples) {
    std::vector<std::vector<int64_t>> out;
    for (const auto& a : samples) {
        std::vector<std::pair<double, int64_t>> all;
        for (const auto& b : samples)
            if (b.label != a.label) {
                double d = 0.0;
                for (std::size_t i = 0; i < a.descriptor->size(); ++i)
                    d += static_cast<double>((*a.descriptor)[i]) * (*b.descriptor)[i];
                all.emplace_back(d, b.id);
            }
        std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
            return x.first != y.first ? x.first > y.first : x.second < y.second;
        });
        std::vector<int64_t> ids;
        for (std::size_t i = 0; i < std::min<std::size_t>(10, all.size()); ++i) ids.push_back(all[i].second);
        out.push_back(ids);
    }
    return out;
}

ToyConfig tiny_toy() {
    ToyConfig c;
    c.num_classes = 4;
    c.samples_per_class = 3;
    c.height = 6;
    c.width = 6;
    c.pattern_size = 4;
    c.channels = 6;
    return c;
}

EncoderConfig tiny_encoder(int channels) {
    EncoderConfig e;
    e.num_scales = 2;
    e.in_channels = channels;
    e.reduced_channels = 4;
    e.block_channels = {8, 8};
    e.convs_per_block = 1;
    e.mlp_hidden = 6;
    return e;
}

}  // namespace

TEST(Schedule, Endpoints) {
    auto s = schedule(2000);
    auto a = schedule_at(s, 0);
    EXPECT_EQ(a.r_h, 0.2);
    EXPECT_EQ(a.p_has, 0.0);
    auto b = schedule_at(s, 2000);
    EXPECT_EQ(b.r_h, 1.0);
    EXPECT_EQ(b.p_has, 0.2);
    auto m = schedule_at(s, 1000);
    EXPECT_NEAR(m.r_h, 0.6, 1e-12);
    EXPECT_NEAR(m.p_has, 0.1, 1e-12);
}

TEST(Schedule, ClampsOutOfRange) {
    auto s = schedule(10);
    auto lo = schedule_at(s, -3);
    EXPECT_TRUE(lo.clamped);
    EXPECT_EQ(lo.r_h, 0.2);
    auto hi = schedule_at(s, 11);
    EXPECT_TRUE(hi.clamped);
    EXPECT_EQ(hi.r_h, 1.0);
    EXPECT_FALSE(schedule_at(s, 5).clamped);
}

TEST(Schedule, MonotoneNondecreasing) {
    for (int64_t steps : {1, 7, 100, 2001}) {
        auto s = schedule(steps);
        auto prev = schedule_at(s, 0);
        for (int64_t i = 1; i <= steps; ++i) {
            auto cur = schedule_at(s, i);
            ASSERT_GE(cur.r_h, prev.r_h);
            ASSERT_GE(cur.p_has, prev.p_has);
            prev = cur;
        }
    }
}

TEST(Schedule, Validation) {
    auto s = schedule(0);
    EXPECT_THROW(s.validate(), Error);
    s = schedule(5);
    s.r_h_end = 1.5;
    EXPECT_THROW(schedule_at(s, 0), Error);
}

TEST(HardNegatives, OrderAndTies) {
    Tensor a({2}, {1.0f, 0.0f}), hi({2}, {0.9f, 0.43589f}), lo({2}, {0.1f, 0.99499f});
    std::vector<LabeledDescriptor> s{{0, 0, &a}, {1, 1, &lo}, {2, 2, &hi}};
    auto h = mine_hard_negatives(s);
    EXPECT_EQ(h[0], (std::vector<int64_t>{2, 1}));

    Tensor e({2}, {0.0f, 1.0f});
    std::vector<LabeledDescriptor> eq{{5, 0, &a}, {9, 1, &e}, {3, 1, &e}, {7, 2, &e}};
    EXPECT_EQ(mine_hard_negatives(eq)[0], (std::vector<int64_t>{3, 7, 9}));
}

TEST(HardNegatives, NoNegativesThrows) {
    Tensor a({2}, {1.0f, 0.0f});
    std::vector<LabeledDescriptor> s{{0, 0, &a}, {1, 0, &a}};
    EXPECT_THROW(mine_hard_negatives(s), Error);
}

TEST(HardNegatives, MatchesFullSortOracle) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 20 + 18 * trial;
        std::vector<Tensor> desc;
        desc.reserve(static_cast<std::size_t>(n));
        std::vector<LabeledDescriptor> s;
        for (int i = 0; i < n; ++i) {
            desc.push_back(l2_normalize(oracle::random_tensor({8}, rng)).value);
            s.push_back({i * 3 + 1, i % 5, &desc.back()});
        }
        auto got = mine_hard_negatives(s);
        auto want = mine_oracle(s);
        ASSERT_EQ(got, want);
        for (std::size_t a = 0; a < s.size(); ++a) {
            EXPECT_EQ(got[a].size(), 10u);
            for (int64_t id : got[a]) EXPECT_NE(s[static_cast<std::size_t>((id - 1) / 3)].label, s[a].label);
        }
    }
}

TEST(HideAndSeek, Extremes) {
    std::mt19937_64 data(2);
    Tensor f = oracle::random_tensor({3, 5, 5}, data, 0.1f, 1.0f);
    Rng rng(1);
    EXPECT_EQ(hide_and_seek(f, 0.0, rng).vec(), f.vec());
    const Tensor hidden = hide_and_seek(f, 1.0, rng);
    for (float v : hidden.values()) EXPECT_EQ(v, 0.0f);
    EXPECT_THROW(hide_and_seek(f, 1.5, rng), Error);
}

TEST(HideAndSeek, ZeroesWholeColumnsOnly) {
    std::mt19937_64 data(3);
    Tensor f = oracle::random_tensor({4, 8, 8}, data, 0.1f, 1.0f);
    Rng rng(5);
    Tensor g = hide_and_seek(f, 0.4, rng);
    for (int64_t pos = 0; pos < 64; ++pos) {
        const bool dropped = g[static_cast<std::size_t>(pos)] == 0.0f;
        for (int64_t c = 0; c < 4; ++c) {
            const auto i = static_cast<std::size_t>(c * 64 + pos);
            EXPECT_EQ(g[i], dropped ? 0.0f : f[i]);
        }
    }
}

TEST(HideAndSeek, DropRateConcentrates) {
    Tensor f({1, 64, 64}, 1.0f);
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor g = hide_and_seek(f, 0.2, rng);
        double zeros = 0.0;
        for (float v : g.values()) zeros += v == 0.0f;
        EXPECT_NEAR(zeros / 4096.0, 0.2, 0.03);
    }
}

TEST(HideAndSeek, Deterministic) {
    std::mt19937_64 data(4);
    Tensor f = oracle::random_tensor({2, 6, 6}, data);
    Rng a(9), b(9);
    EXPECT_EQ(hide_and_seek(f, 0.3, a).vec(), hide_and_seek(f, 0.3, b).vec());
}

TEST(SampleTriplet, LabelConstraint) {
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) labels.push_back(i % 8);
    labels.push_back(99);  // singleton class
    std::vector<LabeledDescriptor> s;
    std::mt19937_64 data(5);
    std::vector<Tensor> desc;
    desc.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        desc.push_back(l2_normalize(oracle::random_tensor({6}, data)).value);
        s.push_back({static_cast<int64_t>(i), labels[i], &desc.back()});
    }
    auto hard = mine_hard_negatives(s);
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
        auto t = sample_triplet(labels, hard, 0.5, rng);
        ASSERT_NE(t.query, 40u);
        ASSERT_NE(t.query, t.positive);
        ASSERT_EQ(labels[t.query], labels[t.positive]);
        ASSERT_NE(labels[t.query], labels[t.negative]);
    }
}

TEST(SampleTriplet, HardRate) {
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) labels.push_back(i % 6);
    std::mt19937_64 data(6);
    std::vector<Tensor> desc;
    desc.reserve(labels.size());
    std::vector<LabeledDescriptor> s;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        desc.push_back(l2_normalize(oracle::random_tensor({6}, data)).value);
        s.push_back({static_cast<int64_t>(i), labels[i], &desc.back()});
    }
    auto hard = mine_hard_negatives(s);
    Rng rng(4);
    for (int i = 0; i < 500; ++i) {
        auto t = sample_triplet(labels, hard, 1.0, rng);
        ASSERT_TRUE(t.hard);
        const auto& list = hard[t.query];
        ASSERT_NE(std::find(list.begin(), list.end(), static_cast<int64_t>(t.negative)), list.end());
    }
    // Uniform negatives land in the mined list 10 / 50 of the time.
    int hits = 0;
    const int draws = 20000;
    for (int i = 0; i < draws; ++i) hits += sample_triplet(labels, hard, 0.0, rng).hard;
    EXPECT_NEAR(static_cast<double>(hits) / draws, 10.0 / 50.0, 0.015);
}

TEST(Sgd, ZeroGradientAndScalarStep) {
    Tensor p({3}, {1.0f, 2.0f, 3.0f});
    Tensor g({3});
    SgdState st;
    Tensor* ps[] = {&p};
    const Tensor* gs[] = {&g};
    sgd_step(ps, gs, st, 0.5);
    EXPECT_EQ(p.vec(), (std::vector<float>{1.0f, 2.0f, 3.0f}));

    Tensor x({1}, {5.0f});
    Tensor gx({1}, {2.0f});
    SgdState sx;
    Tensor* px[] = {&x};
    const Tensor* gxs[] = {&gx};
    sgd_step(px, gxs, sx, 1.0);
    EXPECT_EQ(x[0], 3.0f);
    // Second step carries momentum: v = 0.9 * 2 + 2.
    sgd_step(px, gxs, sx, 1.0);
    EXPECT_NEAR(x[0], 3.0f - 3.8f, 1e-6f);
}

TEST(Sgd, Divergence) {
    Tensor p({1}, 1.0f);
    Tensor g({1}, std::nanf(""));
    SgdState st;
    Tensor* ps[] = {&p};
    const Tensor* gs[] = {&g};
    try {
        sgd_step(ps, gs, st, 0.1);
        FAIL() << "expected divergence";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("divergence"), std::string::npos);
    }
}

TEST(Sgd, ConvexQuadraticDescendsMonotonically) {
    Tensor x({4}, {3.0f, -2.0f, 1.0f, 0.5f});
    const float scale[] = {1.0f, 2.0f, 0.5f, 4.0f};
    auto objective = [&] {
        double f = 0.0;
        for (std::size_t i = 0; i < 4; ++i) f += 0.5 * scale[i] * x[i] * x[i];
        return f;
    };
    SgdState st;
    double prev = objective();
    for (int it = 0; it < 400; ++it) {
        Tensor g({4});
        for (std::size_t i = 0; i < 4; ++i) g[i] = scale[i] * x[i];
        Tensor* ps[] = {&x};
        const Tensor* gs[] = {&g};
        sgd_step(ps, gs, st, 0.1, 0.0);
        const double cur = objective();
        ASSERT_LE(cur, prev);
        prev = cur;
    }
    EXPECT_LT(prev, 1e-6);
}

TEST(Sgd, CosineSchedule) {
    EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 100), 0.1);
    EXPECT_NEAR(cosine_lr(0.1, 50, 100), 0.05, 1e-15);
    EXPECT_NEAR(cosine_lr(0.1, 100, 100), 0.0, 1e-15);
}

TEST(TrainToy, SeededRunsAreIdentical) {
    auto data = make_toy_dataset(tiny_toy());
    TrainConfig cfg;
    cfg.steps = 4;
    cfg.seed = 3;
    auto enc = tiny_encoder(6);
    auto a = train_rerank_toy(data, cfg, schedule(4), enc);
    auto b = train_rerank_toy(data, cfg, schedule(4), enc);
    ASSERT_EQ(a.curve.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
        EXPECT_TRUE(std::isfinite(a.curve[i].loss));
    }
    EXPECT_EQ(a.curve[0].r_h, 0.2);
    EXPECT_EQ(a.weights.fc2_weight.vec(), b.weights.fc2_weight.vec());
    std::ostringstream os;
    write_curve_csv(os, a.curve);
    EXPECT_EQ(os.str().substr(0, 23), "step,loss,lr,r_h,p_has\n");
}

TEST(TrainToy, ChannelMismatchThrows) {
    auto data = make_toy_dataset(tiny_toy());
    TrainConfig cfg;
    cfg.steps = 1;
    EXPECT_THROW(train_rerank_toy(data, cfg, schedule(1), tiny_encoder(5)), Error);
}

TEST(TrainToy, FullMaskingGivesNoSignal) {
    // With every position hidden all volumes are zero and every pair scores alike.
    auto data = make_toy_dataset(tiny_toy());
    auto w = EncoderWeights::init(tiny_encoder(6), 1);
    Rng rng(1);
    const Tensor q = hide_and_seek(data.maps[0], 1.0, rng);
    const Tensor p = hide_and_seek(data.maps[1], 1.0, rng);
    const Tensor n = hide_and_seek(data.maps[5], 1.0, rng);
    EXPECT_EQ(verify_pair(q, p, w), verify_pair(q, n, w));
}

TEST(TripletLoss, GradientsPassFiniteDifferences) {
    // Strictly positive maps and shifted biases keep pre-activations off the
    // ReLU kinks that toy maps, with their exact zeros, would sit on.
    std::mt19937_64 rng(7);
    const Tensor q = oracle::random_tensor({6, 6, 6}, rng, 0.1f, 1.0f);
    const Tensor p = oracle::random_tensor({6, 6, 6}, rng, 0.1f, 1.0f);
    const Tensor n = oracle::random_tensor({6, 6, 6}, rng, 0.1f, 1.0f);
    auto w = EncoderWeights::init(tiny_encoder(6), 2);
    for (std::size_t s = 0; s < w.reducer.kernels.size(); ++s) {
        w.reducer.kernels[s] += oracle::random_tensor(w.reducer.kernels[s].shape(), rng, -0.2f, 0.2f);
        w.reducer.biases[s] = oracle::random_tensor(w.reducer.biases[s].shape(), rng, 0.3f, 0.6f);
    }
    for (auto& l : w.layers) l.gn_beta = oracle::random_tensor({l.gn_beta.dim(0)}, rng, 1.5f, 2.5f);
    w.fc1_bias = oracle::random_tensor({w.fc1_bias.dim(0)}, rng, 0.5f, 1.0f);
    // Near-zero output weights leave every upstream gradient tiny next to the
    // float rounding of the loss. Widen them.
    w.fc2_weight = oracle::random_tensor(w.fc2_weight.shape(), rng, -2.0f, 2.0f);
    auto grads = w.zeros_like();
    triplet_loss_and_grad(q, p, n, w, grads);
    // Probes are drawn from every tensor, but errors are measured against the
    // largest gradient in the model. The loss carries ~1e-6 relative float
    // rounding after the full pipeline, which swamps tensors whose own
    // gradients are tiny.
    auto named = w.parameters();
    auto gnamed = grads.parameters();
    double worst_abs = 0.0;
    double largest = 0.0;
    for (std::size_t i = 0; i < named.size(); ++i) {
        Tensor* target = named[i].tensor;
        const Tensor original = *target;
        auto report = grad_check(
            [&](const Tensor& t) {
                *target = t;
                auto scratch = w.zeros_like();
                const double l = triplet_loss_and_grad(q, p, n, w, scratch).loss;
                *target = original;
                return l;
            },
            original, *gnamed[i].tensor, 1e-3, 16);
        worst_abs = std::max(worst_abs, report.max_abs_diff);
        if (report.max_rel_diff > 0.0) largest = std::max(largest, report.max_abs_diff / report.max_rel_diff);
    }
    ASSERT_GT(largest, 0.0);
    EXPECT_LT(worst_abs / largest, 1e-2);
}

TEST(TrainConfigFile, ParsesKeys) {
    std::istringstream is(
        "# toy run\n"
        "lr = 0.05\n"
        "steps = 12\n"
        "block_channels = 4, 8, 8\n"
        "r_h_start = 0.3\n"
        "data_classes = 6\n");
    auto s = parse_train_config(is);
    EXPECT_EQ(s.train.lr, 0.05);
    EXPECT_EQ(s.train.steps, 12);
    EXPECT_EQ(s.encoder.block_channels, (std::vector<int>{4, 8, 8}));
    EXPECT_EQ(s.schedule.r_h_start, 0.3);
    EXPECT_EQ(s.data.num_classes, 6);
    EXPECT_EQ(s.schedule.total_steps, 12);
}

TEST(TrainConfigFile, RejectsUnknownAndMalformed) {
    std::istringstream unknown("learning_rate = 0.1\n");
    EXPECT_THROW(parse_train_config(unknown), Error);
    std::istringstream malformed("lr 0.1\n");
    EXPECT_THROW(parse_train_config(malformed), Error);
    std::istringstream bad_value("steps = many\n");
    EXPECT_THROW(parse_train_config(bad_value), Error);
    std::istringstream bad_lr("lr = -1\n");
    EXPECT_THROW(parse_train_config(bad_lr), Error);
}
