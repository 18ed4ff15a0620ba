#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cvr/encoder4d.hpp"
#include "cvr/numerics.hpp"
#include "support/oracles.hpp"

using namespace cvr;

namespace {

CenterPivotKernel random_kernel(std::mt19937_64& rng, int64_t cout, int64_t cin, int64_t kh, int64_t kw) {
    return {oracle::random_tensor({cout, cin, kh, kw}, rng), oracle::random_tensor({cout, cin, kh, kw}, rng),
            oracle::random_tensor({cout}, rng)};
}

EncoderConfig small_config() {
    EncoderConfig c;
    c.num_scales = 2;
    c.in_channels = 3;
    c.reduced_channels = 2;
    c.block_channels = {8, 8};
    c.convs_per_block = 1;
    c.mlp_hidden = 5;
    return c;
}

// Non-zero GN shifts and MLP biases keep most units away from their ReLU kinks.
EncoderWeights jittered(const EncoderConfig& c, uint64_t seed) {
    EncoderWeights w = EncoderWeights::init(c, seed);
    std::mt19937_64 rng(seed + 100);
    for (auto& l : w.layers) {
        l.gn_beta = oracle::random_tensor({l.gn_beta.dim(0)}, rng, 0.2f, 0.8f);
        l.kernel.bias = oracle::random_tensor({l.kernel.bias.dim(0)}, rng);
    }
    w.fc1_bias = oracle::random_tensor({w.fc1_bias.dim(0)}, rng, 0.5f, 1.0f);
    w.fc2_bias = oracle::random_tensor({2}, rng);
    return w;
}

}  // namespace

TEST(CenterPivot, MatchesDenseConvolution) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> ext(1, 4), ch(1, 3), half(0, 1), stride(1, 2);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = oracle::random_tensor({ch(rng), ext(rng), ext(rng), ext(rng), ext(rng)}, rng);
        const int64_t kh = 2 * half(rng) + 1, kw = 2 * half(rng) + 1;
        auto k = random_kernel(rng, ch(rng), x.dim(0), kh, kw);
        const int sq = stride(rng), sk = stride(rng);
        Tensor y = conv4d_center_pivot(x, k, sq, sk);
        Tensor o = oracle::conv4d_naive(x, oracle::embed_center_pivot(k), k.bias, sq, sk);
        ASSERT_EQ(y.shape(), o.shape());
        for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], o[i], 1e-5f);
    }
}

TEST(CenterPivot, ZeroKernelGivesBias) {
    std::mt19937_64 rng(2);
    Tensor x = oracle::random_tensor({2, 3, 3, 3, 3}, rng);
    CenterPivotKernel k{Tensor({3, 2, 3, 3}), Tensor({3, 2, 3, 3}), Tensor({3}, {1.0f, -2.0f, 0.5f})};
    Tensor y = conv4d_center_pivot(x, k, 1, 1);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 81; ++i) EXPECT_EQ(y[static_cast<std::size_t>(c * 81 + i)], k.bias[static_cast<std::size_t>(c)]);
}

TEST(CenterPivot, SeparatesSides) {
    // A query-side-only kernel never mixes key positions.
    std::mt19937_64 rng(3);
    Tensor x = oracle::random_tensor({1, 4, 4, 4, 4}, rng);
    CenterPivotKernel k{oracle::random_tensor({1, 1, 3, 3}, rng), Tensor({1, 1, 3, 3}), Tensor({1})};
    Tensor y = conv4d_center_pivot(x, k, 1, 1);
    for (int64_t key = 0; key < 16; ++key) {
        Tensor plane({1, 4, 4});
        for (int64_t q = 0; q < 16; ++q) plane[static_cast<std::size_t>(q)] = x[static_cast<std::size_t>(q * 16 + key)];
        Tensor expect = oracle::conv2d_naive(plane, k.query_side, 1, 1);
        for (int64_t q = 0; q < 16; ++q)
            EXPECT_NEAR(y[static_cast<std::size_t>(q * 16 + key)], expect[static_cast<std::size_t>(q)], 1e-5f);
    }
}

TEST(CenterPivot, StridedExtents) {
    EXPECT_EQ(strided_extent(4, 2), 2);
    EXPECT_EQ(strided_extent(5, 2), 3);
    EXPECT_EQ(strided_extent(1, 2), 1);
    std::mt19937_64 rng(4);
    Tensor x = oracle::random_tensor({1, 5, 4, 3, 2}, rng);
    auto k = random_kernel(rng, 2, 1, 3, 3);
    EXPECT_EQ(conv4d_center_pivot(x, k, 2, 1).shape(), (Shape{2, 3, 2, 3, 2}));
    EXPECT_EQ(conv4d_center_pivot(x, k, 1, 2).shape(), (Shape{2, 5, 4, 2, 1}));
}

TEST(CenterPivot, Errors) {
    std::mt19937_64 rng(5);
    Tensor x = oracle::random_tensor({2, 3, 3, 3, 3}, rng);
    EXPECT_THROW(conv4d_center_pivot(x, random_kernel(rng, 1, 3, 3, 3), 1, 1), Error);
    EXPECT_THROW(conv4d_center_pivot(x, random_kernel(rng, 1, 2, 2, 2), 1, 1), Error);
    EXPECT_THROW(conv4d_center_pivot(x, random_kernel(rng, 1, 2, 3, 3), 3, 1), Error);
    EXPECT_THROW(conv4d_center_pivot(Tensor({2, 3, 3}), random_kernel(rng, 1, 2, 3, 3), 1, 1), Error);
}

TEST(CenterPivot, GradientsPassFiniteDifferences) {
    std::mt19937_64 rng(6);
    for (int sq : {1, 2}) {
        Tensor x = oracle::random_tensor({2, 4, 3, 3, 4}, rng);
        auto k = random_kernel(rng, 3, 2, 3, 3);
        Tensor w = oracle::random_tensor(conv4d_center_pivot(x, k, sq, 2).shape(), rng);
        auto loss = [&](const Tensor& xx, const CenterPivotKernel& kk) {
            return static_cast<double>(dot(conv4d_center_pivot(xx, kk, sq, 2).values(), w.values()));
        };
        auto g = conv4d_center_pivot_backward(x, k, sq, 2, w);
        EXPECT_LT(grad_check([&](const Tensor& t) { return loss(t, k); }, x, g.input, 1e-3).max_rel_diff, 1e-2);
        auto with = [&](int which) {
            return [&, which](const Tensor& t) {
                CenterPivotKernel kk = k;
                (which == 0 ? kk.query_side : which == 1 ? kk.key_side : kk.bias) = t;
                return loss(x, kk);
            };
        };
        EXPECT_LT(grad_check(with(0), k.query_side, g.kernel.query_side, 1e-3).max_rel_diff, 1e-2);
        EXPECT_LT(grad_check(with(1), k.key_side, g.kernel.key_side, 1e-3).max_rel_diff, 1e-2);
        EXPECT_LT(grad_check(with(2), k.bias, g.kernel.bias, 1e-3).max_rel_diff, 1e-2);
    }
}

TEST(EncoderConfig, Validation) {
    EncoderConfig c = small_config();
    EXPECT_NO_THROW(c.validate());
    c.block_channels = {4};
    EXPECT_THROW(c.validate(), Error);
    c = small_config();
    c.mlp_hidden = 0;
    EXPECT_THROW(c.validate(), Error);
    EXPECT_EQ(group_count(16), 4);
    EXPECT_EQ(group_count(6), 2);
    EXPECT_EQ(group_count(3), 1);
}

TEST(Encoder, ParameterCountAndNames) {
    auto w = EncoderWeights::init(small_config(), 1);
    std::size_t total = 0;
    for (const auto& p : w.parameters()) total += p.tensor->size();
    EXPECT_EQ(total, w.parameter_count());
    // 2 reducers (2x3x3x3 + 2); layer 0 maps S^2 = 4 -> 8 channels, layer 1 maps 8 -> 8.
    const std::size_t reducers = 2 * (2 * 3 * 9 + 2);
    const std::size_t layer0 = 2 * 8 * 4 * 9 + 8 + 8 + 8;
    const std::size_t layer1 = 2 * 8 * 8 * 9 + 8 + 8 + 8;
    const std::size_t mlp = 5 * 8 + 5 + 2 * 5 + 2;
    EXPECT_EQ(w.parameter_count(), reducers + layer0 + layer1 + mlp);
    EXPECT_EQ(w.parameters().front().name, "reducer.0.weight");
    EXPECT_EQ(w.layers[0].stride, 2);
    EXPECT_EQ(w.layers[1].stride, 1);
}

TEST(Encoder, InitIsSeeded) {
    auto a = EncoderWeights::init(small_config(), 3);
    auto b = EncoderWeights::init(small_config(), 3);
    auto c = EncoderWeights::init(small_config(), 4);
    EXPECT_EQ(a.layers[0].kernel.query_side.vec(), b.layers[0].kernel.query_side.vec());
    EXPECT_NE(a.layers[0].kernel.query_side.vec(), c.layers[0].kernel.query_side.vec());
}

TEST(Encoder, ForwardShapeChecks) {
    auto w = EncoderWeights::init(small_config(), 1);
    EXPECT_THROW(encoder_forward(Tensor({3, 4, 4, 4, 4}), w), Error);
    EXPECT_NO_THROW(encoder_forward(Tensor({4, 4, 4, 4, 4}), w));
    // A stride-2 layer needs at least two cells on every axis.
    EXPECT_THROW(encoder_forward(Tensor({4, 1, 4, 4, 4}), w), Error);
}

TEST(Encoder, DeterministicForward) {
    std::mt19937_64 rng(7);
    auto w = jittered(small_config(), 2);
    Tensor v = oracle::random_tensor({4, 4, 4, 4, 4}, rng, 0.0f, 1.0f);
    auto a = encoder_forward(v, w);
    auto b = encoder_forward(v, w);
    EXPECT_EQ(a.z0, b.z0);
    EXPECT_EQ(a.z1, b.z1);
}

TEST(Encoder, SimilarityFromLogit) {
    EXPECT_NEAR(similarity_from_logit({1.0f, 3.0f}), 0.880797078f, 1e-6f);
    EXPECT_NEAR(similarity_from_logit({0.0f, 0.0f}), 0.5f, 1e-7f);
    EXPECT_NEAR(similarity_from_logit({1000.0f, 0.0f}), 0.0f, 1e-7f);
    EXPECT_NEAR(similarity_from_logit({0.0f, 1000.0f}), 1.0f, 1e-7f);
}

TEST(Encoder, GradientsPassFiniteDifferences) {
    std::mt19937_64 rng(8);
    auto w = jittered(small_config(), 5);
    Tensor v = oracle::random_tensor({4, 4, 4, 4, 4}, rng, 0.0f, 1.0f);
    const PairLogit upstream{0.7f, -1.3f};
    auto loss = [&](const EncoderWeights& ww, const Tensor& vv) {
        auto z = encoder_forward(vv, ww);
        return static_cast<double>(upstream.z0) * z.z0 + static_cast<double>(upstream.z1) * z.z1;
    };
    EncoderCache cache;
    encoder_forward(v, w, &cache);
    EncoderWeights grads = w.zeros_like();
    Tensor gv = encoder_backward(cache, w, upstream, grads);
    EXPECT_LT(grad_check([&](const Tensor& t) { return loss(w, t); }, v, gv, 1e-3).max_rel_diff, 1e-2);

    auto named = w.parameters();
    auto gnamed = grads.parameters();
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (named[i].name.rfind("reducer.", 0) == 0) continue;  // not used by encoder_forward
        Tensor* target = named[i].tensor;
        const Tensor original = *target;
        auto report = grad_check(
            [&](const Tensor& t) {
                *target = t;
                const double l = loss(w, v);
                *target = original;
                return l;
            },
            original, *gnamed[i].tensor, 1e-3);
        EXPECT_LT(report.max_rel_diff, 1e-2) << named[i].name;
    }
}

TEST(Encoder, WeightsRoundTrip) {
    auto w = jittered(small_config(), 9);
    const auto path = (std::filesystem::temp_directory_path() / "cvr_test_weights.cvw").string();
    save_weights(path, w);
    auto back = load_weights(path);
    EXPECT_EQ(back.config, w.config);
    auto a = w.parameters();
    auto b = back.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(a[i].tensor->vec(), b[i].tensor->vec());
    }
    std::filesystem::remove(path);
    EXPECT_THROW(load_weights(path), Error);
}
