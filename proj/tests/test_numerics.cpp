#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "cvr/numerics.hpp"
#include "support/oracles.hpp"

using namespace cvr;

TEST(Tensor, ShapeInvariants) {
    Tensor t({2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_THROW(Tensor({2, 0}), Error);
    EXPECT_THROW(Tensor({1, 1, 1, 1, 1, 1, 1}), Error);
    EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), Error);
}

TEST(Tensor, BinaryFormatLayout) {
    Tensor t({2, 1}, {1.5f, -2.0f});
    std::ostringstream os;
    write_tensor(os, t);
    const std::string bytes = os.str();
    ASSERT_EQ(bytes.size(), 4u + 1u + 2 * 4u + 1u + 2 * 4u);
    EXPECT_EQ(bytes.substr(0, 4), "CVT1");
    EXPECT_EQ(static_cast<uint8_t>(bytes[4]), 2);
    EXPECT_EQ(static_cast<uint8_t>(bytes[5]), 2);  // extent 2, little-endian u32
    EXPECT_EQ(static_cast<uint8_t>(bytes[9]), 1);
    EXPECT_EQ(static_cast<uint8_t>(bytes[13]), 0);  // dtype f32

    QuantizedTensor q{{3}, {0, 7, 255}, 0.5f, -1.0f};
    std::ostringstream qs;
    write_tensor(qs, q);
    EXPECT_EQ(static_cast<uint8_t>(qs.str()[9]), 1);  // dtype u8
    std::istringstream qin(qs.str());
    auto back = read_quantized(qin);
    EXPECT_EQ(back.codes, q.codes);
    EXPECT_EQ(back.scale, 0.5f);
    EXPECT_EQ(back.zero_point, -1.0f);
}

TEST(Tensor, RejectsMalformedRecords) {
    std::istringstream bad_magic("XXXX");
    EXPECT_THROW(read_tensor(bad_magic), Error);
    Tensor t({4});
    std::ostringstream os;
    write_tensor(os, t);
    std::istringstream truncated(os.str().substr(0, os.str().size() - 3));
    EXPECT_THROW(read_tensor(truncated), Error);
}

TEST(Tensor, RoundTripProperty) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> rank_dist(1, 6), ext(1, 4);
        Shape shape(static_cast<std::size_t>(rank_dist(rng)));
        for (auto& e : shape) e = ext(rng);
        Tensor t = oracle::random_tensor(shape, rng);
        std::stringstream ss;
        write_tensor(ss, t);
        Tensor back = read_tensor(ss);
        EXPECT_EQ(back.shape(), t.shape());
        EXPECT_EQ(back.vec(), t.vec());
    }
}

TEST(ResizeBilinear, ConstantStaysConstant) {
    Tensor c({2, 5, 3}, 3.0f);
    for (auto [h, w] : {std::pair{1, 1}, {4, 7}, {11, 2}, {5, 3}}) {
        Tensor r = resize_bilinear(c, h, w);
        for (float v : r.values()) EXPECT_EQ(v, 3.0f);
    }
}

TEST(ResizeBilinear, IdentityIsBitwiseCopy) {
    std::mt19937_64 rng(1);
    Tensor x = oracle::random_tensor({3, 6, 5}, rng);
    Tensor r = resize_bilinear(x, 6, 5);
    EXPECT_EQ(r.vec(), x.vec());
}

TEST(ResizeBilinear, TwoByTwoUpsampleMatchesPointwiseOracle) {
    Tensor g({1, 2, 2}, {0.0f, 1.0f, 2.0f, 3.0f});
    Tensor r = resize_bilinear(g, 4, 4);
    // Frozen from an independent pointwise evaluation of the align_corners=false formula.
    const float expected[16] = {0.0f, 0.25f, 0.75f, 1.0f, 0.5f, 0.75f, 1.25f, 1.5f,
                                1.5f, 1.75f, 2.25f, 2.5f, 2.0f, 2.25f, 2.75f, 3.0f};
    for (int i = 0; i < 16; ++i) EXPECT_NEAR(r[static_cast<std::size_t>(i)], expected[i], 1e-6f);
    Tensor o = oracle::bilinear_pointwise(g, 4, 4);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(r[i], o[i], 1e-6f);
}

TEST(ResizeBilinear, RandomSizesMatchOracle) {
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> ext(1, 9);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor x = oracle::random_tensor({2, ext(rng), ext(rng)}, rng);
        const int oh = ext(rng), ow = ext(rng);
        Tensor r = resize_bilinear(x, oh, ow);
        Tensor o = oracle::bilinear_pointwise(x, oh, ow);
        for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(r[i], o[i], 1e-5f);
    }
}

TEST(ResizeBilinear, BackwardIsAdjoint) {
    std::mt19937_64 rng(4);
    Tensor x = oracle::random_tensor({2, 3, 5}, rng);
    Tensor g = oracle::random_tensor({2, 7, 4}, rng);
    // <resize(x), g> == <x, resize^T(g)>
    const double lhs = dot(resize_bilinear(x, 7, 4).values(), g.values());
    const double rhs = dot(x.values(), resize_bilinear_backward(g, 3, 5).values());
    EXPECT_NEAR(lhs, rhs, 1e-4);
}

TEST(ResizeBilinear, Errors) {
    Tensor x({1, 2, 2});
    EXPECT_THROW(resize_bilinear(x, 0, 3), Error);
    EXPECT_THROW(resize_bilinear(Tensor({2, 2}), 2, 2), Error);
}

TEST(Conv2d, OneByOneIdentity) {
    std::mt19937_64 rng(2);
    Tensor x = oracle::random_tensor({1, 4, 5}, rng);
    Tensor k({1, 1, 1, 1}, 1.0f);
    EXPECT_EQ(conv2d(x, k, 1, 0).vec(), x.vec());
}

TEST(Conv2d, OverlapCounting) {
    Tensor x({1, 3, 3}, 1.0f);
    Tensor k({1, 1, 3, 3}, 1.0f);
    Tensor y = conv2d(x, k, 1, 1);
    EXPECT_EQ(y[4], 9.0f);
    EXPECT_EQ(y[0], 4.0f);
    EXPECT_EQ(y[2], 4.0f);
    EXPECT_EQ(y[6], 4.0f);
    EXPECT_EQ(y[8], 4.0f);
    EXPECT_EQ(y[1], 6.0f);
}

TEST(Conv2d, StridedMatchesNaive) {
    std::mt19937_64 rng(5);
    Tensor x = oracle::random_tensor({3, 5, 5}, rng);
    Tensor k = oracle::random_tensor({4, 3, 3, 3}, rng);
    Tensor y = conv2d(x, k, 2, 0);
    Tensor o = oracle::conv2d_naive(x, k, 2, 0);
    ASSERT_EQ(y.shape(), o.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], o[i], 1e-5f);
}

TEST(Conv2d, RandomInstancesMatchNaive) {
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<int> ext(1, 8), ch(1, 3), kern(0, 1), strd(1, 2);
    int checked = 0;
    while (checked < 100) {
        const int kh = 2 * kern(rng) + 1, kw = 2 * kern(rng) + 1;
        const int h = ext(rng), w = ext(rng), stride = strd(rng);
        const int pad = kern(rng);
        if (h + 2 * pad < kh || w + 2 * pad < kw) continue;
        Tensor x = oracle::random_tensor({ch(rng), h, w}, rng);
        Tensor k = oracle::random_tensor({ch(rng), x.dim(0), kh, kw}, rng);
        Tensor y = conv2d(x, k, stride, pad);
        Tensor o = oracle::conv2d_naive(x, k, stride, pad);
        ASSERT_EQ(y.shape(), o.shape());
        for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], o[i], 1e-5f);
        ++checked;
    }
}

TEST(Conv2d, ChannelMismatchThrows) {
    EXPECT_THROW(conv2d(Tensor({2, 3, 3}), Tensor({1, 3, 3, 3}), 1, 1), Error);
    EXPECT_THROW(conv2d(Tensor({1, 3, 3}), Tensor({1, 1, 2, 2}), 1, 1), Error);
}

TEST(Conv2d, Reproducible) {
    std::mt19937_64 rng(8);
    Tensor x = oracle::random_tensor({3, 6, 6}, rng);
    Tensor k = oracle::random_tensor({2, 3, 3, 3}, rng);
    EXPECT_EQ(conv2d(x, k, 1, 1).vec(), conv2d(x, k, 1, 1).vec());
}

TEST(Conv2d, GradientsPassFiniteDifferences) {
    std::mt19937_64 rng(10);
    Tensor x = oracle::random_tensor({2, 5, 4}, rng);
    Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng);
    Tensor b = oracle::random_tensor({3}, rng);
    Tensor wout = oracle::random_tensor({3, 3, 2}, rng);
    auto loss = [&](const Tensor& xx, const Tensor& kk, const Tensor& bb) {
        return static_cast<double>(dot(conv2d(xx, kk, 2, 1, &bb).values(), wout.values()));
    };
    auto g = conv2d_backward(x, k, 2, 1, wout);
    auto rx = grad_check([&](const Tensor& t) { return loss(t, k, b); }, x, g.input, 1e-3);
    auto rk = grad_check([&](const Tensor& t) { return loss(x, t, b); }, k, g.kernel, 1e-3);
    auto rb = grad_check([&](const Tensor& t) { return loss(x, k, t); }, b, g.bias, 1e-3);
    EXPECT_LT(rx.max_rel_diff, 1e-3);
    EXPECT_LT(rk.max_rel_diff, 1e-3);
    EXPECT_LT(rb.max_rel_diff, 1e-3);
}

TEST(GemPool, ConstantMap) {
    Tensor x({2, 3, 3}, 0.7f);
    for (float p : {1.0f, 3.0f, 6.5f}) {
        Tensor y = gem_pool(x, p);
        EXPECT_NEAR(y[0], 0.7f, 1e-6f);
        EXPECT_NEAR(y[1], 0.7f, 1e-6f);
    }
}

TEST(GemPool, KnownValues) {
    Tensor x({1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    EXPECT_NEAR(gem_pool(x, 1.0f)[0], 2.5f, 1e-6f);
    // ((1 + 8 + 27 + 64) / 4)^(1/3) = 25^(1/3)
    EXPECT_NEAR(gem_pool(x, 3.0f)[0], 2.9240177f, 1e-5f);
}

TEST(GemPool, PowerOneIsMean) {
    std::mt19937_64 rng(11);
    Tensor x = oracle::random_tensor({4, 5, 6}, rng, 0.01f, 2.0f);
    Tensor y = gem_pool(x, 1.0f);
    for (int c = 0; c < 4; ++c) {
        double mean = 0.0;
        for (int i = 0; i < 30; ++i) mean += x[static_cast<std::size_t>(c * 30 + i)];
        EXPECT_NEAR(y[static_cast<std::size_t>(c)], mean / 30.0, 1e-6);
    }
}

TEST(GemPool, ClampKeepsZerosFinite) {
    Tensor x({1, 2, 2});
    Tensor y = gem_pool(x, 3.0f);
    EXPECT_TRUE(std::isfinite(y[0]));
    EXPECT_NEAR(y[0], kGemClamp, 1e-9f);
}

TEST(GemPool, GradientsPassFiniteDifferences) {
    std::mt19937_64 rng(12);
    Tensor x = oracle::random_tensor({3, 4, 4}, rng, 0.1f, 2.0f);
    Tensor w = oracle::random_tensor({3}, rng);
    const float p = 3.0f;
    auto g = gem_pool_backward(x, p, w);
    auto r = grad_check([&](const Tensor& t) { return static_cast<double>(dot(gem_pool(t, p).values(), w.values())); },
                        x, g.input, 1e-3);
    EXPECT_LT(r.max_rel_diff, 1e-2);
    Tensor pt({1}, {p});
    Tensor gp({1}, {g.power});
    auto rp = grad_check(
        [&](const Tensor& t) { return static_cast<double>(dot(gem_pool(x, t[0]).values(), w.values())); }, pt, gp, 1e-3);
    EXPECT_LT(rp.max_rel_diff, 1e-2);
}

TEST(L2Normalize, KnownValues) {
    auto n = l2_normalize(Tensor({2}, {3.0f, 4.0f}));
    EXPECT_FALSE(n.degenerate);
    EXPECT_NEAR(n.value[0], 0.6f, 1e-7f);
    EXPECT_NEAR(n.value[1], 0.8f, 1e-7f);
    auto u = l2_normalize(Tensor({3}, {0.0f, 1.0f, 0.0f}));
    EXPECT_EQ(u.value.vec(), (std::vector<float>{0.0f, 1.0f, 0.0f}));
}

TEST(L2Normalize, DegenerateInput) {
    auto n = l2_normalize(Tensor({4}));
    EXPECT_TRUE(n.degenerate);
    for (float v : n.value.values()) EXPECT_EQ(v, 0.0f);
}

TEST(L2Normalize, UnitNormAndIdempotent) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = oracle::random_tensor({2048}, rng);
        auto n = l2_normalize(x);
        EXPECT_NEAR(l2_norm(n.value.values()), 1.0f, 1e-6f);
        auto nn = l2_normalize(n.value);
        for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(nn.value[i], n.value[i], 1e-6f);
    }
}

TEST(L2Normalize, GradientsPassFiniteDifferences) {
    std::mt19937_64 rng(14);
    Tensor x = oracle::random_tensor({16}, rng);
    Tensor w = oracle::random_tensor({16}, rng);
    auto g = l2_normalize_backward(l2_normalize(x), w);
    auto r = grad_check([&](const Tensor& t) { return static_cast<double>(dot(l2_normalize(t).value.values(), w.values())); },
                        x, g, 1e-3);
    EXPECT_LT(r.max_rel_diff, 1e-2);
}

TEST(GradCheck, SumHasUnitGradient) {
    std::mt19937_64 rng(15);
    Tensor x = oracle::random_tensor({10}, rng);
    auto r = grad_check(
        [](const Tensor& t) {
            double s = 0.0;
            for (float v : t.values()) s += v;
            return s;
        },
        x, Tensor({10}, 1.0f), 1e-3);
    EXPECT_LT(r.max_abs_diff, 1e-6);
    EXPECT_EQ(r.probe_count, 10);
}

TEST(GradCheck, QuadraticIsExact) {
    std::mt19937_64 rng(16);
    Tensor x = oracle::random_tensor({50}, rng);
    Tensor g = x;
    g *= 2.0f;
    auto r = grad_check(
        [](const Tensor& t) {
            double s = 0.0;
            for (float v : t.values()) s += static_cast<double>(v) * v;
            return s;
        },
        x, g, 1e-3, 20);
    EXPECT_LT(r.max_rel_diff, 1e-3);
    EXPECT_EQ(r.probe_count, 20);
}

TEST(GradCheck, Errors) {
    Tensor x({3}, 1.0f);
    auto f = [](const Tensor&) { return std::nan(""); };
    EXPECT_THROW(grad_check(f, x, x, 1e-3), Error);
    EXPECT_THROW(grad_check([](const Tensor&) { return 0.0; }, x, x, 0.5), Error);
    EXPECT_THROW(grad_check([](const Tensor&) { return 0.0; }, x, Tensor({2}), 1e-3), Error);
}
