#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "maskrestore/masking.hpp"
#include "maskrestore/pipeline.hpp"
#include "oracles.hpp"

using namespace maskrestore;
using maskrestore::testing::T64;

TEST(MaskCount, FloorOfRatio) {
    EXPECT_EQ(mask_count(8, 8, 0.5), 32u);
    EXPECT_EQ(mask_count(3, 3, 0.5), 4u);
    EXPECT_EQ(mask_count(10, 10, 0.29), 29u);
    EXPECT_THROW(mask_count(8, 8, 0.0), std::invalid_argument);
    EXPECT_THROW(mask_count(8, 8, 1.0), std::invalid_argument);
}

TEST(MaskCount, SampledPlansHaveExactCount) {
    Rng pick(77);
    for (int t = 0; t < 50; ++t) {
        const std::size_t h = 1 + pick.index(24), w = 1 + pick.index(24);
        const double rho = pick.uniform(0.01, 0.99);
        const std::size_t expected = static_cast<std::size_t>(std::floor(static_cast<double>(h * w) * rho));
        std::vector<double> s(h * w);
        for (auto& v : s) v = pick.uniform(0.1, 1.0);
        const double total = std::accumulate(s.begin(), s.end(), 0.0);
        for (auto& v : s) v /= total;
        Rng rng(t, Stream::mask);
        const MaskPlan plan = sample_mask(s, h, w, rho, rng);
        EXPECT_EQ(plan.n_mask, expected);
        EXPECT_EQ(plan.indices.size(), expected);
        EXPECT_TRUE(std::adjacent_find(plan.indices.begin(), plan.indices.end()) == plan.indices.end());
        std::size_t set = 0;
        for (std::size_t i = 0; i < plan.mask.size(); ++i) {
            const bool listed = std::binary_search(plan.indices.begin(), plan.indices.end(), i);
            EXPECT_EQ(plan.mask[i] == 1, listed);
            set += plan.mask[i];
        }
        EXPECT_EQ(set, expected);
    }
}

TEST(ImportanceMap, UniformAndOneHot) {
    const std::vector<double> uniform(16, 1.0 / 16.0);
    for (double v : importance_map(uniform, 32, 32, 8)) EXPECT_DOUBLE_EQ(v, 1.0 / 1024.0);
    std::vector<double> hot(16, 0.0);
    hot[5] = 1.0;
    const auto s = importance_map(hot, 32, 32, 8);
    const auto tok = pixel_tokens(32, 32, 8);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(s[i], tok[i] == 5 ? 1.0 / 64.0 : 0.0);
}

TEST(ImportanceMap, RandomScoresPatchConstantAndNormalized) {
    Rng rng(3);
    std::vector<double> S(12);
    for (auto& v : S) v = rng.uniform();
    const double total = std::accumulate(S.begin(), S.end(), 0.0);
    for (auto& v : S) v /= total;
    const auto s = importance_map(S, 24, 32, 8);
    EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), 1.0, 1e-9);
    const auto tok = pixel_tokens(24, 32, 8);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(s[i], S[tok[i]] / 64.0);
    const auto st = importance_map(T64::from({12}, S), 24, 32, 8).to_vector();
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(st[i], s[i]);
}

TEST(SampleMask, FourPixelEnumeration) {
    // P({0,1}) over both draw orders: 0.4*(0.3/0.6) + 0.3*(0.4/0.7).
    const double oracle = 0.4 * (0.3 / 0.6) + 0.3 * (0.4 / 0.7);
    const std::vector<double> s{0.4, 0.3, 0.2, 0.1};
    const int draws = 100000;
    int hits = 0;
    for (int d = 0; d < draws; ++d) {
        Rng rng(11, Stream::mask, d);
        const MaskPlan p = sample_mask(s, 2, 2, 0.5, rng);
        hits += p.mask[0] && p.mask[1];
    }
    EXPECT_NEAR(static_cast<double>(hits) / draws, oracle, 0.01);
}

TEST(SampleMask, InclusionOrderFollowsScores) {
    const std::vector<double> s{0.4, 0.3, 0.2, 0.1};
    std::vector<int> count(4, 0);
    for (int d = 0; d < 10000; ++d) {
        Rng rng(d, Stream::mask);
        const MaskPlan p = sample_mask(s, 2, 2, 0.5, rng);
        for (std::size_t i = 0; i < 4; ++i) count[i] += p.mask[i];
    }
    EXPECT_GT(count[0], count[1]);
    EXPECT_GT(count[1], count[2]);
    EXPECT_GT(count[2], count[3]);
}

TEST(SampleMask, UniformFrequencyNearRatio) {
    const std::size_t n = 16;
    const std::vector<double> s(n, 1.0 / n);
    std::vector<int> count(n, 0);
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) {
        Rng rng(5, Stream::mask, d);
        const MaskPlan p = sample_mask(s, 4, 4, 0.5, rng);
        for (std::size_t i = 0; i < n; ++i) count[i] += p.mask[i];
    }
    const double sigma = std::sqrt(0.5 * 0.5 / draws);
    for (int c : count) EXPECT_NEAR(static_cast<double>(c) / draws, 0.5, 3 * sigma);
}

TEST(SampleMask, DeterministicAndSkipsZeroProbability) {
    std::vector<double> s(64, 0.0);
    for (std::size_t i = 0; i < 40; ++i) s[i] = 1.0 / 40.0;
    Rng a(9), b(9);
    const MaskPlan pa = sample_mask(s, 8, 8, 0.5, a), pb = sample_mask(s, 8, 8, 0.5, b);
    EXPECT_EQ(pa.indices, pb.indices);
    for (std::size_t i : pa.indices) EXPECT_LT(i, 40u);
    std::vector<double> sparse(64, 0.0);
    for (std::size_t i = 0; i < 10; ++i) sparse[i] = 0.1;
    Rng c(1);
    EXPECT_THROW(sample_mask(sparse, 8, 8, 0.5, c), std::invalid_argument);
}

TEST(ApplyMask, IdentityZeroAndPartition) {
    const Image img = maskrestore::testing::random_image(3, 4, 4, 2);
    EXPECT_EQ(apply_mask(img, Mask(16, 0)).pixels, img.pixels);
    for (double v : apply_mask(img, Mask(16, 1)).pixels) EXPECT_EQ(v, 0.0);
    Mask m(16, 0);
    for (std::size_t i = 0; i < 16; i += 3) m[i] = 1;
    const auto [a, b] = twin_mask_pair(m);
    const Image ia = apply_mask(img, a), ib = apply_mask(img, b);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) {
            const std::size_t e = c * 16 + i;
            EXPECT_EQ(a[i] ? ib.pixels[e] : ia.pixels[e], img.pixels[e]);
            EXPECT_EQ(a[i] ? ia.pixels[e] : ib.pixels[e], 0.0);
            EXPECT_EQ(a[i] ^ b[i], 1);
        }
}

TEST(TwinMask, ComplementProperties) {
    const auto [z, o] = twin_mask_pair(Mask(6, 0));
    EXPECT_EQ(z, Mask(6, 0));
    EXPECT_EQ(o, Mask(6, 1));
    Rng rng(2);
    const MaskPlan p = sample_mask(std::vector<double>(64, 1.0 / 64), 8, 8, 0.5, rng);
    const Mask comp = p.complement();
    EXPECT_EQ(std::count(comp.begin(), comp.end(), 1), 32);
}

TEST(RestorationLoss, Examples) {
    const T64 clean = maskrestore::testing::random_tensor({2, 3, 4, 4}, 1);
    Mask m(16, 0);
    m[3] = m[7] = m[12] = 1;
    const std::vector<Mask> masks{m, m};
    const T64 sup = mask_tensor<double>(masks, 4, 4);
    EXPECT_EQ(restoration_loss(clean, clean, sup).item(), 0.0);
    EXPECT_NEAR(restoration_loss(add_scalar(clean, 1.0), clean, sup).item(), 1.0, 1e-12);
    EXPECT_THROW(restoration_loss(clean, clean, mask_tensor<double>(std::vector<Mask>{Mask(16, 0), Mask(16, 0)}, 4, 4)),
                 std::invalid_argument);
}

TEST(RestorationLoss, NoGradientAtUnsupervisedPixels) {
    const T64 clean = maskrestore::testing::random_tensor({1, 3, 4, 4}, 1);
    T64 pred = maskrestore::testing::random_tensor({1, 3, 4, 4}, 2);
    pred.set_requires_grad(true);
    Mask m(16, 0);
    m[0] = m[5] = m[10] = 1;
    restoration_loss(pred, clean, mask_tensor<double>(std::vector<Mask>{m}, 4, 4)).backward();
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) {
            const double g = pred.grad()[c * 16 + i];
            if (m[i])
                EXPECT_NE(g, 0.0);
            else
                EXPECT_EQ(g, 0.0);
        }
}

TEST(MaskLoss, ZeroErrorsAndDefaultWeight) {
    EXPECT_EQ(kDefaultMaskLossWeight, 1e-4);
    const T64 s = T64::from({4}, {0.25, 0.25, 0.25, 0.25}, true);
    const std::vector<std::size_t> region{0, 2};
    EXPECT_EQ(mask_loss(std::vector<double>(4, 0.0), s, region).item(), 0.0);
    const T64 zero = T64::from({4}, {0.5, 0.0, 0.5, 0.0});
    EXPECT_THROW(mask_loss(std::vector<double>(4, 1.0), zero, std::vector<std::size_t>{1}), std::domain_error);
}

TEST(MaskLoss, HighErrorPixelScoreRises) {
    // s = softmax(z); L = -w (e1 log s1 + e2 log s2) with e = (1, 0).
    // dL/dz1 = -w (1 - s1) < 0.
    const std::vector<double> errors{1.0, 0.0};
    const std::vector<std::size_t> region{0, 1};
    auto loss_at = [&](const std::vector<double>& z) {
        return mask_loss(errors, softmax(T64::from({2}, z), 0), region, 1.0).item();
    };
    T64 z = T64::from({2}, {0.0, 0.0}, true);
    mask_loss(errors, softmax(z, 0), region, 1.0).backward();
    EXPECT_LT(z.grad()[0], 0.0);
    EXPECT_NEAR(z.grad()[0], -0.5, 1e-12);
    const auto fd = finite_difference_gradient<double>(loss_at, {0.0, 0.0}, 1e-4);
    EXPECT_NEAR(fd[0], z.grad()[0], 1e-8);
    EXPECT_NEAR(fd[1], z.grad()[1], 1e-8);
}

TEST(MaskLoss, DetachedErrorsLeaveRestorerWithoutGradient) {
    RestorerConfig rc;
    rc.base_channels = 4;
    auto restorer = make_restorer<double>(rc, 1);
    auto adasam = make_adasam<double>({}, 1);
    const Image img = maskrestore::testing::random_image(3, 16, 16, 4);
    const T64 x = to_tensor<double>(img);
    const T64 pred = restorer_forward(restorer, x);
    const T64 scores = adasam_scores(adasam, x);
    const T64 map = importance_map(scores, 16, 16, 8);
    std::vector<std::size_t> region(128);
    std::iota(region.begin(), region.end(), 0);
    const auto errors = per_pixel_error(img, to_image(detach(pred)));
    mask_loss(errors, map, region).backward();
    for (const auto& g : restorer.params.groups()) EXPECT_FALSE(g.weight.has_grad()) << g.name;
    bool any = false;
    for (const auto& g : adasam.params.groups())
        if (g.weight.has_grad())
            for (double v : g.weight.grad()) any |= v != 0.0;
    EXPECT_TRUE(any);
}

TEST(MaskLoss, RestorationLossLeavesAdaSamWithoutGradient) {
    RestorerConfig rc;
    rc.base_channels = 4;
    auto restorer = make_restorer<double>(rc, 1);
    auto adasam = make_adasam<double>({}, 1);
    const Image img = maskrestore::testing::random_image(3, 16, 16, 4);
    const T64 scores = adasam_scores(adasam, to_tensor<double>(img));
    std::vector<double> sv(scores.data().begin(), scores.data().end());
    Rng rng(1);
    const MaskPlan plan = plan_from_scores(sv, 16, 16, 8, 0.5, rng);
    const T64 pred = restorer_forward(restorer, to_batch<double>(std::vector<Image>{apply_mask(img, plan.mask)}));
    restoration_loss(pred, to_batch<double>(std::vector<Image>{img}),
                     mask_tensor<double>(std::vector<Mask>{plan.mask}, 16, 16))
        .backward();
    for (const auto& g : adasam.params.groups()) EXPECT_FALSE(g.weight.has_grad()) << g.name;
    EXPECT_TRUE(restorer.params.get("intro").weight.has_grad());
}

TEST(WriteMask, EightBitVisibleZeroMaskedFull) {
    const auto dir = std::filesystem::temp_directory_path() / "maskrestore_mask_test";
    std::filesystem::create_directories(dir);
    Mask m{0, 1, 1, 0, 0, 1};
    write_mask(dir / "m.pgm", m, 2, 3);
    const Image back = read_pnm(dir / "m.pgm");
    ASSERT_EQ(back.channels, 1u);
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(back.pixels[i], m[i] ? 1.0 : 0.0);
    std::filesystem::remove_all(dir);
}
