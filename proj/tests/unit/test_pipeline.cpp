#include <gtest/gtest.h>

#include <cmath>

#include "maskrestore/pipeline.hpp"
#include "oracles.hpp"
#include "scenarios.hpp"

using namespace maskrestore;
using maskrestore::testing::T64;

namespace {

using K = DegradationKind;

std::vector<ImagePair> tiny_set(std::uint64_t seed, std::size_t count = 8, std::size_t size = 16) {
    const std::vector<DegradationSampler> mix{DegradationSampler::training_range(K::gaussian_noise),
                                              DegradationSampler::training_range(K::jpeg)};
    return make_training_set(count, size, seed, mix);
}

RestorerConfig small_restorer() {
    RestorerConfig rc;
    rc.base_channels = 4;
    return rc;
}

Stage2 small_stage2(std::uint64_t seed) {
    ExtractorConfig ec;
    ec.channels = {4, 4, 8, 8, 8, 8};
    Stage2 s2;
    s2.restorer = make_restorer<float>(small_restorer(), seed);
    s2.extractor = make_extractor<float>(ec, seed);
    s2.fusion = make_fusion(s2.extractor, s2.restorer, seed);
    return s2;
}

}  // namespace

TEST(Schedule, EndpointsAndMonotone) {
    ScheduleSpec spec;
    spec.total_steps = 1000;
    EXPECT_DOUBLE_EQ(lr_at(0, spec), 2e-4);
    EXPECT_DOUBLE_EQ(lr_at(1000, spec), 1e-6);
    EXPECT_NEAR(lr_at(500, spec), 0.5 * (2e-4 + 1e-6), 1e-18);
    for (std::size_t s = 1; s <= 1000; ++s) EXPECT_LE(lr_at(s, spec), lr_at(s - 1, spec));
    EXPECT_THROW(lr_at(1001, spec), std::out_of_range);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
    ParamSet<double> p;
    p.add("a", T64::from({2}, {1.0, 2.0}, true), std::nullopt);
    p.add("b", T64::from({2}, {5.0, 5.0}, true), std::nullopt);
    sum(mul(p.get("a").weight, T64::from({2}, {2.0, -3.0}))).backward();
    AdamState<double> st;
    ScheduleSpec spec;
    spec.eps = 0.0;
    adam_step(p, st, 0.1, spec);
    const auto a = p.get("a").weight.to_vector();
    EXPECT_NEAR(a[0], 0.9, 1e-12);
    EXPECT_NEAR(a[1], 2.1, 1e-12);
    EXPECT_EQ(p.get("b").weight.to_vector(), (std::vector<double>{5.0, 5.0}));
}

TEST(Adam, ZeroGradientLeavesParametersFixed) {
    ParamSet<double> p;
    p.add("a", T64::from({2}, {1.0, -1.0}, true), std::nullopt);
    sum(mul(p.get("a").weight, T64::zeros({2}))).backward();
    AdamState<double> st;
    adam_step(p, st, 0.1, ScheduleSpec{});
    EXPECT_EQ(p.get("a").weight.to_vector(), (std::vector<double>{1.0, -1.0}));
}

TEST(Adam, FrozenGroupUntouched) {
    ParamSet<double> p;
    p.add("a", T64::from({2}, {1.0, 1.0}, true), std::nullopt);
    p.add("b", T64::from({2}, {1.0, 1.0}, true), std::nullopt);
    p.set_trainable({"b"}, false);
    sum(add(p.get("a").weight, p.get("b").weight)).backward();
    AdamState<double> st;
    adam_step(p, st, 0.1, ScheduleSpec{});
    EXPECT_NE(p.get("a").weight.to_vector(), (std::vector<double>{1.0, 1.0}));
    EXPECT_EQ(p.get("b").weight.to_vector(), (std::vector<double>{1.0, 1.0}));
}

TEST(Adam, NonFiniteGradientRejectsWholeStep) {
    ParamSet<double> p;
    p.add("a", T64::from({1}, {1.0}, true), std::nullopt);
    p.add("b", T64::from({1}, {0.0}, true), std::nullopt);
    sum(add(p.get("a").weight, div(T64::from({1}, {1.0}), p.get("b").weight))).backward();
    AdamState<double> st;
    EXPECT_THROW(adam_step(p, st, 0.1, ScheduleSpec{}), NonFiniteGradient);
    EXPECT_EQ(p.get("a").weight.at(0), 1.0);
    EXPECT_EQ(st.step, 0u);
}

TEST(Pretrain, DeterministicForSeed) {
    const auto data = tiny_set(1);
    PretrainConfig cfg;
    cfg.steps = 3;
    cfg.batch = 2;
    cfg.schedule.total_steps = 3;
    AdaSamConfig ac;
    ac.dim = 16;
    ac.heads = 2;
    Stage1 a = make_stage1(small_restorer(), ac, 4), b = make_stage1(small_restorer(), ac, 4);
    const auto ra = pretrain(a, data, cfg), rb = pretrain(b, data, cfg);
    EXPECT_EQ(a.restorer.params.hash(), b.restorer.params.hash());
    EXPECT_EQ(a.adasam.params.hash(), b.adasam.params.hash());
    ASSERT_EQ(ra.curve.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(ra.curve[i].loss, rb.curve[i].loss);
    EXPECT_EQ(a.step, 3u);
}

TEST(Pretrain, EachLossMovesOnlyItsOwnParameters) {
    const auto r = maskrestore::testing::gradient_separation(10, 3);
    EXPECT_EQ(r.steps, 10u);
    EXPECT_EQ(r.restoration_leaks, 0u);
    EXPECT_EQ(r.mask_leaks, 0u);
    EXPECT_EQ(r.joint_mismatch, 0u);
    EXPECT_EQ(r.idle_steps, 0u);
}

TEST(Pretrain, EmptyDataRejected) {
    Stage1 s = make_stage1(small_restorer(), {}, 1);
    EXPECT_THROW(pretrain(s, std::vector<ImagePair>{}, PretrainConfig{}), std::invalid_argument);
}

TEST(Finetune, OnlySelectedGroupsChange) {
    auto s2 = small_stage2(2);
    const auto data = tiny_set(5, 8, 32);
    const auto selected = random_selection(s2.restorer, 30, 9);
    EXPECT_EQ(selected.size(), 7u);
    const auto before = maskrestore::testing::group_hashes(s2.restorer.params);
    const std::uint64_t fusion_before = s2.fusion.params.hash();
    const std::uint64_t extractor_before = s2.extractor.params.hash();
    FinetuneConfig cfg;
    cfg.steps = 3;
    cfg.batch = 2;
    cfg.schedule.total_steps = 3;
    finetune(s2, selected, data, cfg);
    const auto check = maskrestore::testing::freeze_check(before, s2.restorer.params, selected);
    EXPECT_TRUE(check.moved_frozen.empty());
    EXPECT_TRUE(check.unmoved_selected.empty());
    EXPECT_NE(s2.fusion.params.hash(), fusion_before);
    EXPECT_EQ(s2.extractor.params.hash(), extractor_before);
}

TEST(Finetune, WithoutFusionLeavesFusionUntouched) {
    auto s2 = small_stage2(3);
    const auto data = tiny_set(6, 8, 32);
    const std::uint64_t fusion_before = s2.fusion.params.hash();
    FinetuneConfig cfg;
    cfg.steps = 2;
    cfg.batch = 2;
    cfg.use_fusion = false;
    cfg.schedule.total_steps = 2;
    finetune(s2, {"intro"}, data, cfg);
    EXPECT_EQ(s2.fusion.params.hash(), fusion_before);
}

TEST(Selection, ReportMustNameEveryGroup) {
    const auto net = make_restorer<float>(small_restorer(), 1);
    std::vector<std::pair<std::string, double>> scores;
    for (const auto& n : net.params.names()) scores.emplace_back(n, 1.0);
    EXPECT_EQ(selection_from_report(rank_and_select(scores, 30), net).size(), 7u);
    auto renamed = scores;
    renamed[3].first = "enc9.conv1";
    EXPECT_THROW(selection_from_report(rank_and_select(renamed, 30), net), std::invalid_argument);
    scores.pop_back();
    EXPECT_THROW(selection_from_report(rank_and_select(scores, 30), net), std::invalid_argument);
}

TEST(Selection, RandomIsSeededSubset) {
    const auto net = make_restorer<float>(small_restorer(), 1);
    EXPECT_EQ(random_selection(net, 30, 4), random_selection(net, 30, 4));
    EXPECT_EQ(random_selection(net, 100, 4).size(), 22u);
    for (const auto& n : random_selection(net, 10, 5)) EXPECT_TRUE(net.params.contains(n));
}

TEST(TwinMask, ComposesTheTwoPasses) {
    const auto net = make_restorer<float>(small_restorer(), 4);
    const Image img = maskrestore::testing::random_image(3, 16, 16, 2);
    Rng rng(3);
    const Mask m = sample_mask(std::vector<double>(256, 1.0 / 256), 16, 16, 0.5, rng).mask;
    const auto [first, second] = twin_mask_pair(m);
    const auto a = restore_images(net, std::vector<Image>{apply_mask(img, first)});
    const auto b = restore_images(net, std::vector<Image>{apply_mask(img, second)});
    const Image out = twin_mask_infer(net, img, m);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 256; ++p)
            EXPECT_EQ(out.pixels[c * 256 + p], m[p] ? a[0].pixels[c * 256 + p] : b[0].pixels[c * 256 + p]);
    // Swapping the roles of the two masks gives the same composite.
    const Image swapped = twin_mask_infer(net, img, second);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) EXPECT_EQ(swapped.pixels[i], out.pixels[i]);
}

TEST(Evaluate, SingleKindHasZeroVariance) {
    const auto net = make_restorer<float>(small_restorer(), 1);
    const std::vector<K> kinds{K::gaussian_noise};
    const auto sets = make_eval_sets(kinds, 3, 16, 2);
    EvalOptions o;
    o.latent_cka = false;
    const auto r = evaluate(net, sets, o);
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.psnr_variance, 0.0);
    EXPECT_EQ(r.records[0].psnr, r.psnr_mean);
    EXPECT_EQ(r.records[0].kind, "gaussian_noise");
}

TEST(Evaluate, DeterministicAndCkaDiagonal) {
    const auto net = make_restorer<float>(small_restorer(), 1);
    const std::vector<K> kinds{K::gaussian_noise, K::pepper};
    const auto sets = make_eval_sets(kinds, 3, 16, 2);
    EvalOptions o;
    o.noise_reference = true;
    const auto a = evaluate(net, sets, o), b = evaluate(net, sets, o);
    EXPECT_EQ(a.psnr_mean, b.psnr_mean);
    ASSERT_EQ(a.cka.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a.cka[i][i], 1.0);
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a.cka[i][j], a.cka[j][i]);
    }
    o.mode = InferMode::twin;
    EXPECT_EQ(evaluate(net, sets, o).records.size(), 2u);
}

TEST(Evaluate, EmptyInputRejected) {
    const auto net = make_restorer<float>(small_restorer(), 1);
    EXPECT_THROW(evaluate(net, std::vector<EvalSet>{}, EvalOptions{}), std::invalid_argument);
    EXPECT_THROW(evaluate(net, std::vector<EvalSet>{{K::jpeg, {}}}, EvalOptions{}), std::invalid_argument);
}
