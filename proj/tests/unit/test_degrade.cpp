#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numeric>

#include "maskrestore/degrade.hpp"
#include "maskrestore/metrics.hpp"
#include "oracles.hpp"

using namespace maskrestore;

namespace {

using K = DegradationKind;

Image constant(double v, std::size_t size = 64) { return Image(3, size, size, v); }

void expect_unit_range(const Image& img) {
    for (double v : img.pixels) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
    }
}

// Power of the luma DFT split into radial bands of the normalized frequency.
std::array<double, 3> band_power(const Image& img) {
    const auto y = luma(img);
    const std::size_t n = img.height;
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    std::array<double, 3> bands{};
    for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = 0; v < n; ++v) {
            std::complex<double> acc = 0.0;
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c) {
                    const double ang = -2.0 * M_PI * static_cast<double>(u * r + v * c) / static_cast<double>(n);
                    acc += (y[r * n + c] - mean) * std::polar(1.0, ang);
                }
            const double fu = static_cast<double>(std::min(u, n - u)) / static_cast<double>(n);
            const double fv = static_cast<double>(std::min(v, n - v)) / static_cast<double>(n);
            const double f = std::sqrt(fu * fu + fv * fv);
            if (f == 0.0) continue;
            bands[f < 0.1 ? 0 : (f < 0.25 ? 1 : 2)] += std::norm(acc);
        }
    return bands;
}

}  // namespace

TEST(Kinds, NamesRoundTrip) {
    for (K k : {K::gaussian_noise, K::gaussian_blur, K::jpeg, K::pepper, K::speckle, K::poisson})
        EXPECT_EQ(parse_kind(kind_name(k)), k);
    EXPECT_THROW(parse_kind("rain"), std::invalid_argument);
}

TEST(GenClean, DeterministicAndInRange) {
    const Image a = gen_clean(12, 32), b = gen_clean(12, 32);
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_NE(a.pixels, gen_clean(13, 32).pixels);
    expect_unit_range(a);
    EXPECT_THROW(gen_clean(1, 30), std::invalid_argument);
}

TEST(GenClean, EnergyInEveryFrequencyBand) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto bands = band_power(gen_clean(seed, 32));
        const double total = bands[0] + bands[1] + bands[2];
        for (double b : bands) EXPECT_GT(b / total, 1e-3) << "seed " << seed;
    }
}

TEST(GaussianNoise, EmpiricalStd) {
    const Image gray = constant(0.5);
    const Image noisy = add_gaussian_noise(gray, 15.0, 4);
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
        const double d = (noisy.pixels[i] - gray.pixels[i]) * 255.0;
        s += d;
        ss += d * d;
    }
    const double n = static_cast<double>(gray.pixels.size());
    EXPECT_NEAR(std::sqrt(ss / n - (s / n) * (s / n)), 15.0, 0.5);
}

TEST(GaussianNoise, ClipsAndValidatesSigma) {
    const Image white = constant(1.0, 16);
    expect_unit_range(add_gaussian_noise(white, 50.0, 1));
    EXPECT_THROW(add_gaussian_noise(white, 0.0, 1), std::invalid_argument);
    EXPECT_THROW(add_gaussian_noise(white, 50.5, 1), std::invalid_argument);
    EXPECT_EQ(add_gaussian_noise(white, 10.0, 3).pixels, add_gaussian_noise(white, 10.0, 3).pixels);
}

TEST(GaussianBlur, KernelMass) {
    for (double sigma : {0.1, 0.5, 1.6, 2.0, 3.1}) {
        const auto k = gaussian_kernel(kBlurKernelSize, sigma);
        double mass2d = 0.0;
        for (double a : k)
            for (double b : k) mass2d += a * b;
        EXPECT_NEAR(mass2d, 1.0, 1e-9);
    }
    EXPECT_THROW(gaussian_kernel(14, 1.0), std::invalid_argument);
    EXPECT_THROW(gaussian_blur(constant(0.5, 16), 1.0, 14), std::invalid_argument);
    EXPECT_THROW(gaussian_blur(constant(0.5, 16), 3.5), std::invalid_argument);
}

TEST(GaussianBlur, ConstantUnchangedAndSmallSigmaNearIdentity) {
    const Image c = constant(0.3, 16);
    const Image b = gaussian_blur(c, 2.5);
    for (std::size_t i = 0; i < c.pixels.size(); ++i) EXPECT_NEAR(b.pixels[i], 0.3, 1e-12);
    const Image img = gen_clean(5, 32);
    EXPECT_GT(psnr(img, gaussian_blur(img, 0.1)).db, 50.0);
}

TEST(GaussianBlur, MatchesDirectTwoDimensionalConvolution) {
    const Image img = maskrestore::testing::random_image(2, 20, 18, 3);
    const Image fast = gaussian_blur(img, 2.0, 15);
    const int r = 7;
    auto refl = [](int i, int n) {
        while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
        return i;
    };
    std::vector<double> g(15);
    for (int i = -r; i <= r; ++i) g[static_cast<std::size_t>(i + r)] = std::exp(-i * i / 8.0);
    const double gs = std::accumulate(g.begin(), g.end(), 0.0);
    for (std::size_t c = 0; c < 2; ++c)
        for (int y = 0; y < 20; ++y)
            for (int x = 0; x < 18; ++x) {
                double acc = 0.0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx)
                        acc += g[static_cast<std::size_t>(dy + r)] * g[static_cast<std::size_t>(dx + r)] / (gs * gs) *
                               img.at(c, static_cast<std::size_t>(refl(y + dy, 20)), static_cast<std::size_t>(refl(x + dx, 18)));
                EXPECT_NEAR(fast.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)), acc, 1e-12);
            }
}

TEST(Jpeg, QuantTables) {
    EXPECT_EQ(jpeg_quant_table(false, 50)[0], 16);
    EXPECT_EQ(jpeg_quant_table(true, 50)[0], 17);
    for (int v : jpeg_quant_table(false, 100)) EXPECT_EQ(v, 1);
    EXPECT_EQ(jpeg_quant_table(false, 10)[0], 80);  // 16 * 500 / 100
    EXPECT_EQ(jpeg_quant_table(false, 75)[0], 8);   // 16 * 50 / 100
    EXPECT_THROW(jpeg_quant_table(false, 0), std::invalid_argument);
    EXPECT_THROW(jpeg_quant_table(false, 101), std::invalid_argument);
}

TEST(Jpeg, NearLosslessAtQuality100) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const Image img = gen_clean(seed, 32);
        EXPECT_GE(psnr(img, jpeg_artifact(img, 100)).db, 45.0);
    }
}

TEST(Jpeg, ConstantImageStaysConstant) {
    const Image c = constant(0.6, 16);
    const Image j = jpeg_artifact(c, 50);
    // DC rounding moves each YCbCr plane by at most q/16 levels; RGB mixes up to 1 + 1.772 of them.
    const double tol = (1.0 + 1.772) * (17.0 / 16.0) / 255.0;
    for (double v : j.pixels) EXPECT_NEAR(v, 0.6, tol);
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 1; i < c.plane(); ++i) EXPECT_NEAR(j.pixels[ch * c.plane() + i], j.pixels[ch * c.plane()], 1e-9);
}

TEST(Jpeg, LowerQualityLowerPsnr) {
    for (std::uint64_t seed : {4u, 5u}) {
        const Image img = gen_clean(seed, 32);
        EXPECT_LT(psnr(img, jpeg_artifact(img, 20)).db, psnr(img, jpeg_artifact(img, 90)).db);
    }
}

TEST(OodNoise, PepperFraction) {
    const Image gray = constant(0.5);
    const double d = 0.05;
    const Image p = ood_noise(gray, K::pepper, d, 7);
    std::size_t altered = 0;
    for (std::size_t i = 0; i < gray.plane(); ++i) altered += p.pixels[i] != 0.5;
    const double n = static_cast<double>(gray.plane());
    EXPECT_NEAR(static_cast<double>(altered) / n, d, 3.0 * std::sqrt(d * (1 - d) / n));
}

TEST(OodNoise, ZeroImagesStayZero) {
    const Image zero = constant(0.0, 16);
    for (double v : ood_noise(zero, K::poisson, 60, 1).pixels) EXPECT_EQ(v, 0.0);
    for (double v : ood_noise(zero, K::speckle, 0.3, 1).pixels) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(ood_noise(zero, K::jpeg, 30, 1), std::invalid_argument);
    EXPECT_THROW(ood_noise(zero, K::pepper, 0.6, 1), std::invalid_argument);
}

TEST(Degrade, EveryKindInRangeAndDeterministic) {
    const Image img = gen_clean(9, 32);
    for (K k : {K::gaussian_noise, K::gaussian_blur, K::jpeg, K::pepper, K::speckle, K::poisson}) {
        const auto level = DegradationSampler::test_level(k);
        const DegradationSpec spec{k, level.lo, 21};
        const Image a = degrade(img, spec), b = degrade(img, spec);
        expect_unit_range(a);
        EXPECT_EQ(a.pixels, b.pixels) << kind_name(k);
        EXPECT_NE(a.pixels, img.pixels) << kind_name(k);
    }
}

TEST(Degrade, BlurAndJpegIgnoreSeed) {
    const Image img = gen_clean(2, 32);
    EXPECT_EQ(degrade(img, {K::gaussian_blur, 1.0, 1}).pixels, degrade(img, {K::gaussian_blur, 1.0, 2}).pixels);
    EXPECT_EQ(degrade(img, {K::jpeg, 40, 1}).pixels, degrade(img, {K::jpeg, 40, 2}).pixels);
    EXPECT_NE(degrade(img, {K::gaussian_noise, 10, 1}).pixels, degrade(img, {K::gaussian_noise, 10, 2}).pixels);
}

TEST(PairBatch, SingleKindAndReproducible) {
    std::vector<std::uint64_t> seeds(20);
    std::iota(seeds.begin(), seeds.end(), 100);
    const std::vector<DegradationSampler> only{DegradationSampler::training_range(K::jpeg)};
    const auto a = make_pair_batch(seeds, only, 16);
    const auto b = make_pair_batch(seeds, only, 16);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].spec.kind, K::jpeg);
        EXPECT_GE(a[i].spec.param, 20.0);
        EXPECT_LE(a[i].spec.param, 90.0);
        EXPECT_EQ(a[i].degraded.pixels, b[i].degraded.pixels);
    }
}

TEST(PairBatch, KindFrequenciesUniform) {
    std::vector<std::uint64_t> seeds(3000);
    std::iota(seeds.begin(), seeds.end(), 1);
    const std::vector<DegradationSampler> mix{DegradationSampler::training_range(K::gaussian_noise),
                                              DegradationSampler::training_range(K::gaussian_blur),
                                              DegradationSampler::training_range(K::jpeg)};
    const auto pairs = make_pair_batch(seeds, mix, 8);
    std::array<double, 3> count{};
    for (const auto& p : pairs) count[static_cast<std::size_t>(p.spec.kind)] += 1;
    const double sigma = std::sqrt((1.0 / 3) * (2.0 / 3) / 3000.0);
    for (double c : count) EXPECT_NEAR(c / 3000.0, 1.0 / 3.0, 3 * sigma);
}

TEST(Dataset, WriteReadRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "maskrestore_dataset_test";
    std::filesystem::remove_all(dir);
    std::vector<std::uint64_t> seeds{5, 6, 7};
    const std::vector<DegradationSampler> mix{DegradationSampler::test_level(K::speckle)};
    const auto pairs = make_pair_batch(seeds, mix, 16);
    write_dataset(dir, pairs);
    const auto back = read_dataset(dir);
    ASSERT_EQ(back.size(), pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        EXPECT_EQ(back[i].spec.kind, pairs[i].spec.kind);
        EXPECT_EQ(back[i].spec.seed, pairs[i].spec.seed);
        EXPECT_DOUBLE_EQ(back[i].spec.param, pairs[i].spec.param);
        for (std::size_t p = 0; p < pairs[i].clean.pixels.size(); ++p)
            EXPECT_NEAR(back[i].degraded.pixels[p], pairs[i].degraded.pixels[p], 0.5 / 255.0 + 1e-12);
    }
    std::filesystem::remove_all(dir);
}
