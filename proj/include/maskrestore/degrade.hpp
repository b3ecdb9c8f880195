#pragma once

// Procedural clean images and paired degradation synthesis.
//
// Noise kinds draw from exactly one RNG stream derived from the spec seed;
// blur and JPEG are pure functions of the image and parameter.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maskrestore/image.hpp"

namespace maskrestore {

enum class DegradationKind { gaussian_noise, gaussian_blur, jpeg, pepper, speckle, poisson };

std::string kind_name(DegradationKind kind);
DegradationKind parse_kind(const std::string& name);  // throws on unknown names

struct DegradationSpec {
    DegradationKind kind = DegradationKind::gaussian_noise;
    double param = 15.0;  // sigma (8-bit units) | blur sigma | quality | density | speckle sigma | poisson peak
    std::uint64_t seed = 0;
};

struct ImagePair {
    Image clean;
    Image degraded;
    DegradationSpec spec;
};

// Parameter drawn uniformly from [lo, hi]; lo == hi gives a fixed level.
struct DegradationSampler {
    DegradationKind kind;
    double lo;
    double hi;

    static DegradationSampler fixed(DegradationKind kind, double value) { return {kind, value, value}; }
    // Training ranges: noise sigma (0,50], blur sigma [0.1,3.1], JPEG q [20,90].
    static DegradationSampler training_range(DegradationKind kind);
    // Single evaluation level per kind.
    static DegradationSampler test_level(DegradationKind kind);
};

inline constexpr std::size_t kBlurKernelSize = 15;

// Gradients, convex polygons and sinusoidal textures in three frequency bands.
Image gen_clean(std::uint64_t seed, std::size_t size);

// One of `kTextureClasses` procedural texture families, used to train the extractor.
inline constexpr std::size_t kTextureClasses = 8;
Image gen_texture(std::size_t texture_class, std::uint64_t seed, std::size_t size);

Image add_gaussian_noise(const Image& image, double sigma, std::uint64_t seed);
std::vector<double> gaussian_kernel(std::size_t size, double sigma);
Image gaussian_blur(const Image& image, double sigma, std::size_t kernel_size = kBlurKernelSize);
Image jpeg_artifact(const Image& image, int quality);
Image ood_noise(const Image& image, DegradationKind kind, double param, std::uint64_t seed);

// Dispatch on spec.kind with range validation.
Image degrade(const Image& image, const DegradationSpec& spec);

// Standard JPEG luminance/chrominance tables scaled by quality.
std::vector<int> jpeg_quant_table(bool chroma, int quality);

// One pair per seed; the kind is drawn uniformly from the mix.
std::vector<ImagePair> make_pair_batch(std::span<const std::uint64_t> seeds, std::span<const DegradationSampler> mix,
                                       std::size_t size);

// Directory of 8-bit P6 files plus manifest.txt, one line per pair:
//   <clean file> <degraded file> <kind> <param> <seed>
void write_dataset(const std::filesystem::path& dir, std::span<const ImagePair> pairs);
std::vector<ImagePair> read_dataset(const std::filesystem::path& dir);

}  // namespace maskrestore
