#pragma once

// The three networks of the pipeline:
//  * Restorer   - 3-level conv encoder, latent block, 3-level decoder. There
//                 are no encoder/decoder skips and no input-to-output
//                 residual: the output is M(x), residuals stay inside blocks.
//  * AdaSam     - patch embedding, one multi-head self-attention block and a
//                 linear scorer; emits one softmax score per token.
//  * Extractor  - frozen six-block conv feature extractor, trained once on a
//                 texture classification task; pairs of adjacent blocks feed
//                 the fusion module.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "maskrestore/params.hpp"
#include "maskrestore/tensor.hpp"

namespace maskrestore {

inline constexpr int kRestorerVersion = 1;
inline constexpr int kAdaSamVersion = 1;
inline constexpr int kExtractorVersion = 1;

// ---------------------------------------------------------------- restorer

struct RestorerConfig {
    std::size_t image_channels = 3;
    std::size_t base_channels = 16;  // doubles per level: 16, 32, 64, latent 128
};

template <typename T>
struct Restorer {
    RestorerConfig config;
    ParamSet<T> params;

    std::size_t level_channels(std::size_t level) const { return config.base_channels << (level - 1); }
};

// Replaces the encoder activation at level 1..3 (full, 1/2, 1/4 resolution).
template <typename T>
using LevelHook = std::function<Tensor<T>(std::size_t level, const Tensor<T>& features)>;

template <typename T>
struct RestorerTrace {
    // Output of every parameter group's conv (pre-activation), forward order.
    std::vector<std::pair<std::string, Tensor<T>>> layer_outputs;
    std::array<Tensor<T>, 3> encoder_levels;  // after any hook
    Tensor<T> latent;
};

template <typename T>
Restorer<T> make_restorer(const RestorerConfig& config, std::uint64_t seed);

// image: [C,H,W] or [N,C,H,W] with H, W divisible by 8. Output has the input's shape.
template <typename T>
Tensor<T> restorer_forward(const Restorer<T>& net, const Tensor<T>& image, const LevelHook<T>* hook = nullptr,
                           RestorerTrace<T>* trace = nullptr);

template <typename To, typename From>
Restorer<To> cast_restorer(const Restorer<From>& net, bool requires_grad);

// ---------------------------------------------------------------- AdaSAM

struct AdaSamConfig {
    std::size_t image_channels = 3;
    std::size_t patch = 8;
    std::size_t dim = 64;
    std::size_t heads = 4;
};

template <typename T>
struct AdaSam {
    AdaSamConfig config;
    ParamSet<T> params;
};

template <typename T>
AdaSam<T> make_adasam(const AdaSamConfig& config, std::uint64_t seed);

// Token scores S (length (H/p)*(W/p), softmax-normalized) for one [C,H,W] image.
template <typename T>
Tensor<T> adasam_scores(const AdaSam<T>& net, const Tensor<T>& image);

// ---------------------------------------------------------------- extractor

struct ExtractorConfig {
    std::size_t image_channels = 3;
    std::array<std::size_t, 6> channels{16, 16, 32, 32, 64, 64};
    std::size_t classes = 8;
};

template <typename T>
struct Extractor {
    ExtractorConfig config;
    ParamSet<T> params;  // block1..block6, head

    std::size_t pair_channels(std::size_t level) const { return config.channels[2 * level - 1]; }
};

template <typename T>
using FeaturePair = std::pair<Tensor<T>, Tensor<T>>;

template <typename T>
Extractor<T> make_extractor(const ExtractorConfig& config, std::uint64_t seed);

// All six block activations; blocks 1, 3, 5 downsample by 2.
template <typename T>
std::array<Tensor<T>, 6> extractor_blocks(const Extractor<T>& net, const Tensor<T>& image);

// Pair i (1-based) comes from blocks (2i-1, 2i) at 1/2^i of the input size.
template <typename T>
std::array<FeaturePair<T>, 3> extractor_features(const Extractor<T>& net, const Tensor<T>& image);

// Classification logits [N, classes] used only to train the extractor.
template <typename T>
Tensor<T> extractor_logits(const Extractor<T>& net, const Tensor<T>& image);

template <typename To, typename From>
Extractor<To> cast_extractor(const Extractor<From>& net, bool requires_grad);

// ---------------------------------------------------------------- layer helpers

template <typename T>
Tensor<T> conv_layer(const ParamGroup<T>& group, const Tensor<T>& x, std::size_t stride = 1);

// x [rows, in] -> [rows, out]
template <typename T>
Tensor<T> linear_layer(const ParamGroup<T>& group, const Tensor<T>& x);

template <typename T>
void add_conv_group(ParamSet<T>& params, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                    Rng& rng);

template <typename T>
void add_linear_group(ParamSet<T>& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng);

}  // namespace maskrestore
