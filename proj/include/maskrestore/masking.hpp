#pragma once

// Adaptive semantic-aware pixel masking and the two pre-training objectives.
//
// Token scores from the AdaSAM network are spread uniformly over the pixels
// of their patch to give a categorical distribution s over pixels; exactly
// floor(H*W*rho) distinct pixels are then drawn from s without replacement.
// Mask convention: 1 = masked (hidden from the restorer), 0 = visible.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "maskrestore/image.hpp"
#include "maskrestore/rng.hpp"
#include "maskrestore/tensor.hpp"

namespace maskrestore {

using Mask = std::vector<std::uint8_t>;  // H*W, row-major

struct MaskPlan {
    std::vector<double> token_scores;
    std::vector<double> pixel_map;  // s, sums to 1
    double ratio = 0.5;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t n_mask = 0;
    std::vector<std::size_t> indices;  // ascending, unique
    Mask mask;

    Mask complement() const;
};

inline constexpr double kDefaultMaskRatio = 0.5;
inline constexpr double kDefaultMaskLossWeight = 1e-4;
inline constexpr double kMaskFill = 0.0;

// floor(H*W*rho); rho must lie in (0,1).
std::size_t mask_count(std::size_t height, std::size_t width, double ratio);

// Pixel index -> token index for a row-major patch grid.
std::vector<std::size_t> pixel_tokens(std::size_t height, std::size_t width, std::size_t patch);

std::vector<double> importance_map(std::span<const double> token_scores, std::size_t height, std::size_t width,
                                   std::size_t patch);

// Differentiable version: s_i = S[token(i)] / patch^2.
template <typename T>
Tensor<T> importance_map(const Tensor<T>& token_scores, std::size_t height, std::size_t width, std::size_t patch);

// Draws without replacement via Gumbel-top-k, which has the same set
// distribution as sequential renormalized draws.
MaskPlan sample_mask(std::span<const double> pixel_map, std::size_t height, std::size_t width, double ratio,
                     Rng& rng);

MaskPlan plan_from_scores(std::span<const double> token_scores, std::size_t height, std::size_t width,
                          std::size_t patch, double ratio, Rng& rng);

// Masked pixels set to `fill` in every channel.
Image apply_mask(const Image& image, const Mask& mask, double fill = kMaskFill);

std::pair<Mask, Mask> twin_mask_pair(const Mask& mask);

// [N,1,H,W] tensor of the given masks (1 where mask byte is set).
template <typename T>
Tensor<T> mask_tensor(std::span<const Mask> masks, std::size_t height, std::size_t width);

// Mean absolute error over supervised pixels and all channels.
// pred/clean: [N,C,H,W]; supervised: [N,1,H,W] with 1 = supervised.
template <typename T>
Tensor<T> restoration_loss(const Tensor<T>& pred, const Tensor<T>& clean, const Tensor<T>& supervised);

// Per-pixel L1 norm over channels of (clean - pred), for one image [C,H,W].
std::vector<double> per_pixel_error(const Image& clean, const Image& pred);

// -weight * sum_{i in region} e_i * log(s_i). `errors` must come from a
// detached restorer output; `pixel_map` is the live AdaSAM map.
template <typename T>
Tensor<T> mask_loss(std::span<const double> errors, const Tensor<T>& pixel_map, std::span<const std::size_t> region,
                    double weight = kDefaultMaskLossWeight);

// 8-bit single channel: 0 = visible, 255 = masked.
void write_mask(const std::filesystem::path& path, const Mask& mask, std::size_t height, std::size_t width);

}  // namespace maskrestore
