#pragma once

// Fusion of frozen extractor features into the restorer's encoder levels.
//
// For level i the adjacent extractor blocks (F1, F2) are blended with a
// per-channel gate w = sigmoid(MLP([avg F1, avg F2])), resized to the
// restorer's level resolution, projected by conv-relu-conv and merged back
// as F_r + conv1x1([F_hat, F_r]). The merge conv starts at zero so enabling
// fusion leaves a pre-trained restorer untouched.

#include <array>
#include <cstdint>
#include <string>

#include "maskrestore/models.hpp"
#include "maskrestore/params.hpp"
#include "maskrestore/tensor.hpp"

namespace maskrestore {

inline constexpr int kFusionVersion = 1;

template <typename T>
struct Fusion {
    std::array<std::size_t, 3> extractor_channels{};
    std::array<std::size_t, 3> restorer_channels{};
    // Per level i: rfr<i>.gate1, rfr<i>.gate2, rfr<i>.proj1, rfr<i>.proj2, rfr<i>.merge
    ParamSet<T> params;
};

std::string fusion_group(std::size_t level, const char* part);

template <typename T>
Fusion<T> make_fusion(const Extractor<T>& extractor, const Restorer<T>& restorer, std::uint64_t seed);

template <typename To, typename From>
Fusion<To> cast_fusion(const Fusion<From>& fusion, bool requires_grad);

// [N,C,H,W] pair -> [N,C] weights in (0,1).
template <typename T>
Tensor<T> gate_weight(const Fusion<T>& fusion, std::size_t level, const Tensor<T>& f1, const Tensor<T>& f2);

// w*F1 + (1-w)*F2 with w [N,C] broadcast over space.
template <typename T>
Tensor<T> blend(const Tensor<T>& f1, const Tensor<T>& f2, const Tensor<T>& w);

template <typename T>
Tensor<T> project(const Fusion<T>& fusion, std::size_t level, const Tensor<T>& blended, std::size_t height,
                  std::size_t width);

template <typename T>
Tensor<T> fuse(const Fusion<T>& fusion, std::size_t level, const Tensor<T>& projected, const Tensor<T>& restorer_features);

// Full level-i path from an extractor pair to fused restorer features.
template <typename T>
Tensor<T> fusion_level(const Fusion<T>& fusion, std::size_t level, const FeaturePair<T>& pair,
                       const Tensor<T>& restorer_features);

// Hook that runs the frozen extractor on `image` once and fuses each level.
template <typename T>
LevelHook<T> make_fusion_hook(const Fusion<T>& fusion, const Extractor<T>& extractor, const Tensor<T>& image);

}  // namespace maskrestore
