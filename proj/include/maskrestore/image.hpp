#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "maskrestore/tensor.hpp"

namespace maskrestore {

// Planar [C,H,W] image with values nominally in [0,1].
struct Image {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
        : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

    std::size_t plane() const { return height * width; }
    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
    bool same_shape(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }
};

void clip_unit(Image& image);

// 8-bit binary P6 (3 channels) / P5 (1 channel).
void write_pnm(const std::filesystem::path& path, const Image& image);
Image read_pnm(const std::filesystem::path& path);

template <typename T>
Tensor<T> to_tensor(const Image& image);  // [C,H,W]

template <typename T>
Tensor<T> to_batch(std::span<const Image> images);  // [N,C,H,W]

// Image n of a [N,C,H,W] tensor, or the whole tensor when it is [C,H,W].
template <typename T>
Image to_image(const Tensor<T>& tensor, std::size_t n = 0);

}  // namespace maskrestore
