#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "maskrestore/image.hpp"

namespace maskrestore {

inline constexpr double kPsnrCap = 99.0;

struct Psnr {
    double db = 0.0;
    bool exact = false;  // identical inputs; db holds the cap
};

Psnr psnr(const Image& a, const Image& b, double peak = 1.0);

// ITU-R BT.601 luma, one channel.
std::vector<double> luma(const Image& image);

// Mean SSIM over all valid 11x11 Gaussian (sigma 1.5) windows of the luma planes.
double ssim(const Image& a, const Image& b, double peak = 1.0);

// Linear CKA of row-aligned feature matrices x [n, dx] and y [n, dy], row-major.
double cka(std::span<const double> x, std::size_t dx, std::span<const double> y, std::size_t dy);

}  // namespace maskrestore
