#include "maskrestore/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace maskrestore {

namespace {

constexpr std::size_t kWindow = 11;
constexpr double kWindowSigma = 1.5;

std::vector<double> window_weights() {
    std::vector<double> g(kWindow);
    double total = 0.0;
    for (std::size_t i = 0; i < kWindow; ++i) {
        const double d = static_cast<double>(i) - 5.0;
        g[i] = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
        total += g[i];
    }
    for (auto& v : g) v /= total;
    return g;
}

// Valid separable filtering of a plane: output (h-10) x (w-10).
std::vector<double> filter_valid(const std::vector<double>& in, std::size_t h, std::size_t w,
                                 const std::vector<double>& g) {
    const std::size_t oh = h - kWindow + 1, ow = w - kWindow + 1;
    std::vector<double> rows(h * ow), out(oh * ow);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * in[y * w + x + k];
            rows[y * ow + x] = s;
        }
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * rows[(y + k) * ow + x];
            out[y * ow + x] = s;
        }
    return out;
}

// Gram-style product a^T b of column-centered n x da and n x db matrices.
std::vector<double> cross(const std::vector<double>& a, std::size_t da, const std::vector<double>& b, std::size_t db,
                          std::size_t n) {
    std::vector<double> out(da * db, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < da; ++i) {
            const double ai = a[r * da + i];
            for (std::size_t j = 0; j < db; ++j) out[i * db + j] += ai * b[r * db + j];
        }
    return out;
}

double frob2(const std::vector<double>& m) {
    double s = 0.0;
    for (double v : m) s += v * v;
    return s;
}

std::vector<double> centered(std::span<const double> m, std::size_t d, std::size_t n) {
    std::vector<double> out(m.begin(), m.end());
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t r = 0; r < n; ++r) mean += out[r * d + j];
        mean /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) out[r * d + j] -= mean;
    }
    return out;
}

}  // namespace

Psnr psnr(const Image& a, const Image& b, double peak) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: image shapes differ");
    if (a.pixels.empty()) throw std::invalid_argument("psnr: empty image");
    double se = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = a.pixels[i] - b.pixels[i];
        se += d * d;
    }
    if (se == 0.0) return {kPsnrCap, true};
    const double mse = se / static_cast<double>(a.pixels.size());
    return {std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse)), false};
}

std::vector<double> luma(const Image& image) {
    if (image.channels == 1) return image.pixels;
    if (image.channels != 3) throw std::invalid_argument("luma: expected 1 or 3 channels");
    std::vector<double> y(image.plane());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = 0.299 * image.pixels[i] + 0.587 * image.pixels[image.plane() + i] +
               0.114 * image.pixels[2 * image.plane() + i];
    return y;
}

double ssim(const Image& a, const Image& b, double peak) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: image shapes differ");
    if (a.height < kWindow || a.width < kWindow)
        throw std::invalid_argument("ssim: image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                                    " is smaller than the 11x11 window");
    const auto g = window_weights();
    const std::size_t h = a.height, w = a.width;
    const auto x = luma(a), y = luma(b);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, g), my = filter_valid(y, h, w, g);
    const auto sxx = filter_valid(xx, h, w, g), syy = filter_valid(yy, h, w, g), sxy = filter_valid(xy, h, w, g);
    const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
        total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

double cka(std::span<const double> x, std::size_t dx, std::span<const double> y, std::size_t dy) {
    if (dx == 0 || dy == 0 || x.size() % dx != 0 || y.size() % dy != 0)
        throw std::invalid_argument("cka: feature sizes do not match their widths");
    const std::size_t n = x.size() / dx;
    if (n != y.size() / dy) throw std::invalid_argument("cka: row counts differ");
    if (n < 2) throw std::invalid_argument("cka: need at least two rows");
    const auto xc = centered(x, dx, n), yc = centered(y, dy, n);
    const double hx = frob2(cross(xc, dx, xc, dx, n)), hy = frob2(cross(yc, dy, yc, dy, n));
    if (hx == 0.0 || hy == 0.0) throw std::invalid_argument("cka: zero-variance features");
    return frob2(cross(yc, dy, xc, dx, n)) / std::sqrt(hx * hy);
}

}  // namespace maskrestore
