#include "maskrestore/masking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace maskrestore {

Mask MaskPlan::complement() const { return twin_mask_pair(mask).second; }

std::size_t mask_count(std::size_t height, std::size_t width, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0))
        throw std::invalid_argument("mask ratio must lie in (0,1), got " + std::to_string(ratio));
    // The epsilon absorbs representation error such as 100 * 0.29 = 28.999...
    return static_cast<std::size_t>(std::floor(static_cast<double>(height * width) * ratio + 1e-9));
}

std::vector<std::size_t> pixel_tokens(std::size_t height, std::size_t width, std::size_t patch) {
    if (patch == 0 || height % patch != 0 || width % patch != 0)
        throw std::invalid_argument("patch " + std::to_string(patch) + " does not divide " + std::to_string(height) +
                                    "x" + std::to_string(width));
    const std::size_t tw = width / patch;
    std::vector<std::size_t> tok(height * width);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) tok[y * width + x] = (y / patch) * tw + x / patch;
    return tok;
}

std::vector<double> importance_map(std::span<const double> token_scores, std::size_t height, std::size_t width,
                                   std::size_t patch) {
    const auto tok = pixel_tokens(height, width, patch);
    if (token_scores.size() != (height / patch) * (width / patch))
        throw std::invalid_argument("token score count does not match the patch grid");
    const double per = static_cast<double>(patch * patch);
    std::vector<double> s(tok.size());
    for (std::size_t i = 0; i < tok.size(); ++i) s[i] = token_scores[tok[i]] / per;
    return s;
}

template <typename T>
Tensor<T> importance_map(const Tensor<T>& token_scores, std::size_t height, std::size_t width, std::size_t patch) {
    const auto tok = pixel_tokens(height, width, patch);
    if (token_scores.numel() != (height / patch) * (width / patch))
        throw ShapeError("token score count does not match the patch grid");
    return mul_scalar(gather(token_scores, tok), T(1) / static_cast<T>(patch * patch));
}

MaskPlan sample_mask(std::span<const double> pixel_map, std::size_t height, std::size_t width, double ratio,
                     Rng& rng) {
    if (pixel_map.size() != height * width) throw std::invalid_argument("pixel map size does not match H*W");
    MaskPlan plan;
    plan.ratio = ratio;
    plan.height = height;
    plan.width = width;
    plan.n_mask = mask_count(height, width, ratio);
    plan.pixel_map.assign(pixel_map.begin(), pixel_map.end());
    const std::size_t positive =
        static_cast<std::size_t>(std::count_if(pixel_map.begin(), pixel_map.end(), [](double p) { return p > 0.0; }));
    if (positive < plan.n_mask)
        throw std::invalid_argument("only " + std::to_string(positive) + " pixels have positive probability, " +
                                    std::to_string(plan.n_mask) + " must be masked");

    // Gumbel-top-k: key_i = log s_i + G_i; the k largest keys form the sample.
    // Every pixel consumes one uniform so the stream layout is fixed.
    std::vector<double> keys(pixel_map.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        const double gumbel = -std::log(-std::log(u));
        keys[i] = pixel_map[i] > 0.0 ? std::log(pixel_map[i]) + gumbel : -std::numeric_limits<double>::infinity();
    }
    std::vector<std::size_t> order(keys.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(plan.n_mask), order.end(),
                      [&](std::size_t a, std::size_t b) { return keys[a] > keys[b] || (keys[a] == keys[b] && a < b); });
    plan.indices.assign(order.begin(), order.begin() + static_cast<long>(plan.n_mask));
    std::sort(plan.indices.begin(), plan.indices.end());
    plan.mask.assign(height * width, 0);
    for (std::size_t i : plan.indices) plan.mask[i] = 1;
    return plan;
}

MaskPlan plan_from_scores(std::span<const double> token_scores, std::size_t height, std::size_t width,
                          std::size_t patch, double ratio, Rng& rng) {
    const auto s = importance_map(token_scores, height, width, patch);
    MaskPlan plan = sample_mask(s, height, width, ratio, rng);
    plan.token_scores.assign(token_scores.begin(), token_scores.end());
    return plan;
}

Image apply_mask(const Image& image, const Mask& mask, double fill) {
    if (mask.size() != image.plane())
        throw std::invalid_argument("mask has " + std::to_string(mask.size()) + " pixels, image has " +
                                    std::to_string(image.plane()));
    Image out = image;
    for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) out.pixels[c * image.plane() + i] = fill;
    return out;
}

std::pair<Mask, Mask> twin_mask_pair(const Mask& mask) {
    Mask other(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) other[i] = mask[i] ? 0 : 1;
    return {mask, std::move(other)};
}

template <typename T>
Tensor<T> mask_tensor(std::span<const Mask> masks, std::size_t height, std::size_t width) {
    std::vector<T> v;
    v.reserve(masks.size() * height * width);
    for (const auto& m : masks) {
        if (m.size() != height * width) throw std::invalid_argument("mask size does not match H*W");
        for (auto b : m) v.push_back(b ? T(1) : T(0));
    }
    return Tensor<T>::from({masks.size(), 1, height, width}, std::move(v));
}

template <typename T>
Tensor<T> restoration_loss(const Tensor<T>& pred, const Tensor<T>& clean, const Tensor<T>& supervised) {
    if (pred.shape() != clean.shape())
        throw ShapeError("restoration_loss: prediction " + to_string(pred.shape()) + " vs clean " +
                         to_string(clean.shape()));
    double count = 0.0;
    for (T v : supervised.data()) count += static_cast<double>(v);
    const std::size_t channels = pred.rank() == 4 ? pred.dim(1) : pred.dim(0);
    const double per_pixel = supervised.numel() * channels == pred.numel() ? static_cast<double>(channels) : 1.0;
    if (count <= 0.0) throw std::invalid_argument("restoration_loss: supervised region is empty");
    const Tensor<T> err = mul(abs(sub(pred, clean)), supervised);
    return mul_scalar(sum(err), static_cast<T>(1.0 / (count * per_pixel)));
}

std::vector<double> per_pixel_error(const Image& clean, const Image& pred) {
    if (!clean.same_shape(pred)) throw std::invalid_argument("per_pixel_error: shape mismatch");
    std::vector<double> e(clean.plane(), 0.0);
    for (std::size_t c = 0; c < clean.channels; ++c)
        for (std::size_t i = 0; i < e.size(); ++i)
            e[i] += std::abs(clean.pixels[c * clean.plane() + i] - pred.pixels[c * clean.plane() + i]);
    return e;
}

template <typename T>
Tensor<T> mask_loss(std::span<const double> errors, const Tensor<T>& pixel_map, std::span<const std::size_t> region,
                    double weight) {
    if (errors.size() != pixel_map.numel())
        throw ShapeError("mask_loss: error map and pixel map differ in size");
    std::vector<T> e(region.size());
    for (std::size_t k = 0; k < region.size(); ++k) {
        if (!(pixel_map.at(region[k]) > T(0)))
            throw std::domain_error("mask_loss: zero selection probability at pixel " + std::to_string(region[k]));
        e[k] = static_cast<T>(errors[region[k]]);
    }
    const Tensor<T> log_s = log(gather(pixel_map, region));
    const Tensor<T> weighted = mul(Tensor<T>::from({region.size()}, std::move(e)), log_s);
    return mul_scalar(sum(weighted), static_cast<T>(-weight));
}

void write_mask(const std::filesystem::path& path, const Mask& mask, std::size_t height, std::size_t width) {
    Image im(1, height, width);
    for (std::size_t i = 0; i < mask.size(); ++i) im.pixels[i] = mask[i] ? 1.0 : 0.0;
    write_pnm(path, im);
}

#define MASKRESTORE_INSTANTIATE_MASKING(T)                                                                      \
    template Tensor<T> importance_map<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);              \
    template Tensor<T> mask_tensor<T>(std::span<const Mask>, std::size_t, std::size_t);                         \
    template Tensor<T> restoration_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
    template Tensor<T> mask_loss<T>(std::span<const double>, const Tensor<T>&, std::span<const std::size_t>,    \
                                    double);

MASKRESTORE_INSTANTIATE_MASKING(float)
MASKRESTORE_INSTANTIATE_MASKING(double)

#undef MASKRESTORE_INSTANTIATE_MASKING

}  // namespace maskrestore
