#include "maskrestore/models.hpp"

#include <cmath>
#include <stdexcept>

namespace maskrestore {

template <typename T>
Tensor<T> conv_layer(const ParamGroup<T>& group, const Tensor<T>& x, std::size_t stride) {
    const std::size_t k = group.weight.dim(2);
    return conv2d(x, group.weight, group.bias ? &*group.bias : nullptr, k / 2, stride);
}

template <typename T>
Tensor<T> linear_layer(const ParamGroup<T>& group, const Tensor<T>& x) {
    Tensor<T> y = matmul(x, group.weight);
    return group.bias ? add(y, *group.bias) : y;
}

template <typename T>
void add_conv_group(ParamSet<T>& params, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                    Rng& rng) {
    params.add(name, kaiming_uniform<T>({out, in, k, k}, in * k * k, rng), Tensor<T>::zeros({out}, true));
}

template <typename T>
void add_linear_group(ParamSet<T>& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    params.add(name, kaiming_uniform<T>({in, out}, in, rng), Tensor<T>::zeros({out}, true));
}

namespace {

template <typename T>
Tensor<T> as_batch(const Tensor<T>& image) {
    if (image.rank() == 4) return image;
    if (image.rank() == 3) return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    throw ShapeError("expected an image tensor [C,H,W] or [N,C,H,W], got " + to_string(image.shape()));
}

template <typename T>
Tensor<T> like_input(const Tensor<T>& t, const Tensor<T>& input) {
    if (input.rank() == 4) return t;
    return reshape(t, {t.dim(1), t.dim(2), t.dim(3)});
}

}  // namespace

// ---------------------------------------------------------------- restorer

template <typename T>
Restorer<T> make_restorer(const RestorerConfig& config, std::uint64_t seed) {
    Rng rng(seed, Stream::init, 1);
    Restorer<T> net;
    net.config = config;
    auto& p = net.params;
    const std::size_t c1 = config.base_channels, c2 = 2 * c1, c3 = 4 * c1, c4 = 8 * c1;
    // Residual branches start small so the seven blocks do not compound the
    // activation scale; the linear output layer uses unit gain.
    auto scale = [&](const std::string& name, double factor) {
        for (auto& v : p.get(name).weight.mutable_data()) v = static_cast<T>(v * factor);
    };
    auto block = [&](const std::string& prefix, std::size_t ch) {
        add_conv_group(p, prefix + ".conv1", ch, ch, 3, rng);
        add_conv_group(p, prefix + ".conv2", ch, ch, 3, rng);
        scale(prefix + ".conv2", 0.1);
    };
    add_conv_group(p, "intro", config.image_channels, c1, 3, rng);
    block("enc1", c1);
    add_conv_group(p, "down1", c1, c2, 3, rng);
    block("enc2", c2);
    add_conv_group(p, "down2", c2, c3, 3, rng);
    block("enc3", c3);
    add_conv_group(p, "down3", c3, c4, 3, rng);
    block("latent", c4);
    add_conv_group(p, "up3", c4, c3, 1, rng);
    block("dec3", c3);
    add_conv_group(p, "up2", c3, c2, 1, rng);
    block("dec2", c2);
    add_conv_group(p, "up1", c2, c1, 1, rng);
    block("dec1", c1);
    add_conv_group(p, "outro", c1, config.image_channels, 3, rng);
    scale("outro", std::sqrt(0.5));
    return net;
}

template <typename T>
Tensor<T> restorer_forward(const Restorer<T>& net, const Tensor<T>& image, const LevelHook<T>* hook,
                           RestorerTrace<T>* trace) {
    const Tensor<T> x = as_batch(image);
    const std::size_t h = x.dim(2), w = x.dim(3);
    if (h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0)
        throw ShapeError("restorer input spatial size must be divisible by 8, got " + to_string(image.shape()));
    if (x.dim(1) != net.config.image_channels)
        throw ShapeError("restorer expects " + std::to_string(net.config.image_channels) + " channels, got " +
                         to_string(image.shape()));
    const auto& p = net.params;
    if (trace) trace->layer_outputs.clear();

    auto conv = [&](const std::string& name, const Tensor<T>& in, std::size_t stride = 1) {
        Tensor<T> out = conv_layer(p.get(name), in, stride);
        if (trace) trace->layer_outputs.emplace_back(name, out);
        return out;
    };
    auto block = [&](const std::string& prefix, const Tensor<T>& in) {
        const Tensor<T> mid = relu(conv(prefix + ".conv1", in));
        return add(in, conv(prefix + ".conv2", mid));
    };
    auto level = [&](std::size_t i, Tensor<T> features) {
        if (hook) {
            Tensor<T> replaced = (*hook)(i, features);
            if (replaced.shape() != features.shape())
                throw ShapeError("level hook changed shape " + to_string(features.shape()) + " -> " +
                                 to_string(replaced.shape()));
            features = replaced;
        }
        if (trace) trace->encoder_levels[i - 1] = features;
        return features;
    };
    auto up = [&](const std::string& name, const Tensor<T>& in) {
        return relu(conv(name, resize_bilinear(in, in.dim(2) * 2, in.dim(3) * 2)));
    };

    Tensor<T> f = relu(conv("intro", x));
    f = level(1, block("enc1", f));
    f = relu(conv("down1", f, 2));
    f = level(2, block("enc2", f));
    f = relu(conv("down2", f, 2));
    f = level(3, block("enc3", f));
    f = relu(conv("down3", f, 2));
    f = block("latent", f);
    if (trace) trace->latent = f;
    f = block("dec3", up("up3", f));
    f = block("dec2", up("up2", f));
    f = block("dec1", up("up1", f));
    return like_input(conv("outro", f), image);
}

template <typename To, typename From>
Restorer<To> cast_restorer(const Restorer<From>& net, bool requires_grad) {
    return Restorer<To>{net.config, cast_params<To>(net.params, requires_grad)};
}

// ---------------------------------------------------------------- AdaSAM

template <typename T>
AdaSam<T> make_adasam(const AdaSamConfig& config, std::uint64_t seed) {
    if (config.dim % config.heads != 0) throw std::invalid_argument("AdaSAM dim must be divisible by heads");
    Rng rng(seed, Stream::init, 2);
    AdaSam<T> net;
    net.config = config;
    auto& p = net.params;
    add_linear_group(p, "embed", config.image_channels * config.patch * config.patch, config.dim, rng);
    add_linear_group(p, "attn.q", config.dim, config.dim, rng);
    add_linear_group(p, "attn.k", config.dim, config.dim, rng);
    add_linear_group(p, "attn.v", config.dim, config.dim, rng);
    add_linear_group(p, "attn.o", config.dim, config.dim, rng);
    add_linear_group(p, "score", config.dim, 1, rng);
    return net;
}

template <typename T>
Tensor<T> adasam_scores(const AdaSam<T>& net, const Tensor<T>& image) {
    const auto& cfg = net.config;
    if (image.rank() != 3) throw ShapeError("adasam_scores expects one [C,H,W] image, got " + to_string(image.shape()));
    if (image.dim(1) % cfg.patch != 0 || image.dim(2) % cfg.patch != 0)
        throw ShapeError("patch size " + std::to_string(cfg.patch) + " does not divide image " +
                         to_string(image.shape()));
    const auto& p = net.params;
    const Tensor<T> tokens = linear_layer(p.get("embed"), patchify(image, cfg.patch));
    const Tensor<T> q = linear_layer(p.get("attn.q"), tokens);
    const Tensor<T> k = linear_layer(p.get("attn.k"), tokens);
    const Tensor<T> v = linear_layer(p.get("attn.v"), tokens);
    const std::size_t hd = cfg.dim / cfg.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<Tensor<T>> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const Tensor<T> qh = narrow(q, 1, h * hd, hd);
        const Tensor<T> kh = narrow(k, 1, h * hd, hd);
        const Tensor<T> vh = narrow(v, 1, h * hd, hd);
        const Tensor<T> weights = softmax(mul_scalar(matmul(qh, transpose(kh)), scale), 1);
        heads.push_back(matmul(weights, vh));
    }
    const Tensor<T> attended = add(tokens, linear_layer(p.get("attn.o"), concat(heads, 1)));
    const Tensor<T> logits = linear_layer(p.get("score"), attended);
    return softmax(reshape(logits, {logits.dim(0)}), 0);
}

// ---------------------------------------------------------------- extractor

template <typename T>
Extractor<T> make_extractor(const ExtractorConfig& config, std::uint64_t seed) {
    Rng rng(seed, Stream::init, 3);
    Extractor<T> net;
    net.config = config;
    std::size_t in = config.image_channels;
    for (std::size_t b = 0; b < 6; ++b) {
        add_conv_group(net.params, "block" + std::to_string(b + 1), in, config.channels[b], 3, rng);
        in = config.channels[b];
    }
    add_linear_group(net.params, "head", in, config.classes, rng);
    return net;
}

template <typename T>
std::array<Tensor<T>, 6> extractor_blocks(const Extractor<T>& net, const Tensor<T>& image) {
    const Tensor<T> x = as_batch(image);
    if (x.dim(2) < 32 || x.dim(3) < 32 || x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
        throw ShapeError("extractor needs spatial size >= 32 and divisible by 8, got " + to_string(image.shape()));
    std::array<Tensor<T>, 6> out;
    Tensor<T> f = x;
    for (std::size_t b = 0; b < 6; ++b) {
        f = relu(conv_layer(net.params.get("block" + std::to_string(b + 1)), f, b % 2 == 0 ? 2 : 1));
        out[b] = like_input(f, image);
    }
    return out;
}

template <typename T>
std::array<FeaturePair<T>, 3> extractor_features(const Extractor<T>& net, const Tensor<T>& image) {
    const auto blocks = extractor_blocks(net, image);
    return {FeaturePair<T>{blocks[0], blocks[1]}, FeaturePair<T>{blocks[2], blocks[3]},
            FeaturePair<T>{blocks[4], blocks[5]}};
}

template <typename T>
Tensor<T> extractor_logits(const Extractor<T>& net, const Tensor<T>& image) {
    const auto blocks = extractor_blocks(net, as_batch(image));
    return linear_layer(net.params.get("head"), global_avg_pool(blocks[5]));
}

template <typename To, typename From>
Extractor<To> cast_extractor(const Extractor<From>& net, bool requires_grad) {
    return Extractor<To>{net.config, cast_params<To>(net.params, requires_grad)};
}

#define MASKRESTORE_INSTANTIATE_MODELS(T)                                                                      \
    template Tensor<T> conv_layer<T>(const ParamGroup<T>&, const Tensor<T>&, std::size_t);                     \
    template Tensor<T> linear_layer<T>(const ParamGroup<T>&, const Tensor<T>&);                                \
    template void add_conv_group<T>(ParamSet<T>&, const std::string&, std::size_t, std::size_t, std::size_t,   \
                                    Rng&);                                                                     \
    template void add_linear_group<T>(ParamSet<T>&, const std::string&, std::size_t, std::size_t, Rng&);       \
    template Restorer<T> make_restorer<T>(const RestorerConfig&, std::uint64_t);                               \
    template Tensor<T> restorer_forward<T>(const Restorer<T>&, const Tensor<T>&, const LevelHook<T>*,          \
                                           RestorerTrace<T>*);                                                 \
    template AdaSam<T> make_adasam<T>(const AdaSamConfig&, std::uint64_t);                                     \
    template Tensor<T> adasam_scores<T>(const AdaSam<T>&, const Tensor<T>&);                                   \
    template Extractor<T> make_extractor<T>(const ExtractorConfig&, std::uint64_t);                            \
    template std::array<Tensor<T>, 6> extractor_blocks<T>(const Extractor<T>&, const Tensor<T>&);              \
    template std::array<FeaturePair<T>, 3> extractor_features<T>(const Extractor<T>&, const Tensor<T>&);       \
    template Tensor<T> extractor_logits<T>(const Extractor<T>&, const Tensor<T>&);

MASKRESTORE_INSTANTIATE_MODELS(float)
MASKRESTORE_INSTANTIATE_MODELS(double)

template Restorer<double> cast_restorer<double, float>(const Restorer<float>&, bool);
template Restorer<float> cast_restorer<float, double>(const Restorer<double>&, bool);
template Restorer<float> cast_restorer<float, float>(const Restorer<float>&, bool);
template Extractor<double> cast_extractor<double, float>(const Extractor<float>&, bool);
template Extractor<float> cast_extractor<float, double>(const Extractor<double>&, bool);
template Extractor<float> cast_extractor<float, float>(const Extractor<float>&, bool);

#undef MASKRESTORE_INSTANTIATE_MODELS

}  // namespace maskrestore
