#include "maskrestore/fusion.hpp"

#include <stdexcept>

namespace maskrestore {

namespace {

void check_level(std::size_t level) {
    if (level < 1 || level > 3) throw std::out_of_range("fusion level must be 1, 2 or 3, got " + std::to_string(level));
}

}  // namespace

std::string fusion_group(std::size_t level, const char* part) {
    check_level(level);
    return "rfr" + std::to_string(level) + "." + part;
}

template <typename T>
Fusion<T> make_fusion(const Extractor<T>& extractor, const Restorer<T>& restorer, std::uint64_t seed) {
    Rng rng(seed, Stream::init, 4);
    Fusion<T> f;
    for (std::size_t i = 1; i <= 3; ++i) {
        const std::size_t c = extractor.pair_channels(i);
        const std::size_t rc = restorer.level_channels(i);
        f.extractor_channels[i - 1] = c;
        f.restorer_channels[i - 1] = rc;
        add_linear_group(f.params, fusion_group(i, "gate1"), 2 * c, c, rng);
        add_linear_group(f.params, fusion_group(i, "gate2"), c, c, rng);
        add_conv_group(f.params, fusion_group(i, "proj1"), c, rc, 3, rng);
        add_conv_group(f.params, fusion_group(i, "proj2"), rc, rc, 3, rng);
        f.params.add(fusion_group(i, "merge"), Tensor<T>::zeros({rc, 2 * rc, 1, 1}, true), Tensor<T>::zeros({rc}, true));
    }
    return f;
}

template <typename To, typename From>
Fusion<To> cast_fusion(const Fusion<From>& fusion, bool requires_grad) {
    return {fusion.extractor_channels, fusion.restorer_channels, cast_params<To>(fusion.params, requires_grad)};
}

template <typename T>
Tensor<T> gate_weight(const Fusion<T>& fusion, std::size_t level, const Tensor<T>& f1, const Tensor<T>& f2) {
    check_level(level);
    if (f1.shape() != f2.shape())
        throw ShapeError("gate_weight: feature pair " + to_string(f1.shape()) + " vs " + to_string(f2.shape()));
    if (f1.rank() != 4 || f1.dim(1) != fusion.extractor_channels[level - 1])
        throw ShapeError("gate_weight: level " + std::to_string(level) + " expects [N," +
                         std::to_string(fusion.extractor_channels[level - 1]) + ",H,W], got " + to_string(f1.shape()));
    const Tensor<T> pooled = concat<T>({global_avg_pool(f1), global_avg_pool(f2)}, 1);
    const Tensor<T> hidden = relu(linear_layer(fusion.params.get(fusion_group(level, "gate1")), pooled));
    return sigmoid(linear_layer(fusion.params.get(fusion_group(level, "gate2")), hidden));
}

template <typename T>
Tensor<T> blend(const Tensor<T>& f1, const Tensor<T>& f2, const Tensor<T>& w) {
    if (f1.shape() != f2.shape())
        throw ShapeError("blend: feature pair " + to_string(f1.shape()) + " vs " + to_string(f2.shape()));
    if (f1.rank() != 4 || w.shape() != Shape{f1.dim(0), f1.dim(1)})
        throw ShapeError("blend: weights " + to_string(w.shape()) + " do not match features " + to_string(f1.shape()));
    const Tensor<T> w4 = reshape(w, {w.dim(0), w.dim(1), 1, 1});
    const Tensor<T> one_minus = add_scalar(neg(w4), T(1));
    return add(mul(w4, f1), mul(one_minus, f2));
}

template <typename T>
Tensor<T> project(const Fusion<T>& fusion, std::size_t level, const Tensor<T>& blended, std::size_t height,
                  std::size_t width) {
    check_level(level);
    const Tensor<T> resized = (blended.dim(2) == height && blended.dim(3) == width)
                                  ? blended
                                  : resize_bilinear(blended, height, width);
    const Tensor<T> mid = relu(conv_layer(fusion.params.get(fusion_group(level, "proj1")), resized));
    return conv_layer(fusion.params.get(fusion_group(level, "proj2")), mid);
}

template <typename T>
Tensor<T> fuse(const Fusion<T>& fusion, std::size_t level, const Tensor<T>& projected, const Tensor<T>& restorer_features) {
    check_level(level);
    if (projected.shape() != restorer_features.shape())
        throw ShapeError("fuse: projected " + to_string(projected.shape()) + " vs restorer " +
                         to_string(restorer_features.shape()));
    const Tensor<T> merged =
        conv_layer(fusion.params.get(fusion_group(level, "merge")), concat<T>({projected, restorer_features}, 1));
    return add(restorer_features, merged);
}

template <typename T>
Tensor<T> fusion_level(const Fusion<T>& fusion, std::size_t level, const FeaturePair<T>& pair,
                       const Tensor<T>& restorer_features) {
    const Tensor<T> w = gate_weight(fusion, level, pair.first, pair.second);
    const Tensor<T> blended = blend(pair.first, pair.second, w);
    const Tensor<T> projected = project(fusion, level, blended, restorer_features.dim(2), restorer_features.dim(3));
    return fuse(fusion, level, projected, restorer_features);
}

template <typename T>
LevelHook<T> make_fusion_hook(const Fusion<T>& fusion, const Extractor<T>& extractor, const Tensor<T>& image) {
    const Tensor<T> batch = image.rank() == 3 ? reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
    auto pairs = extractor_features(extractor, detach(batch));
    for (auto& p : pairs) p = {detach(p.first), detach(p.second)};
    const bool single = image.rank() == 3;
    return [fusion, pairs, single](std::size_t level, const Tensor<T>& features) {
        if (!single) return fusion_level(fusion, level, pairs[level - 1], features);
        const Tensor<T> f4 = reshape(features, {1, features.dim(0), features.dim(1), features.dim(2)});
        return reshape(fusion_level(fusion, level, pairs[level - 1], f4), features.shape());
    };
}

#define MASKRESTORE_INSTANTIATE_FUSION(T)                                                                         \
    template Fusion<T> make_fusion<T>(const Extractor<T>&, const Restorer<T>&, std::uint64_t);                    \
    template Tensor<T> gate_weight<T>(const Fusion<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&);         \
    template Tensor<T> blend<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> project<T>(const Fusion<T>&, std::size_t, const Tensor<T>&, std::size_t, std::size_t);     \
    template Tensor<T> fuse<T>(const Fusion<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&);                \
    template Tensor<T> fusion_level<T>(const Fusion<T>&, std::size_t, const FeaturePair<T>&, const Tensor<T>&);   \
    template LevelHook<T> make_fusion_hook<T>(const Fusion<T>&, const Extractor<T>&, const Tensor<T>&);

MASKRESTORE_INSTANTIATE_FUSION(float)
MASKRESTORE_INSTANTIATE_FUSION(double)

template Fusion<double> cast_fusion<double, float>(const Fusion<float>&, bool);
template Fusion<float> cast_fusion<float, double>(const Fusion<double>&, bool);
template Fusion<float> cast_fusion<float, float>(const Fusion<float>&, bool);

#undef MASKRESTORE_INSTANTIATE_FUSION

}  // namespace maskrestore
