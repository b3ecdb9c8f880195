#include "maskrestore/params.hpp"

#include <cmath>
#include <stdexcept>

namespace maskrestore {

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
ParamGroup<T>& ParamSet<T>::add(std::string name, Tensor<T> weight, std::optional<Tensor<T>> bias) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter group: " + name);
    groups_.push_back(ParamGroup<T>{std::move(name), std::move(weight), std::move(bias), true});
    return groups_.back();
}

template <typename T>
std::vector<std::string> ParamSet<T>::names() const {
    std::vector<std::string> out;
    for (const auto& g : groups_) out.push_back(g.name);
    return out;
}

template <typename T>
const ParamGroup<T>& ParamSet<T>::get(const std::string& name) const {
    for (const auto& g : groups_)
        if (g.name == name) return g;
    throw std::invalid_argument("unknown parameter group: " + name);
}

template <typename T>
ParamGroup<T>& ParamSet<T>::get(const std::string& name) {
    for (auto& g : groups_)
        if (g.name == name) return g;
    throw std::invalid_argument("unknown parameter group: " + name);
}

template <typename T>
bool ParamSet<T>::contains(const std::string& name) const {
    for (const auto& g : groups_)
        if (g.name == name) return true;
    return false;
}

template <typename T>
std::size_t ParamSet<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : groups_) n += g.size();
    return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
    for (auto& g : groups_) {
        g.weight.zero_grad();
        if (g.bias) g.bias->zero_grad();
    }
}

template <typename T>
void ParamSet<T>::set_trainable(const std::set<std::string>& names, bool trainable) {
    for (const auto& n : names)
        if (!contains(n)) throw std::invalid_argument("unknown parameter group: " + n);
    for (auto& g : groups_) {
        if (!names.contains(g.name)) continue;
        g.trainable = trainable;
        g.weight.set_requires_grad(trainable);
        if (g.bias) g.bias->set_requires_grad(trainable);
    }
}

template <typename T>
void ParamSet<T>::set_all_trainable(bool trainable) {
    std::set<std::string> all;
    for (const auto& g : groups_) all.insert(g.name);
    set_trainable(all, trainable);
}

template <typename T>
std::uint64_t ParamSet<T>::group_hash(const std::string& name) const {
    const auto& g = get(name);
    std::uint64_t h = fnv1a(g.weight.data().data(), g.weight.numel() * sizeof(T));
    if (g.bias) h = fnv1a(g.bias->data().data(), g.bias->numel() * sizeof(T), h);
    return h;
}

template <typename T>
std::uint64_t ParamSet<T>::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& g : groups_) {
        const std::uint64_t gh = group_hash(g.name);
        h = fnv1a(&gh, sizeof gh, h);
    }
    return h;
}

template <typename T>
Tensor<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from(shape, std::move(v), true);
}

template <typename To, typename From>
ParamSet<To> cast_params(const ParamSet<From>& params, bool requires_grad) {
    ParamSet<To> out;
    for (const auto& g : params.groups()) {
        const bool live = requires_grad && g.trainable;
        std::optional<Tensor<To>> bias;
        if (g.bias) bias = cast<To>(*g.bias, live);
        auto& added = out.add(g.name, cast<To>(g.weight, live), std::move(bias));
        added.trainable = g.trainable;
    }
    return out;
}

template class ParamSet<float>;
template class ParamSet<double>;
template Tensor<float> kaiming_uniform<float>(const Shape&, std::size_t, Rng&);
template Tensor<double> kaiming_uniform<double>(const Shape&, std::size_t, Rng&);
template ParamSet<double> cast_params<double, float>(const ParamSet<float>&, bool);
template ParamSet<float> cast_params<float, double>(const ParamSet<double>&, bool);
template ParamSet<float> cast_params<float, float>(const ParamSet<float>&, bool);
template ParamSet<double> cast_params<double, double>(const ParamSet<double>&, bool);

}  // namespace maskrestore
