#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "maskrestore/rng.hpp"
#include "maskrestore/tensor.hpp"

namespace maskrestore {

// One parameter-bearing layer: a conv or linear weight plus its bias.
// This is also the unit of attribution and of freezing.
template <typename T>
struct ParamGroup {
    std::string name;
    Tensor<T> weight;
    std::optional<Tensor<T>> bias;
    bool trainable = true;

    std::size_t size() const { return weight.numel() + (bias ? bias->numel() : 0); }
};

template <typename T>
class ParamSet {
public:
    ParamGroup<T>& add(std::string name, Tensor<T> weight, std::optional<Tensor<T>> bias);

    std::vector<ParamGroup<T>>& groups() { return groups_; }
    const std::vector<ParamGroup<T>>& groups() const { return groups_; }
    std::vector<std::string> names() const;

    const ParamGroup<T>& get(const std::string& name) const;
    ParamGroup<T>& get(const std::string& name);
    bool contains(const std::string& name) const;

    std::size_t parameter_count() const;
    void zero_grad();

    // Throws std::invalid_argument naming the first unknown group.
    void set_trainable(const std::set<std::string>& names, bool trainable);
    void set_all_trainable(bool trainable);

    // FNV-1a over the raw bytes of the group's tensors.
    std::uint64_t group_hash(const std::string& name) const;
    std::uint64_t hash() const;

private:
    std::vector<ParamGroup<T>> groups_;
};

// Kaiming-uniform fan-in weights, zero bias.
template <typename T>
Tensor<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng);

// Copies values into a new precision; gradients are not carried over.
template <typename To, typename From>
ParamSet<To> cast_params(const ParamSet<From>& params, bool requires_grad);

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace maskrestore
