#pragma once

// Checkpoint file: a text manifest terminated by a line "end", followed by a
// raw little-endian float32 blob.
//
//   maskrestore-checkpoint 1
//   module <name> <version>
//   meta <key> <value>
//   step <n>
//   rng <name> <engine state>
//   tensor <name> <rank> <dims...> <byte offset> <element count>
//   end

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskrestore/params.hpp"
#include "maskrestore/tensor.hpp"

namespace maskrestore {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::map<std::string, int> modules;
    std::map<std::string, std::string> meta;
    std::uint64_t step = 0;
    std::map<std::string, std::string> rng_states;
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor* find(const std::string& name) const;
    // Throws CheckpointError unless `module` is present at `version`.
    void require_module(const std::string& module, int version) const;
    const std::string& require_meta(const std::string& key) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Tensors named "<prefix>/<group>.weight" and "<prefix>/<group>.bias".
template <typename T>
void store_params(Checkpoint& checkpoint, const std::string& prefix, const ParamSet<T>& params);

// Every group of `params` must be present with a matching shape; the error names the first missing tensor.
template <typename T>
void restore_params(const Checkpoint& checkpoint, const std::string& prefix, ParamSet<T>& params);

}  // namespace maskrestore
