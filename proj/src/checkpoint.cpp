#include "maskrestore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace maskrestore {

namespace {

constexpr const char* kMagic = "maskrestore-checkpoint";

void check_token(const std::string& s, const char* what) {
    if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos)
        throw CheckpointError(std::string(what) + " '" + s + "' must be a non-empty token without whitespace");
}

std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
    return v;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void Checkpoint::require_module(const std::string& module, int version) const {
    const auto it = modules.find(module);
    if (it == modules.end()) throw CheckpointError("checkpoint has no '" + module + "' module");
    if (it->second != version)
        throw CheckpointError("checkpoint module '" + module + "' has version " + std::to_string(it->second) +
                              ", this build expects " + std::to_string(version));
}

const std::string& Checkpoint::require_meta(const std::string& key) const {
    const auto it = meta.find(key);
    if (it == meta.end()) throw CheckpointError("checkpoint is missing meta field '" + key + "'");
    return it->second;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ostringstream manifest;
    manifest << kMagic << ' ' << kCheckpointVersion << '\n';
    for (const auto& [name, version] : ckpt.modules) {
        check_token(name, "module name");
        manifest << "module " << name << ' ' << version << '\n';
    }
    for (const auto& [key, value] : ckpt.meta) {
        check_token(key, "meta key");
        check_token(value, "meta value");
        manifest << "meta " << key << ' ' << value << '\n';
    }
    manifest << "step " << ckpt.step << '\n';
    for (const auto& [name, state] : ckpt.rng_states) {
        check_token(name, "rng name");
        if (state.find('\n') != std::string::npos) throw CheckpointError("rng state for " + name + " spans lines");
        manifest << "rng " << name << ' ' << state << '\n';
    }
    std::size_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        check_token(t.name, "tensor name");
        if (numel_of(t.shape) != t.values.size())
            throw CheckpointError("tensor " + t.name + " has " + std::to_string(t.values.size()) +
                                  " values for shape " + to_string(t.shape));
        manifest << "tensor " << t.name << ' ' << t.shape.size();
        for (auto d : t.shape) manifest << ' ' << d;
        manifest << ' ' << offset << ' ' << t.values.size() << '\n';
        offset += t.values.size() * sizeof(float);
    }
    manifest << "end\n";

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
        const std::string text = manifest.str();
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        std::vector<std::uint32_t> buf;
        for (const auto& t : ckpt.tensors) {
            buf.resize(t.values.size());
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_le(std::bit_cast<std::uint32_t>(t.values[i]));
            out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        }
        if (!out) throw CheckpointError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint not found: " + path.string());
    auto fail = [&](const std::string& why) { return CheckpointError(path.string() + ": " + why); };

    Checkpoint ckpt;
    std::string line;
    if (!std::getline(in, line)) throw fail("empty file");
    {
        std::istringstream is(line);
        std::string magic;
        int version = 0;
        if (!(is >> magic >> version) || magic != kMagic) throw fail("not a checkpoint file");
        if (version != kCheckpointVersion)
            throw fail("format version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
    }
    struct Entry {
        std::size_t offset, count;
    };
    std::vector<Entry> entries;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            ended = true;
            break;
        }
        std::istringstream is(line);
        std::string kind;
        is >> kind;
        if (kind == "module") {
            std::string name;
            int version;
            if (!(is >> name >> version)) throw fail("malformed module line");
            ckpt.modules[name] = version;
        } else if (kind == "meta") {
            std::string key, value;
            if (!(is >> key >> value)) throw fail("malformed meta line");
            ckpt.meta[key] = value;
        } else if (kind == "step") {
            if (!(is >> ckpt.step)) throw fail("malformed step line");
        } else if (kind == "rng") {
            std::string name;
            if (!(is >> name)) throw fail("malformed rng line");
            std::string state;
            std::getline(is >> std::ws, state);
            ckpt.rng_states[name] = state;
        } else if (kind == "tensor") {
            CheckpointTensor t;
            std::size_t rank = 0;
            if (!(is >> t.name >> rank)) throw fail("malformed tensor line");
            t.shape.resize(rank);
            for (auto& d : t.shape)
                if (!(is >> d)) throw fail("malformed shape for tensor " + t.name);
            Entry e{};
            if (!(is >> e.offset >> e.count)) throw fail("malformed offset for tensor " + t.name);
            if (numel_of(t.shape) != e.count)
                throw fail("tensor " + t.name + " shape " + to_string(t.shape) + " does not match count " +
                           std::to_string(e.count));
            entries.push_back(e);
            ckpt.tensors.push_back(std::move(t));
        } else {
            throw fail("unknown manifest line '" + kind + "'");
        }
    }
    if (!ended) throw fail("manifest is not terminated (file truncated?)");

    const std::streampos blob_start = in.tellg();
    in.seekg(0, std::ios::end);
    const auto blob_bytes = static_cast<std::size_t>(in.tellg() - blob_start);
    in.seekg(blob_start);
    std::size_t expected = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].offset != expected) throw fail("tensor " + ckpt.tensors[i].name + " has an unexpected offset");
        expected += entries[i].count * sizeof(float);
    }
    if (blob_bytes != expected)
        throw fail("corrupt checkpoint: blob holds " + std::to_string(blob_bytes) + " bytes, manifest declares " +
                   std::to_string(expected));
    std::vector<std::uint32_t> buf;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        buf.resize(entries[i].count);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        if (!in) throw fail("corrupt checkpoint: short read in tensor " + ckpt.tensors[i].name);
        auto& values = ckpt.tensors[i].values;
        values.resize(buf.size());
        for (std::size_t k = 0; k < buf.size(); ++k) values[k] = std::bit_cast<float>(to_le(buf[k]));
    }
    return ckpt;
}

template <typename T>
void store_params(Checkpoint& ckpt, const std::string& prefix, const ParamSet<T>& params) {
    auto put = [&](const std::string& name, const Tensor<T>& t) {
        CheckpointTensor ct{prefix + "/" + name, t.shape(), {}};
        ct.values.reserve(t.numel());
        for (T v : t.data()) ct.values.push_back(static_cast<float>(v));
        ckpt.tensors.push_back(std::move(ct));
    };
    for (const auto& g : params.groups()) {
        put(g.name + ".weight", g.weight);
        if (g.bias) put(g.name + ".bias", *g.bias);
    }
}

template <typename T>
void restore_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet<T>& params) {
    auto get = [&](const std::string& name, Tensor<T>& t) {
        const std::string full = prefix + "/" + name;
        const CheckpointTensor* ct = ckpt.find(full);
        if (!ct) throw CheckpointError("checkpoint is missing tensor '" + full + "'");
        if (ct->shape != t.shape())
            throw CheckpointError("tensor '" + full + "' has shape " + to_string(ct->shape) + ", model expects " +
                                  to_string(t.shape()));
        auto dst = t.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(ct->values[i]);
    };
    for (auto& g : params.groups()) {
        get(g.name + ".weight", g.weight);
        if (g.bias) get(g.name + ".bias", *g.bias);
    }
}

template void store_params<float>(Checkpoint&, const std::string&, const ParamSet<float>&);
template void store_params<double>(Checkpoint&, const std::string&, const ParamSet<double>&);
template void restore_params<float>(const Checkpoint&, const std::string&, ParamSet<float>&);
template void restore_params<double>(const Checkpoint&, const std::string&, ParamSet<double>&);

}  // namespace maskrestore
