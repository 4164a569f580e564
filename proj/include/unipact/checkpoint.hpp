#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "unipact/nn.hpp"
#include "unipact/tensor.hpp"

namespace unipact {

// Checkpoint file: magic "UPCK", version u32, then repeated sections
// [name-length u32, UTF-8 name, ndim u32, dims u32..., f32 payload].
// The final section, named "__config__", echoes the run configuration as
// text (one byte per float).

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr const char* kConfigSectionName = "__config__";

struct Checkpoint {
    ParamMap tensors;  // file order
    std::string config_echo;
};

inline void save_checkpoint(const std::string& path, const ParamMap& params,
                            const std::string& config_echo) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    auto put_u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    f.write("UPCK", 4);
    put_u32(kCheckpointVersion);
    auto write_section = [&](const std::string& name, const Shape& shape,
                             const std::vector<float>& data) {
        put_u32(static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(static_cast<uint32_t>(shape.size()));
        for (int64_t d : shape) put_u32(static_cast<uint32_t>(d));
        f.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(float)));
    };
    for (const auto& [name, t] : params) write_section(name, t.shape(), t.data());
    std::vector<float> echo(config_echo.size());
    for (size_t i = 0; i < config_echo.size(); ++i)
        echo[i] = static_cast<float>(static_cast<unsigned char>(config_echo[i]));
    write_section(kConfigSectionName, {static_cast<int64_t>(echo.size())}, echo);
    if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (!f || std::memcmp(magic, "UPCK", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                                 " in " + path);
    Checkpoint ckpt;
    while (true) {
        uint32_t name_len = 0;
        f.read(reinterpret_cast<char*>(&name_len), 4);
        if (f.eof()) break;
        if (!f || name_len > 4096)
            throw std::runtime_error("checkpoint: corrupt section header in " + path);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        uint32_t ndim = 0;
        f.read(reinterpret_cast<char*>(&ndim), 4);
        if (!f || ndim > 8) throw std::runtime_error("checkpoint: corrupt dims in " + path);
        Shape shape(ndim);
        size_t numel = 1;
        for (uint32_t i = 0; i < ndim; ++i) {
            uint32_t d = 0;
            f.read(reinterpret_cast<char*>(&d), 4);
            shape[i] = static_cast<int64_t>(d);
            numel *= d;
        }
        std::vector<float> data(numel);
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(numel * sizeof(float)));
        if (!f) throw std::runtime_error("checkpoint: truncated payload for section '" + name +
                                         "' in " + path);
        if (name == kConfigSectionName) {
            ckpt.config_echo.resize(data.size());
            for (size_t i = 0; i < data.size(); ++i)
                ckpt.config_echo[i] = static_cast<char>(static_cast<unsigned char>(data[i]));
        } else {
            ckpt.tensors.emplace_back(name, Tensor::from(shape, std::move(data)));
        }
    }
    return ckpt;
}

// Copies checkpoint payloads into an existing parameter map by name; every
// target parameter must be present with a matching shape, and the checkpoint
// must not contain tensors the target lacks.
inline void apply_checkpoint(ParamMap& target, const Checkpoint& ckpt) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : ckpt.tensors) by_name.emplace(name, &t);
    for (auto& [name, t] : target) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
        if (it->second->shape() != t.shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        t.data() = it->second->data();
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw std::runtime_error("checkpoint: unexpected tensor '" + by_name.begin()->first +
                                 "' not present in the model");
}

}  // namespace unipact
