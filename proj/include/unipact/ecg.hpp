#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "unipact/nn.hpp"
#include "unipact/tensor.hpp"

namespace unipact {

// Raw waveform, time-major: samples[t, c] in millivolts.
struct EcgSignal {
    Tensor samples;  // [L, C]
    float sample_rate = 0.0f;
};

inline constexpr int64_t kEcgLeads = 12;

struct EncoderConfig {
    int patch_len = 50;
    int d_ecg = 64;
    int n_layers = 2;
    int n_heads = 4;
    int ffn_mult = 4;
    int max_positions = 128;
};

// ---------------------------------------------------------------------------
// waveform file format: magic "UPCT", version u32, L u32, C u32,
// then L*C little-endian f32, time-major.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kEcgFileVersion = 1;

inline void write_upct(const std::string& path, const Tensor& samples) {
    if (samples.shape().size() != 2)
        throw std::invalid_argument("write_upct: samples must be 2-D [L, C]");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_upct: cannot open for write: " + path);
    uint32_t version = kEcgFileVersion;
    uint32_t L = static_cast<uint32_t>(samples.shape()[0]);
    uint32_t C = static_cast<uint32_t>(samples.shape()[1]);
    f.write("UPCT", 4);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&L), 4);
    f.write(reinterpret_cast<const char*>(&C), 4);
    f.write(reinterpret_cast<const char*>(samples.data().data()),
            static_cast<std::streamsize>(samples.data().size() * sizeof(float)));
    if (!f) throw std::runtime_error("write_upct: write failed: " + path);
}

inline Tensor read_upct(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_upct: cannot open: " + path);
    char magic[4];
    uint32_t version = 0, L = 0, C = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&L), 4);
    f.read(reinterpret_cast<char*>(&C), 4);
    if (!f || std::memcmp(magic, "UPCT", 4) != 0)
        throw std::runtime_error("read_upct: bad magic in " + path);
    if (version != kEcgFileVersion)
        throw std::runtime_error("read_upct: unsupported version " + std::to_string(version) +
                                 " in " + path);
    Tensor out = Tensor::zeros({static_cast<int64_t>(L), static_cast<int64_t>(C)});
    f.read(reinterpret_cast<char*>(out.data().data()),
           static_cast<std::streamsize>(out.data().size() * sizeof(float)));
    if (!f) throw std::runtime_error("read_upct: truncated payload in " + path);
    return out;
}

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

// Non-overlapping time patches with leads flattened per patch (time-major
// inside the patch), so row n is the contiguous slab samples[n*P .. (n+1)*P).
// Un-flattening rows therefore reproduces the signal bit-exactly.
inline Tensor patchify(const EcgSignal& sig, const EncoderConfig& cfg) {
    int64_t L = sig.samples.shape()[0];
    int64_t C = sig.samples.shape()[1];
    int64_t P = cfg.patch_len;
    if (P <= 0 || L % P != 0)
        throw std::invalid_argument("patchify: signal length " + std::to_string(L) +
                                    " is not divisible by patch_len " + std::to_string(P));
    int64_t N = L / P;
    Tensor out = Tensor::zeros({N, P * C});
    std::memcpy(out.data().data(), sig.samples.data().data(),
                static_cast<size_t>(L * C) * sizeof(float));
    return out;
}

// Per-lead z-score over time; constant leads normalize to zero.
inline EcgSignal zscore_per_lead(const EcgSignal& sig) {
    int64_t L = sig.samples.shape()[0];
    int64_t C = sig.samples.shape()[1];
    const auto& src = sig.samples.data();
    EcgSignal out;
    out.sample_rate = sig.sample_rate;
    out.samples = Tensor::zeros({L, C});
    auto& dst = out.samples.data();
    for (int64_t c = 0; c < C; ++c) {
        double mean = 0.0;
        for (int64_t t = 0; t < L; ++t) mean += src[static_cast<size_t>(t * C + c)];
        mean /= static_cast<double>(L);
        double var = 0.0;
        for (int64_t t = 0; t < L; ++t) {
            double d = src[static_cast<size_t>(t * C + c)] - mean;
            var += d * d;
        }
        var /= static_cast<double>(L);
        float inv = 1.0f / (std::sqrt(static_cast<float>(var)) + 1e-6f);
        float mu = static_cast<float>(mean);
        for (int64_t t = 0; t < L; ++t) {
            size_t i = static_cast<size_t>(t * C + c);
            dst[i] = (src[i] - mu) * inv;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

// Patch embedding + learned positions + pre-norm transformer stack + final
// layer norm, mapping [L, C] to [N, d_ecg] with N = L / patch_len.
class EcgEncoder {
public:
    EcgEncoder() = default;

    EcgEncoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
        if (cfg.d_ecg % cfg.n_heads != 0)
            throw std::invalid_argument("encoder: d_ecg " + std::to_string(cfg.d_ecg) +
                                        " not divisible by n_heads " +
                                        std::to_string(cfg.n_heads));
        patch_proj_ = Linear(static_cast<int64_t>(cfg.patch_len) * kEcgLeads, cfg.d_ecg,
                             derive_seed(seed, "encoder.patch_proj"));
        Rng pos_rng(derive_seed(seed, "encoder.pos"));
        pos_ = Tensor::randn({cfg.max_positions, cfg.d_ecg}, pos_rng, 0.02f);
        for (int i = 0; i < cfg.n_layers; ++i)
            blocks_.emplace_back(cfg.d_ecg, cfg.n_heads, cfg.ffn_mult, /*causal=*/false,
                                 derive_seed(seed, "encoder.block" + std::to_string(i)));
        final_ln_ = LayerNorm(cfg.d_ecg);
    }

    // identity_probe forces every attention map to the identity so that token
    // i depends only on patch i (diagnostic mode used by tests).
    Tensor encode(const EcgSignal& sig, const Mode& m, bool identity_probe = false) const {
        for (float v : sig.samples.data())
            if (!std::isfinite(v))
                throw std::invalid_argument("ecg encode: input contains non-finite values");
        if (sig.samples.shape()[1] != patch_proj_.in_features() / cfg_.patch_len)
            throw std::invalid_argument("ecg encode: expected " +
                                        std::to_string(patch_proj_.in_features() / cfg_.patch_len) +
                                        " leads, got " + std::to_string(sig.samples.shape()[1]));
        Tensor patches = patchify(zscore_per_lead(sig), cfg_);
        return encode_patches(patches, m, identity_probe);
    }

    Tensor encode_patches(const Tensor& patches, const Mode& m,
                          bool identity_probe = false) const {
        int64_t n = patches.shape()[0];
        if (n > cfg_.max_positions)
            throw std::invalid_argument("encoder: " + std::to_string(n) +
                                        " patches exceed max_positions " +
                                        std::to_string(cfg_.max_positions));
        Tensor x = add(patch_proj_.forward(patches, m), slice_rows(pos_, 0, n));
        for (const auto& b : blocks_) x = b.forward(x, m, identity_probe);
        return final_ln_.forward(x);
    }

    void add_lora(const LoraConfig& cfg, uint64_t seed) {
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].add_lora(cfg, derive_seed(seed, "encoder.block" + std::to_string(i)));
    }

    void collect(ParamMap& out) const {
        patch_proj_.collect("encoder.patch_proj", out);
        out.emplace_back("encoder.pos", pos_);
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].collect("encoder.block" + std::to_string(i), out);
        final_ln_.collect("encoder.final_ln", out);
    }

    const EncoderConfig& config() const { return cfg_; }

private:
    EncoderConfig cfg_;
    Linear patch_proj_;
    Tensor pos_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm final_ln_;
};

}  // namespace unipact
