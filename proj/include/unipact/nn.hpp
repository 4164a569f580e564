#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unipact/common.hpp"
#include "unipact/tensor.hpp"

namespace unipact {

// Forward-pass context: training enables dropout, which draws from `rng`.
struct Mode {
    bool training = false;
    Rng* rng = nullptr;
};

using ParamMap = std::vector<std::pair<std::string, Tensor>>;

struct LoraConfig {
    int r = 8;
    float alpha = 16.0f;
    float dropout = 0.05f;
};

// Additive low-rank branch for a frozen base linear map:
//   y = W_base x + (alpha/r) * B (A dropout(x)),  B zero-initialized.
struct LoraAdapter {
    Tensor a;  // [r, d_in]
    Tensor b;  // [d_out, r]
    int r = 0;
    float alpha = 0.0f;
    float dropout = 0.0f;

    float scaling() const { return alpha / static_cast<float>(r); }

    static LoraAdapter make(int64_t d_in, int64_t d_out, const LoraConfig& cfg, uint64_t seed) {
        if (cfg.r <= 0) throw std::invalid_argument("lora: rank must be positive");
        if (cfg.r >= std::min(d_in, d_out))
            throw std::invalid_argument("lora: rank " + std::to_string(cfg.r) +
                                        " must be smaller than min(d_in, d_out) = " +
                                        std::to_string(std::min(d_in, d_out)));
        LoraAdapter ad;
        Rng rng(seed);
        ad.a = Tensor::randn({cfg.r, d_in}, rng,
                             1.0f / std::sqrt(static_cast<float>(d_in)));
        ad.b = Tensor::zeros({d_out, cfg.r});
        ad.r = cfg.r;
        ad.alpha = cfg.alpha;
        ad.dropout = cfg.dropout;
        return ad;
    }

    // (alpha/r) * B (A dropout(x)) for row-major x [T, d_in]
    Tensor forward(const Tensor& x, const Mode& m) const {
        Tensor h = x;
        if (m.training && dropout > 0.0f) {
            if (!m.rng) throw std::runtime_error("lora: training mode requires an rng");
            h = unipact::dropout(h, dropout, *m.rng, true);
        }
        return scale(matmul_nt(matmul_nt(h, a), b), scaling());
    }
};

// y = x W^T (+ bias), weights stored [out, in] so rows are output features.
class Linear {
public:
    Linear() = default;

    Linear(int64_t in, int64_t out, uint64_t seed, bool bias = true)
        : in_(in), out_(out), has_bias_(bias) {
        Rng rng(seed);
        w_ = Tensor::randn({out, in}, rng, 1.0f / std::sqrt(static_cast<float>(in)));
        if (bias) b_ = Tensor::zeros({1, out});
    }

    Tensor forward(const Tensor& x, const Mode& m) const {
        if (x.shape().back() != in_)
            throw std::invalid_argument("linear: input width " + std::to_string(x.shape().back()) +
                                        " != expected " + std::to_string(in_));
        Tensor y = matmul_nt(x, w_);
        if (has_bias_) y = add_bias(y, b_);
        if (lora_) y = add(y, lora_->forward(x, m));
        return y;
    }

    void add_lora(const LoraConfig& cfg, uint64_t seed) {
        lora_ = LoraAdapter::make(in_, out_, cfg, seed);
    }

    void collect(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".w", w_);
        if (has_bias_) out.emplace_back(prefix + ".b", b_);
        if (lora_) {
            out.emplace_back(prefix + ".lora_a", lora_->a);
            out.emplace_back(prefix + ".lora_b", lora_->b);
        }
    }

    int64_t in_features() const { return in_; }
    int64_t out_features() const { return out_; }
    const Tensor& weight() const { return w_; }
    const Tensor& bias() const { return b_; }
    bool has_lora() const { return lora_.has_value(); }
    const LoraAdapter& lora() const { return *lora_; }
    LoraAdapter& lora() { return *lora_; }

private:
    int64_t in_ = 0, out_ = 0;
    bool has_bias_ = true;
    Tensor w_, b_;
    std::optional<LoraAdapter> lora_;
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(int64_t d) : g_(Tensor::filled({1, d}, 1.0f)), b_(Tensor::zeros({1, d})) {}

    Tensor forward(const Tensor& x) const { return layer_norm(x, g_, b_); }

    void collect(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".g", g_);
        out.emplace_back(prefix + ".b", b_);
    }

private:
    Tensor g_, b_;
};

// Pre-norm transformer block: x + O(attn(LN1 x)), then h + FFN(LN2 h).
class TransformerBlock {
public:
    TransformerBlock() = default;

    TransformerBlock(int64_t d, int n_heads, int ffn_mult, bool causal, uint64_t seed)
        : n_heads_(n_heads), causal_(causal), ln1_(d), ln2_(d) {
        auto sub = [&](const char* tag) { return derive_seed(seed, tag); };
        q_ = Linear(d, d, sub("q"));
        k_ = Linear(d, d, sub("k"));
        v_ = Linear(d, d, sub("v"));
        o_ = Linear(d, d, sub("o"));
        fc1_ = Linear(d, d * ffn_mult, sub("fc1"));
        fc2_ = Linear(d * ffn_mult, d, sub("fc2"));
    }

    Tensor forward(const Tensor& x, const Mode& m, bool identity_probe = false) const {
        Tensor u = ln1_.forward(x);
        Tensor att = attention(q_.forward(u, m), k_.forward(u, m), v_.forward(u, m), n_heads_,
                               causal_, identity_probe);
        Tensor h = add(x, o_.forward(att, m));
        Tensor f = ln2_.forward(h);
        return add(h, fc2_.forward(gelu(fc1_.forward(f, m)), m));
    }

    void add_lora(const LoraConfig& cfg, uint64_t seed) {
        q_.add_lora(cfg, derive_seed(seed, "q"));
        k_.add_lora(cfg, derive_seed(seed, "k"));
        v_.add_lora(cfg, derive_seed(seed, "v"));
        o_.add_lora(cfg, derive_seed(seed, "o"));
        fc1_.add_lora(cfg, derive_seed(seed, "fc1"));
        fc2_.add_lora(cfg, derive_seed(seed, "fc2"));
    }

    void collect(const std::string& prefix, ParamMap& out) const {
        ln1_.collect(prefix + ".ln1", out);
        q_.collect(prefix + ".attn_q", out);
        k_.collect(prefix + ".attn_k", out);
        v_.collect(prefix + ".attn_v", out);
        o_.collect(prefix + ".attn_o", out);
        ln2_.collect(prefix + ".ln2", out);
        fc1_.collect(prefix + ".ffn_fc1", out);
        fc2_.collect(prefix + ".ffn_fc2", out);
    }

private:
    int n_heads_ = 1;
    bool causal_ = false;
    LayerNorm ln1_, ln2_;
    Linear q_, k_, v_, o_, fc1_, fc2_;
};

// Trainable-set helpers over a collected ParamMap.
inline void set_trainable(ParamMap& params, bool value) {
    for (auto& [name, t] : params) {
        (void)name;
        t.set_requires_grad(value);
    }
}

inline std::vector<Tensor> select_params(const ParamMap& params,
                                         const std::function<bool(const std::string&)>& pred) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params)
        if (pred(name)) out.push_back(t);
    return out;
}

inline bool is_adapter_param(const std::string& name) {
    return name.find(".lora_") != std::string::npos;
}

}  // namespace unipact
