#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "unipact/tensor.hpp"

namespace unipact {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

/// Adam with bias correction. Holds first/second moment buffers for a fixed
/// list of parameters registered at construction.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].data().size(), 0.0f);
            v_[i].assign(params_[i].data().size(), 0.0f);
        }
    }

    int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }
    const std::vector<Tensor>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// One update over all registered parameters. Parameters without an
    /// allocated grad buffer are treated as zero-gradient.
    void step() {
        ++step_;
        float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(step_));
        float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(step_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].data();
            const auto& g = params_[i].grad_view();
            if (!g.empty() && g.size() != p.size())
                throw std::invalid_argument("adam: grad/param shape mismatch at index " +
                                            std::to_string(i));
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < p.size(); ++j) {
                float gj = g.empty() ? 0.0f : g[j];
                m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * gj * gj;
                float mhat = m[j] / bc1;
                float vhat = v[j] / bc2;
                p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    int64_t step_ = 0;
};

}  // namespace unipact
