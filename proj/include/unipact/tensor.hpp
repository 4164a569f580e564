#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "unipact/common.hpp"

namespace unipact {

// Dense float32 tensors with reverse-mode autodiff. Row-major, explicit
// shapes, no broadcasting except scalar-tensor. Graphs are single-threaded;
// a graph and its tensors may move between threads but are never shared
// mutably.

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;  // sized on first use
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "leaf";

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

namespace detail {
inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

/// Scoped guard disabling graph construction (inference mode).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0f, requires_grad);
    }

    static Tensor filled(Shape shape, float value, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->data.assign(static_cast<size_t>(shape_numel(n->shape)), value);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        for (float& x : t.node()->data) x = rng.normal_f() * stddev;
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t numel() const { return n_->numel(); }
    int64_t dim(size_t i) const { return n_->shape.at(i); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    std::vector<float>& data() { return n_->data; }
    const std::vector<float>& data() const { return n_->data; }
    std::vector<float>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    const std::vector<float>& grad_view() const { return n_->grad; }
    bool has_grad() const { return n_ && !n_->grad.empty(); }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
    }

    float item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
        return n_->data[0];
    }

    float at(int64_t i) const { return n_->data[static_cast<size_t>(i)]; }
    float at(int64_t i, int64_t j) const {
        return n_->data[static_cast<size_t>(i * n_->shape[1] + j)];
    }

    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// ---------------------------------------------------------------------------
// raw kernels (row-major, contiguous)
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n]
inline void gemm_nn(float* c, const float* a, const float* b, int64_t m, int64_t k, int64_t n,
                    bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0f);
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            float av = arow[p];
            if (av == 0.0f) continue;
            const float* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
// The reduction uses 16 fixed-order lane accumulators so it vectorizes without
// the compiler having to reassociate floating-point adds; the summation order
// is pinned by the code and therefore identical on every run.
inline void gemm_nt(float* c, const float* a, const float* b, int64_t m, int64_t k, int64_t n,
                    bool accumulate) {
    constexpr int64_t kLanes = 16;
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const float* brow = b + j * k;
            float lane[kLanes] = {};
            const int64_t kmain = k - k % kLanes;
            int64_t p = 0;
            for (; p < kmain; p += kLanes)
                for (int64_t l = 0; l < kLanes; ++l) lane[l] += arow[p + l] * brow[p + l];
            float tail = 0.0f;
            for (; p < k; ++p) tail += arow[p] * brow[p];
            for (int64_t w = kLanes / 2; w > 0; w /= 2)
                for (int64_t l = 0; l < w; ++l) lane[l] += lane[l + w];
            float acc = lane[0] + tail;
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
inline void gemm_tn(float* c, const float* a, const float* b, int64_t m, int64_t k, int64_t n,
                    bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, 0.0f);
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        const float* brow = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            float av = arow[p];
            if (av == 0.0f) continue;
            float* crow = c + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline Tensor make_op_result(Shape shape, const char* op, std::vector<NodePtr> parents) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(shape_numel(n->shape)), 0.0f);
    n->op = op;
    bool rg = false;
    if (grad_enabled())
        for (auto& p : parents)
            if (p && p->requires_grad) rg = true;
    n->requires_grad = rg;
    if (rg) n->parents = std::move(parents);
    return Tensor(n);
}

inline void check_matrix(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw std::invalid_argument(std::string(op) + ": expected a 2-d tensor, got shape " +
                                    shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_matrix(a, "matmul");
    detail::check_matrix(b, "matmul");
    int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    Tensor out = detail::make_op_result({m, n}, "matmul", {a.node(), b.node()});
    detail::gemm_nn(out.data().data(), a.data().data(), b.data().data(), m, k, n, false);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.node()->backward_fn = [an, bn, m, k, n](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nt(an->grad.data(), self.grad.data(), bn->data.data(), m, n, k, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(bn->grad.data(), an->data.data(), self.grad.data(), m, k, n, true);
            }
        };
    }
    return out;
}

/// a[m,k] times b[n,k] transposed -> [m,n]. Weights are stored [out,in], so
/// this is the layout used by linear layers and the tied output head.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::check_matrix(a, "matmul_nt");
    detail::check_matrix(b, "matmul_nt");
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (k != b.dim(1))
        throw std::invalid_argument("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()) + "^T");
    Tensor out = detail::make_op_result({m, n}, "matmul_nt", {a.node(), b.node()});
    detail::gemm_nt(out.data().data(), a.data().data(), b.data().data(), m, k, n, false);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.node()->backward_fn = [an, bn, m, k, n](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nn(an->grad.data(), self.grad.data(), bn->data.data(), m, n, k, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(bn->grad.data(), self.grad.data(), an->data.data(), m, n, k, true);
            }
        };
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Tensor out = detail::make_op_result(a.shape(), "add", {a.node(), b.node()});
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.node()->backward_fn = [an, bn](TensorNode& self) {
            for (auto* p : {an.get(), bn.get()}) {
                if (!p->requires_grad) continue;
                p->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
            }
        };
    }
    return out;
}

/// x[T,d] + bias[d], broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::check_matrix(x, "add_bias");
    int64_t t = x.dim(0), d = x.dim(1);
    if (bias.numel() != d)
        throw std::invalid_argument("add_bias: bias size " + std::to_string(bias.numel()) +
                                    " != row width " + std::to_string(d));
    Tensor out = detail::make_op_result(x.shape(), "add_bias", {x.node(), bias.node()});
    const auto& xd = x.data();
    const auto& bd = bias.data();
    auto& od = out.data();
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j) od[i * d + j] = xd[i * d + j] + bd[j];
    if (out.requires_grad()) {
        auto xn = x.node(), bn = bias.node();
        out.node()->backward_fn = [xn, bn, t, d](TensorNode& self) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t j = 0; j < d; ++j) bn->grad[j] += self.grad[i * d + j];
            }
        };
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Tensor out = detail::make_op_result(a.shape(), "mul", {a.node(), b.node()});
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.node()->backward_fn = [an, bn](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->data[i];
            }
        };
    }
    return out;
}

inline Tensor scale(const Tensor& a, float c) {
    Tensor out = detail::make_op_result(a.shape(), "scale", {a.node()});
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * c;
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backward_fn = [an, c](TensorNode& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
        };
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    Tensor out = detail::make_op_result({1}, "sum", {a.node()});
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    out.data()[0] = static_cast<float>(acc);
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backward_fn = [an](TensorNode& self) {
            an->ensure_grad();
            float g = self.grad[0];
            for (float& v : an->grad) v += g;
        };
    }
    return out;
}

inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
inline constexpr float kGeluA = 0.044715f;

inline Tensor gelu(const Tensor& x) {
    Tensor out = detail::make_op_result(x.shape(), "gelu", {x.node()});
    constexpr float kC = kGeluC;
    constexpr float kA = kGeluA;
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) {
        float v = xd[i];
        float t = std::tanh(kC * (v + kA * v * v * v));
        od[i] = 0.5f * v * (1.0f + t);
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn](TensorNode& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                float v = xn->data[i];
                float inner = kGeluC * (v + kGeluA * v * v * v);
                float t = std::tanh(inner);
                float dinner = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
                float dv = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * dinner;
                xn->grad[i] += self.grad[i] * dv;
            }
        };
    }
    return out;
}

/// Row-wise softmax with max subtraction. Rows sum to 1 within 1e-6.
inline Tensor softmax(const Tensor& x) {
    if (x.shape().empty()) throw std::invalid_argument("softmax: empty shape");
    int64_t v = x.shape().back();
    int64_t rows = x.numel() / v;
    Tensor out = detail::make_op_result(x.shape(), "softmax", {x.node()});
    const auto& xd = x.data();
    auto& od = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* in = xd.data() + r * v;
        float* o = od.data() + r * v;
        float mx = in[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
        float denom = 0.0f;
        for (int64_t j = 0; j < v; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        float inv = 1.0f / denom;
        for (int64_t j = 0; j < v; ++j) o[j] *= inv;
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto on = out.node();
        out.node()->backward_fn = [xn, on, rows, v](TensorNode& self) {
            xn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const float* p = on->data.data() + r * v;
                const float* dy = self.grad.data() + r * v;
                float dot = 0.0f;
                for (int64_t j = 0; j < v; ++j) dot += dy[j] * p[j];
                float* dx = xn->grad.data() + r * v;
                for (int64_t j = 0; j < v; ++j) dx[j] += p[j] * (dy[j] - dot);
            }
        };
    }
    return out;
}

/// LayerNorm over the last dimension with learned gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         float eps = 1e-5f) {
    detail::check_matrix(x, "layer_norm");
    int64_t t = x.dim(0), d = x.dim(1);
    if (gain.numel() != d || bias.numel() != d)
        throw std::invalid_argument("layer_norm: gain/bias size must equal row width");
    Tensor out = detail::make_op_result(x.shape(), "layer_norm", {x.node(), gain.node(), bias.node()});
    auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(t * d));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(t));
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    auto& od = out.data();
    for (int64_t i = 0; i < t; ++i) {
        const float* row = xd.data() + i * d;
        float mean = 0.0f;
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (int64_t j = 0; j < d; ++j) {
            float c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<float>(d);
        float is = 1.0f / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < d; ++j) {
            float xh = (row[j] - mean) * is;
            (*xhat)[static_cast<size_t>(i * d + j)] = xh;
            od[i * d + j] = gd[j] * xh + bd[j];
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node();
        out.node()->backward_fn = [xn, gn, bn, xhat, inv_std, t, d](TensorNode& self) {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (int64_t i = 0; i < t; ++i) {
                const float* dy = self.grad.data() + i * d;
                const float* xh = xhat->data() + i * d;
                if (gn->requires_grad)
                    for (int64_t j = 0; j < d; ++j) gn->grad[j] += dy[j] * xh[j];
                if (bn->requires_grad)
                    for (int64_t j = 0; j < d; ++j) bn->grad[j] += dy[j];
                if (xn->requires_grad) {
                    float is = (*inv_std)[static_cast<size_t>(i)];
                    float m1 = 0.0f, m2 = 0.0f;
                    for (int64_t j = 0; j < d; ++j) {
                        float dxh = dy[j] * gn->data[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= static_cast<float>(d);
                    m2 /= static_cast<float>(d);
                    float* dx = xn->grad.data() + i * d;
                    for (int64_t j = 0; j < d; ++j) {
                        float dxh = dy[j] * gn->data[j];
                        dx[j] += is * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        };
    }
    return out;
}

/// Mean of -log softmax(logits)[target] over masked rows. Rows with
/// mask=false contribute zero loss and receive exactly zero gradient.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask) {
    detail::check_matrix(logits, "cross_entropy");
    int64_t t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != t || static_cast<int64_t>(mask.size()) != t)
        throw std::invalid_argument("cross_entropy: targets/mask length must equal row count");
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < t; ++i)
        if (mask[static_cast<size_t>(i)]) rows.push_back(i);
    if (rows.empty()) throw std::invalid_argument("cross_entropy: no supervised positions");
    for (int64_t i : rows) {
        int tid = targets[static_cast<size_t>(i)];
        if (tid < 0 || tid >= v)
            throw std::invalid_argument("cross_entropy: target id " + std::to_string(tid) +
                                        " out of range for vocab " + std::to_string(v));
    }
    Tensor out = detail::make_op_result({1}, "cross_entropy", {logits.node()});
    auto probs = std::make_shared<std::vector<float>>(rows.size() * static_cast<size_t>(v));
    const auto& ld = logits.data();
    double loss = 0.0;
    for (size_t r = 0; r < rows.size(); ++r) {
        const float* in = ld.data() + rows[r] * v;
        float* p = probs->data() + r * static_cast<size_t>(v);
        float mx = in[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            p[j] = std::exp(in[j] - mx);
            denom += p[j];
        }
        float inv = static_cast<float>(1.0 / denom);
        for (int64_t j = 0; j < v; ++j) p[j] *= inv;
        int tid = targets[static_cast<size_t>(rows[r])];
        loss -= std::log(std::max(static_cast<double>(p[tid]), 1e-30));
    }
    out.data()[0] = static_cast<float>(loss / static_cast<double>(rows.size()));
    if (out.requires_grad()) {
        auto ln = logits.node();
        auto rows_c = std::make_shared<std::vector<int64_t>>(rows);
        auto tgt = std::make_shared<std::vector<int>>(targets);
        out.node()->backward_fn = [ln, probs, rows_c, tgt, v](TensorNode& self) {
            ln->ensure_grad();
            float g = self.grad[0] / static_cast<float>(rows_c->size());
            for (size_t r = 0; r < rows_c->size(); ++r) {
                float* dst = ln->grad.data() + (*rows_c)[r] * v;
                const float* p = probs->data() + r * static_cast<size_t>(v);
                int tid = (*tgt)[static_cast<size_t>((*rows_c)[r])];
                for (int64_t j = 0; j < v; ++j) dst[j] += g * p[j];
                dst[tid] -= g;
            }
        };
    }
    return out;
}

/// Gather rows of an embedding table: out[i] = table[ids[i]].
inline Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids) {
    detail::check_matrix(table, "embedding_gather");
    int64_t v = table.dim(0), d = table.dim(1);
    int64_t t = static_cast<int64_t>(ids.size());
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::invalid_argument("embedding_gather: id " + std::to_string(id) +
                                        " out of range for table of " + std::to_string(v));
    Tensor out = detail::make_op_result({t, d}, "embedding_gather", {table.node()});
    const auto& td = table.data();
    auto& od = out.data();
    for (int64_t i = 0; i < t; ++i)
        std::copy_n(td.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d, d,
                    od.data() + i * d);
    if (out.requires_grad()) {
        auto tn = table.node();
        auto ids_c = std::make_shared<std::vector<int>>(ids);
        out.node()->backward_fn = [tn, ids_c, d](TensorNode& self) {
            tn->ensure_grad();
            for (size_t i = 0; i < ids_c->size(); ++i) {
                float* dst = tn->grad.data() + static_cast<int64_t>((*ids_c)[i]) * d;
                const float* src = self.grad.data() + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return out;
}

/// Select a subset of rows: out[i] = x[idx[i]].
inline Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx) {
    detail::check_matrix(x, "gather_rows");
    int64_t t = x.dim(0), d = x.dim(1);
    for (int64_t i : idx)
        if (i < 0 || i >= t) throw std::invalid_argument("gather_rows: row index out of range");
    Tensor out = detail::make_op_result({static_cast<int64_t>(idx.size()), d}, "gather_rows",
                                        {x.node()});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(x.data().data() + idx[i] * d, d, out.data().data() + static_cast<int64_t>(i) * d);
    if (out.requires_grad()) {
        auto xn = x.node();
        auto idx_c = std::make_shared<std::vector<int64_t>>(idx);
        out.node()->backward_fn = [xn, idx_c, d](TensorNode& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < idx_c->size(); ++i) {
                float* dst = xn->grad.data() + (*idx_c)[i] * d;
                const float* src = self.grad.data() + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return out;
}

/// Contiguous row slice [start, start+len).
inline Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
    detail::check_matrix(x, "slice_rows");
    int64_t t = x.dim(0), d = x.dim(1);
    if (start < 0 || len < 0 || start + len > t)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") out of bounds for " +
                                    std::to_string(t) + " rows");
    Tensor out = detail::make_op_result({len, d}, "slice_rows", {x.node()});
    std::copy_n(x.data().data() + start * d, len * d, out.data().data());
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn, start, d](TensorNode& self) {
            xn->ensure_grad();
            float* dst = xn->grad.data() + start * d;
            for (size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
        };
    }
    return out;
}

/// Stack two row blocks: [a; b].
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::check_matrix(a, "concat_rows");
    detail::check_matrix(b, "concat_rows");
    if (a.dim(1) != b.dim(1))
        throw std::invalid_argument("concat_rows: widths differ, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    int64_t na = a.dim(0), nb = b.dim(0), d = a.dim(1);
    Tensor out = detail::make_op_result({na + nb, d}, "concat_rows", {a.node(), b.node()});
    std::copy_n(a.data().data(), na * d, out.data().data());
    std::copy_n(b.data().data(), nb * d, out.data().data() + na * d);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.node()->backward_fn = [an, bn, na, nb, d](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < na * d; ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < nb * d; ++i) bn->grad[i] += self.grad[na * d + i];
            }
        };
    }
    return out;
}

/// Multi-head scaled dot-product self-attention over a [T,d] sequence.
/// With causal=true position t attends to positions <= t only. identity_probe
/// replaces the attention matrix with I (diagnostic mode for encoder tests).
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                        bool causal, bool identity_probe = false) {
    detail::check_matrix(q, "attention");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw std::invalid_argument("attention: q/k/v shapes must match");
    int64_t t = q.dim(0), d = q.dim(1);
    if (n_heads <= 0 || d % n_heads != 0)
        throw std::invalid_argument("attention: width " + std::to_string(d) +
                                    " not divisible by heads " + std::to_string(n_heads));
    int64_t hd = d / n_heads;
    float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    Tensor out = detail::make_op_result({t, d}, "attention", {q.node(), k.node(), v.node()});

    // per-head attention probabilities, saved for backward
    auto probs = std::make_shared<std::vector<float>>(
        static_cast<size_t>(n_heads) * static_cast<size_t>(t * t), 0.0f);
    const float* qd = q.data().data();
    const float* kd = k.data().data();
    const float* vd = v.data().data();
    float* od = out.data().data();
    std::vector<float> srow(static_cast<size_t>(t));
    for (int h = 0; h < n_heads; ++h) {
        int64_t off = static_cast<int64_t>(h) * hd;
        float* p_h = probs->data() + static_cast<size_t>(h) * static_cast<size_t>(t * t);
        for (int64_t i = 0; i < t; ++i) {
            int64_t jmax = causal ? i + 1 : t;
            float* prow = p_h + i * t;
            if (identity_probe) {
                prow[i] = 1.0f;
            } else {
                const float* qi = qd + i * d + off;
                float mx = -std::numeric_limits<float>::infinity();
                for (int64_t j = 0; j < jmax; ++j) {
                    const float* kj = kd + j * d + off;
                    float acc = 0.0f;
                    for (int64_t c = 0; c < hd; ++c) acc += qi[c] * kj[c];
                    srow[static_cast<size_t>(j)] = acc * inv_sqrt;
                    mx = std::max(mx, srow[static_cast<size_t>(j)]);
                }
                float denom = 0.0f;
                for (int64_t j = 0; j < jmax; ++j) {
                    float e = std::exp(srow[static_cast<size_t>(j)] - mx);
                    prow[j] = e;
                    denom += e;
                }
                float inv = 1.0f / denom;
                for (int64_t j = 0; j < jmax; ++j) prow[j] *= inv;
            }
            float* orow = od + i * d + off;
            for (int64_t j = 0; j < jmax; ++j) {
                float pv = prow[j];
                if (pv == 0.0f) continue;
                const float* vj = vd + j * d + off;
                for (int64_t c = 0; c < hd; ++c) orow[c] += pv * vj[c];
            }
        }
    }
    if (out.requires_grad()) {
        auto qn = q.node(), kn = k.node(), vn = v.node();
        out.node()->backward_fn = [qn, kn, vn, probs, n_heads, t, d, hd, inv_sqrt, causal,
                                   identity_probe](TensorNode& self) {
            qn->ensure_grad();
            kn->ensure_grad();
            vn->ensure_grad();
            std::vector<float> dp(static_cast<size_t>(t));
            std::vector<float> ds(static_cast<size_t>(t));
            for (int h = 0; h < n_heads; ++h) {
                int64_t off = static_cast<int64_t>(h) * hd;
                const float* p_h = probs->data() + static_cast<size_t>(h) * static_cast<size_t>(t * t);
                for (int64_t i = 0; i < t; ++i) {
                    int64_t jmax = causal ? i + 1 : t;
                    const float* prow = p_h + i * t;
                    const float* doi = self.grad.data() + i * d + off;
                    // dV and dP
                    for (int64_t j = 0; j < jmax; ++j) {
                        const float* vj = vn->data.data() + j * d + off;
                        float* dvj = vn->grad.data() + j * d + off;
                        float pv = prow[j];
                        float acc = 0.0f;
                        for (int64_t c = 0; c < hd; ++c) {
                            dvj[c] += pv * doi[c];
                            acc += doi[c] * vj[c];
                        }
                        dp[static_cast<size_t>(j)] = acc;
                    }
                    if (identity_probe) continue;  // scores held fixed in probe mode
                    float dot = 0.0f;
                    for (int64_t j = 0; j < jmax; ++j) dot += dp[static_cast<size_t>(j)] * prow[j];
                    for (int64_t j = 0; j < jmax; ++j)
                        ds[static_cast<size_t>(j)] =
                            prow[j] * (dp[static_cast<size_t>(j)] - dot) * inv_sqrt;
                    const float* qi = qn->data.data() + i * d + off;
                    float* dqi = qn->grad.data() + i * d + off;
                    for (int64_t j = 0; j < jmax; ++j) {
                        float dsv = ds[static_cast<size_t>(j)];
                        if (dsv == 0.0f) continue;
                        const float* kj = kn->data.data() + j * d + off;
                        float* dkj = kn->grad.data() + j * d + off;
                        for (int64_t c = 0; c < hd; ++c) {
                            dqi[c] += dsv * kj[c];
                            dkj[c] += dsv * qi[c];
                        }
                    }
                }
            }
        };
    }
    return out;
}

/// Inverted dropout. Active only when `active`; mask drawn from `rng`.
inline Tensor dropout(const Tensor& x, float p, Rng& rng, bool active) {
    if (p < 0.0f || p >= 1.0f) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!active || p == 0.0f) return x;
    Tensor out = detail::make_op_result(x.shape(), "dropout", {x.node()});
    auto mask = std::make_shared<std::vector<float>>(x.data().size());
    float scale_keep = 1.0f / (1.0f - p);
    for (size_t i = 0; i < mask->size(); ++i)
        (*mask)[i] = rng.uniform() < p ? 0.0f : scale_keep;
    for (size_t i = 0; i < mask->size(); ++i) out.data()[i] = x.data()[i] * (*mask)[i];
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn, mask](TensorNode& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * (*mask)[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Topologically ordered op records of the graph reachable from a root.
struct Graph {
    std::vector<NodePtr> order;  // parents before children

    static Graph build(const Tensor& root) {
        Graph g;
        if (!root.defined()) return g;
        std::unordered_set<TensorNode*> seen;
        // iterative post-order DFS
        std::vector<std::pair<NodePtr, size_t>> stack;
        stack.emplace_back(root.node(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                NodePtr next = node->parents[idx++];
                if (next && !seen.count(next.get())) {
                    seen.insert(next.get());
                    stack.emplace_back(next, 0);
                }
            } else {
                g.order.push_back(node);
                stack.pop_back();
            }
        }
        return g;
    }
};

/// Reverse-mode sweep from a scalar loss; fills .grad of every reachable
/// tensor with requires_grad. Each node is visited exactly once.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward: root must be a scalar");
    Graph g = Graph::build(loss);
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0f;
    for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
        TensorNode& n = **it;
        if (!n.requires_grad || !n.backward_fn) continue;
        n.ensure_grad();
        n.backward_fn(n);
    }
    // release closures so saved activations free promptly
    for (auto& n : g.order) {
        n->backward_fn = nullptr;
        n->parents.clear();
    }
}

}  // namespace unipact
