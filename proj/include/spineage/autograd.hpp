#ifndef SPINEAGE_AUTOGRAD_HPP
#define SPINEAGE_AUTOGRAD_HPP

#include "errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

/**
 * @file autograd.hpp
 *
 * Minimal reverse-mode automatic differentiation over dense row-major arrays.
 *
 * Volumetric tensors use the layout [N, C, D, H, W] with W fastest. Every
 * operation records a closure on the result node; `Tensor::backward()` walks
 * the graph in reverse topological order and accumulates gradients into every
 * node that requires them, intermediate nodes included (Grad-CAM reads those).
 */

namespace spineage::ag {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += (i ? ", " : "") + std::to_string(s[i]);
    }
    return out + "]";
}

class ShapeError : public DimensionError {
public:
    using DimensionError::DimensionError;
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : saved_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
        return grad;
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() : node_(std::make_shared<Node<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->data.assign(ag::numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        if (data.size() != ag::numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor from_node(std::shared_ptr<Node<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& storage() { return node_->data; }
    const std::vector<T>& storage() const { return node_->data; }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<T> grad() { return node_->ensure_grad(); }
    std::span<const T> grad() const { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { node_->grad.clear(); }

    T item() const {
        if (numel() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        }
        return node_->data[0];
    }

    /// Copy of the values with no graph attached.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    /// Seeds d(self)/d(self) = 1 and back-propagates through the recorded graph.
    void backward() {
        if (numel() != 1) {
            throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
        }
        if (!node_->requires_grad) {
            return;
        }
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node<T>* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) {
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad()[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_fn && n->grad.size() == n->data.size()) {
                n->backward_fn(*n);
            }
        }
    }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_mode()) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> fn) {
    Tensor<T> out(std::move(shape), std::move(data));
    if (any_requires_grad<T>(inputs)) {
        auto& node = *out.node();
        node.requires_grad = true;
        for (const auto* in : inputs) {
            node.parents.push_back(in->node());
        }
        node.backward_fn = std::move(fn);
    }
    return out;
}

/// Gradient buffer of a parent, or nullptr if that parent does not need one.
template <class T>
T* grad_of(Node<T>& out, std::size_t parent) {
    auto& p = *out.parents[parent];
    return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

/// Vectorized reduction; the summation order is fixed by the build, so results are reproducible.
template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
    T acc = T(0);
#pragma omp simd reduction(+ : acc)
    for (std::size_t i = 0; i < n; ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

template <class T>
inline void axpy(T alpha, const T* __restrict x, T* __restrict y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
    if (s.size() != r) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& o) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (T* g = detail::grad_of(o, p)) {
                detail::axpy(T(1), o.grad.data(), g, o.grad.size());
            }
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& o) {
        const auto& x = o.parents[0]->data;
        const auto& y = o.parents[1]->data;
        if (T* g = detail::grad_of(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * y[i];
            }
        }
        if (T* g = detail::grad_of(o, 1)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * x[i];
            }
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * s;
    }
    return detail::make_result<T>(a.shape(), std::move(out), {&a}, [s](Node<T>& o) {
        detail::axpy(s, o.grad.data(), detail::grad_of(o, 0), o.grad.size());
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = T(0);
    for (T v : a.data()) {
        total += v;
    }
    return detail::make_result<T>(Shape{1}, {total}, {&a}, [](Node<T>& o) {
        T* g = detail::grad_of(o, 0);
        const T go = o.grad[0];
        for (std::size_t i = 0; i < o.parents[0]->data.size(); ++i) {
            g[i] += go;
        }
    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    return detail::make_result<T>(std::move(shape), a.storage(), {&a}, [](Node<T>& o) {
        detail::axpy(T(1), o.grad.data(), detail::grad_of(o, 0), o.grad.size());
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    }
    return detail::make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& o) {
        T* g = detail::grad_of(o, 0);
        const auto& x = o.parents[0]->data;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            if (x[i] > T(0)) {
                g[i] += o.grad[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

inline constexpr std::size_t kTile = 512;

/// Geometry of a zero-padded channel plane: each tap becomes one flat offset.
struct PaddedPlane {
    std::size_t D, H, W, pad, PD, PH, PW;
    std::size_t size() const { return PD * PH * PW; }
    std::size_t index(std::size_t d, std::size_t h, std::size_t w) const {
        return ((d + pad) * PH + (h + pad)) * PW + (w + pad);
    }
    /// Flat span [first, last] covering every interior voxel.
    std::size_t first() const { return index(0, 0, 0); }
    std::size_t span() const { return index(D - 1, H - 1, W - 1) - first() + 1; }
    std::ptrdiff_t offset(std::size_t kd, std::size_t kh, std::size_t kw) const {
        const auto p = static_cast<std::ptrdiff_t>(pad);
        return ((static_cast<std::ptrdiff_t>(kd) - p) * static_cast<std::ptrdiff_t>(PH) +
                (static_cast<std::ptrdiff_t>(kh) - p)) * static_cast<std::ptrdiff_t>(PW) +
               (static_cast<std::ptrdiff_t>(kw) - p);
    }
};

template <class T>
void pad_into(const PaddedPlane& g, const T* src, T* dst) {
    for (std::size_t d = 0; d < g.D; ++d) {
        for (std::size_t h = 0; h < g.H; ++h) {
            std::copy_n(src + (d * g.H + h) * g.W, g.W, dst + g.index(d, h, 0));
        }
    }
}

template <class T>
void unpad_add(const PaddedPlane& g, const T* src, T* dst) {
    for (std::size_t d = 0; d < g.D; ++d) {
        for (std::size_t h = 0; h < g.H; ++h) {
            const T* s = src + g.index(d, h, 0);
            T* o = dst + (d * g.H + h) * g.W;
            for (std::size_t w = 0; w < g.W; ++w) {
                o[w] += s[w];
            }
        }
    }
}

} // namespace detail

/**
 * 3D cross-correlation, stride 1, zero padding k/2 (shape preserving).
 *
 * input [N, Cin, D, H, W], weight [Cout, Cin, k, k, k] with odd k, bias [Cout].
 * Planes are zero-padded once so every kernel tap is a single contiguous
 * axpy (forward, input gradient) or dot product (weight gradient); values
 * computed on pad positions are discarded.
 */
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require_rank(input.shape(), 5, "conv3d input");
    detail::require_rank(weight.shape(), 5, "conv3d weight");
    const std::size_t N = input.dim(0), Ci = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const std::size_t Co = weight.dim(0), K = weight.dim(2);
    if (weight.dim(1) != Ci) {
        throw ShapeError("conv3d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
                         std::to_string(Ci));
    }
    if (weight.dim(3) != K || weight.dim(4) != K || K % 2 == 0) {
        throw ShapeError("conv3d: kernel must be cubic with odd size, got " + shape_str(weight.shape()));
    }
    if (bias.numel() != Co) {
        throw ShapeError("conv3d: bias length " + std::to_string(bias.numel()) + " != out channels " +
                         std::to_string(Co));
    }
    const std::size_t pad = K / 2;
    const detail::PaddedPlane g{D, H, W, pad, D + 2 * pad, H + 2 * pad, W + 2 * pad};
    const std::size_t S = D * H * W, K3 = K * K * K, P = g.size();
    const std::size_t first = g.first(), span = g.span();
    std::vector<std::ptrdiff_t> offsets(K3);
    for (std::size_t kd = 0; kd < K; ++kd) {
        for (std::size_t kh = 0; kh < K; ++kh) {
            for (std::size_t kw = 0; kw < K; ++kw) {
                offsets[(kd * K + kh) * K + kw] = g.offset(kd, kh, kw);
            }
        }
    }

    // Padded copy of the whole input, shared with the backward closure.
    auto padded = std::make_shared<std::vector<T>>(N * Ci * P, T(0));
    for (std::size_t nc = 0; nc < N * Ci; ++nc) {
        detail::pad_into(g, input.data().data() + nc * S, padded->data() + nc * P);
    }

    std::vector<T> out(N * Co * S);
    std::vector<T> acc(P);
    const T* w = weight.data().data();
    const T* b = bias.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Co; ++co) {
            std::fill(acc.begin(), acc.end(), T(0));
            for (std::size_t t0 = 0; t0 < span; t0 += detail::kTile) {
                const std::size_t len = std::min(detail::kTile, span - t0);
                T* a = acc.data() + first + t0;
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                    const T* xp = padded->data() + (n * Ci + ci) * P + first + t0;
                    const T* wk = w + (co * Ci + ci) * K3;
                    for (std::size_t t = 0; t < K3; ++t) {
                        detail::axpy(wk[t], xp + offsets[t], a, len);
                    }
                }
            }
            T* o = out.data() + (n * Co + co) * S;
            std::fill(o, o + S, b[co]);
            detail::unpad_add(g, acc.data(), o);
        }
    }

    Shape shape{N, Co, D, H, W};
    return detail::make_result<T>(std::move(shape), std::move(out), {&input, &weight, &bias},
                                  [=, offsets = std::move(offsets)](Node<T>& o) {
        const T* go = o.grad.data();
        const T* wt = o.parents[1]->data.data();
        if (T* gb = detail::grad_of(o, 2)) {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t co = 0; co < Co; ++co) {
                    const T* gp = go + (n * Co + co) * S;
                    gb[co] += std::accumulate(gp, gp + S, T(0));
                }
            }
        }
        T* gw = detail::grad_of(o, 1);
        T* gi = detail::grad_of(o, 0);
        if (!gw && !gi) {
            return;
        }
        // Output gradient in padded layout; zeros on pad positions make the flat spans exact.
        std::vector<T> gpad(N * Co * P, T(0));
        for (std::size_t nc = 0; nc < N * Co; ++nc) {
            detail::pad_into(g, go + nc * S, gpad.data() + nc * P);
        }
        if (gw) {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t co = 0; co < Co; ++co) {
                    const T* gp = gpad.data() + (n * Co + co) * P + first;
                    for (std::size_t ci = 0; ci < Ci; ++ci) {
                        const T* xp = padded->data() + (n * Ci + ci) * P + first;
                        T* gk = gw + (co * Ci + ci) * K3;
                        for (std::size_t t0 = 0; t0 < span; t0 += detail::kTile) {
                            const std::size_t len = std::min(detail::kTile, span - t0);
                            for (std::size_t t = 0; t < K3; ++t) {
                                gk[t] += detail::dot(gp + t0, xp + t0 + offsets[t], len);
                            }
                        }
                    }
                }
            }
        }
        if (gi) {
            std::vector<T> gx(P);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                    std::fill(gx.begin(), gx.end(), T(0));
                    for (std::size_t t0 = 0; t0 < span; t0 += detail::kTile) {
                        const std::size_t len = std::min(detail::kTile, span - t0);
                        for (std::size_t co = 0; co < Co; ++co) {
                            const T* gp = gpad.data() + (n * Co + co) * P + first + t0;
                            const T* wk = wt + (co * Ci + ci) * K3;
                            for (std::size_t t = 0; t < K3; ++t) {
                                detail::axpy(wk[t], gp, gx.data() + first + t0 + offsets[t], len);
                            }
                        }
                    }
                    detail::unpad_add(g, gx.data(), gi + (n * Ci + ci) * S);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNormState() = default;
    explicit BatchNormState(std::size_t channels) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/**
 * Per-channel normalization over (N, D, H, W).
 *
 * Training mode normalizes with the biased batch variance and folds the
 * unbiased variance into the running estimate with the state's momentum.
 * Evaluation mode uses the running statistics and leaves the state alone.
 */
template <class T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      bool training) {
    detail::require_rank(input.shape(), 5, "batchnorm3d");
    const std::size_t N = input.dim(0), C = input.dim(1);
    const std::size_t S = input.dim(2) * input.dim(3) * input.dim(4);
    if (gamma.numel() != C || beta.numel() != C || state.running_mean.size() != C || state.running_var.size() != C) {
        throw ShapeError("batchnorm3d: parameter length does not match " + std::to_string(C) + " channels");
    }
    const std::size_t m = N * S;
    const T* x = input.data().data();
    std::vector<T> out(input.numel());
    std::vector<T> xhat(input.numel());
    std::vector<T> inv_std(C);

    for (std::size_t c = 0; c < C; ++c) {
        double mean = 0.0, var = 0.0;
        if (training) {
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x + (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i) {
                    mean += p[i];
                }
            }
            mean /= static_cast<double>(m);
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x + (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i) {
                    const double dv = p[i] - mean;
                    var += dv * dv;
                }
            }
            var /= static_cast<double>(m);
            const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
            state.running_mean[c] = static_cast<T>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean);
            state.running_var[c] = static_cast<T>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        const double is = 1.0 / std::sqrt(var + static_cast<double>(state.eps));
        inv_std[c] = static_cast<T>(is);
        const T g = gamma.data()[c], bt = beta.data()[c];
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
                const T xh = static_cast<T>((x[base + i] - mean) * is);
                xhat[base + i] = xh;
                out[base + i] = g * xh + bt;
            }
        }
    }

    return detail::make_result<T>(input.shape(), std::move(out), {&input, &gamma, &beta},
                                  [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
        const T* go = o.grad.data();
        const T* g = o.parents[1]->data.data();
        T* gx = detail::grad_of(o, 0);
        T* gg = detail::grad_of(o, 1);
        T* gbeta = detail::grad_of(o, 2);
        for (std::size_t c = 0; c < C; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i) {
                    sum_dy += go[base + i];
                    sum_dy_xhat += static_cast<double>(go[base + i]) * xhat[base + i];
                }
            }
            if (gg) {
                gg[c] += static_cast<T>(sum_dy_xhat);
            }
            if (gbeta) {
                gbeta[c] += static_cast<T>(sum_dy);
            }
            if (!gx) {
                continue;
            }
            const double k = static_cast<double>(g[c]) * inv_std[c];
            if (training) {
                const double mean_dy = sum_dy / static_cast<double>(m);
                const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t base = (n * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        gx[base + i] += static_cast<T>(k * (go[base + i] - mean_dy - xhat[base + i] * mean_dy_xhat));
                    }
                }
            } else {
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t base = (n * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        gx[base + i] += static_cast<T>(k * go[base + i]);
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling

using Window3 = std::array<std::size_t, 3>;

/// Effective window: an axis already of size 1 is pooled with window 1.
inline Window3 effective_window(std::size_t D, std::size_t H, std::size_t W, Window3 window) {
    const std::array<std::size_t, 3> dims{D, H, W};
    for (std::size_t a = 0; a < 3; ++a) {
        if (window[a] == 0) {
            throw ShapeError("maxpool3d: zero window");
        }
        if (dims[a] == 1) {
            window[a] = 1;
        }
    }
    return window;
}

inline std::array<std::size_t, 3> maxpool_output_dims(std::size_t D, std::size_t H, std::size_t W, Window3 window) {
    const auto w = effective_window(D, H, W, window);
    return {D / w[0], H / w[1], W / w[2]};
}

/// Non-overlapping max pool with stride = window and floor division. Ties keep the first voxel in scan order.
template <class T>
Tensor<T> maxpool3d(const Tensor<T>& input, Window3 window = {2, 2, 2}) {
    detail::require_rank(input.shape(), 5, "maxpool3d");
    const std::size_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const auto win = effective_window(D, H, W, window);
    const std::size_t OD = D / win[0], OH = H / win[1], OW = W / win[2];
    if (OD == 0 || OH == 0 || OW == 0) {
        throw ShapeError("maxpool3d: window larger than input " + shape_str(input.shape()));
    }
    const std::size_t S = D * H * W, OS = OD * OH * OW;
    std::vector<T> out(N * C * OS);
    std::vector<std::uint32_t> arg(out.size());
    const T* x = input.data().data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* p = x + nc * S;
        for (std::size_t od = 0; od < OD; ++od) {
            for (std::size_t oh = 0; oh < OH; ++oh) {
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t best_i = 0;
                    bool first = true;
                    for (std::size_t a = 0; a < win[0]; ++a) {
                        for (std::size_t b = 0; b < win[1]; ++b) {
                            for (std::size_t c = 0; c < win[2]; ++c) {
                                const std::size_t i =
                                    ((od * win[0] + a) * H + (oh * win[1] + b)) * W + (ow * win[2] + c);
                                if (first || p[i] > best) {
                                    best = p[i];
                                    best_i = i;
                                    first = false;
                                }
                            }
                        }
                    }
                    const std::size_t oi = nc * OS + (od * OH + oh) * OW + ow;
                    out[oi] = best;
                    arg[oi] = static_cast<std::uint32_t>(best_i);
                }
            }
        }
    }
    return detail::make_result<T>(Shape{N, C, OD, OH, OW}, std::move(out), {&input},
                                  [=, arg = std::move(arg)](Node<T>& o) {
        T* g = detail::grad_of(o, 0);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            for (std::size_t j = 0; j < OS; ++j) {
                g[nc * S + arg[nc * OS + j]] += o.grad[nc * OS + j];
            }
        }
    });
}

/// Max over all spatial positions: [N, C, D, H, W] -> [N, C].
template <class T>
Tensor<T> global_maxpool3d(const Tensor<T>& input) {
    detail::require_rank(input.shape(), 5, "global_maxpool3d");
    const std::size_t N = input.dim(0), C = input.dim(1);
    const std::size_t S = input.dim(2) * input.dim(3) * input.dim(4);
    std::vector<T> out(N * C);
    std::vector<std::uint32_t> arg(N * C);
    const T* x = input.data().data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* p = x + nc * S;
        std::size_t best = 0;
        for (std::size_t i = 1; i < S; ++i) {
            if (p[i] > p[best]) {
                best = i;
            }
        }
        out[nc] = p[best];
        arg[nc] = static_cast<std::uint32_t>(best);
    }
    return detail::make_result<T>(Shape{N, C}, std::move(out), {&input}, [=, arg = std::move(arg)](Node<T>& o) {
        T* g = detail::grad_of(o, 0);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            g[nc * S + arg[nc]] += o.grad[nc];
        }
    });
}

// ---------------------------------------------------------------------------
// Dense layer and losses

/// x [N, F], weight [O, F], bias [O] -> [N, O].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require_rank(x.shape(), 2, "linear input");
    detail::require_rank(weight.shape(), 2, "linear weight");
    const std::size_t N = x.dim(0), F = x.dim(1), O = weight.dim(0);
    if (weight.dim(1) != F) {
        throw ShapeError("linear: weight expects " + std::to_string(weight.dim(1)) + " features, input has " +
                         std::to_string(F));
    }
    if (bias.numel() != O) {
        throw ShapeError("linear: bias length mismatch");
    }
    std::vector<T> out(N * O);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < O; ++o) {
            out[n * O + o] = bias.data()[o] + detail::dot(x.data().data() + n * F, weight.data().data() + o * F, F);
        }
    }
    return detail::make_result<T>(Shape{N, O}, std::move(out), {&x, &weight, &bias}, [=](Node<T>& nd) {
        const T* go = nd.grad.data();
        const T* xv = nd.parents[0]->data.data();
        const T* wv = nd.parents[1]->data.data();
        if (T* gx = detail::grad_of(nd, 0)) {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t o = 0; o < O; ++o) {
                    detail::axpy(go[n * O + o], wv + o * F, gx + n * F, F);
                }
            }
        }
        if (T* gw = detail::grad_of(nd, 1)) {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t o = 0; o < O; ++o) {
                    detail::axpy(go[n * O + o], xv + n * F, gw + o * F, F);
                }
            }
        }
        if (T* gb = detail::grad_of(nd, 2)) {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t o = 0; o < O; ++o) {
                    gb[o] += go[n * O + o];
                }
            }
        }
    });
}

namespace detail {

template <class T, class Value, class Deriv>
Tensor<T> elementwise_loss(const Tensor<T>& pred, const Tensor<T>& target, const char* name, Value value,
                           Deriv deriv) {
    if (pred.numel() == 0) {
        throw ShapeError(std::string(name) + ": empty input");
    }
    if (pred.numel() != target.numel()) {
        throw ShapeError(std::string(name) + ": " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    }
    const std::size_t n = pred.numel();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total += value(static_cast<double>(pred.data()[i]) - static_cast<double>(target.data()[i]));
    }
    return make_result<T>(Shape{1}, {static_cast<T>(total / static_cast<double>(n))}, {&pred, &target},
                          [=](Node<T>& o) {
        const double go = o.grad[0] / static_cast<double>(n);
        const auto& p = o.parents[0]->data;
        const auto& t = o.parents[1]->data;
        T* gp = grad_of(o, 0);
        T* gt = grad_of(o, 1);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = go * deriv(static_cast<double>(p[i]) - static_cast<double>(t[i]));
            if (gp) {
                gp[i] += static_cast<T>(g);
            }
            if (gt) {
                gt[i] -= static_cast<T>(g);
            }
        }
    });
}

} // namespace detail

/// Mean of squared differences.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    return detail::elementwise_loss(
        pred, target, "mse_loss", [](double d) { return d * d; }, [](double d) { return 2.0 * d; });
}

/// Huber with unit threshold: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise; mean-reduced.
template <class T>
Tensor<T> smooth_l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    return detail::elementwise_loss(
        pred, target, "smooth_l1_loss",
        [](double d) { return std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; },
        [](double d) { return std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0); });
}

// ---------------------------------------------------------------------------
// Optimizer and scheduler

template <class T>
struct AdamState {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
};

/// One bias-corrected Adam update. Parameters without a gradient buffer are treated as having zero gradient.
template <class T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), T(0));
            state.v[i].assign(params[i].numel(), T(0));
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                         std::to_string(params.size()));
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (state.m[i].size() != p.numel()) {
            throw ShapeError("adam_step: moment shape mismatch for parameter " + std::to_string(i));
        }
        if (!p.has_grad()) {
            // Moments still decay; with a fresh state this is an exact no-op.
            for (std::size_t j = 0; j < p.numel(); ++j) {
                state.m[i][j] = static_cast<T>(state.beta1 * state.m[i][j]);
                state.v[i][j] = static_cast<T>(state.beta2 * state.v[i][j]);
            }
        }
        auto g = p.has_grad() ? std::span<const T>(p.grad()) : std::span<const T>();
        auto data = p.data();
        for (std::size_t j = 0; j < p.numel(); ++j) {
            if (!g.empty()) {
                const double gj = g[j];
                state.m[i][j] = static_cast<T>(state.beta1 * state.m[i][j] + (1.0 - state.beta1) * gj);
                state.v[i][j] = static_cast<T>(state.beta2 * state.v[i][j] + (1.0 - state.beta2) * gj * gj);
            }
            const double mhat = state.m[i][j] / bc1;
            const double vhat = state.v[i][j] / bc2;
            data[j] = static_cast<T>(data[j] - state.lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

/**
 * Reduce-on-plateau learning-rate schedule.
 *
 * An epoch improves iff its metric is strictly below the best seen so far.
 * After `patience` consecutive non-improving epochs the rate is multiplied
 * by `factor` (never below `min_lr`) and the counter restarts.
 */
struct PlateauScheduler {
    double lr = 0.01;
    double factor = 0.3;
    int patience = 5;
    double min_lr = 1e-6;
    double best = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;

    /// Returns true when the learning rate was reduced.
    bool step(double metric) {
        if (metric < best) {
            best = metric;
            bad_epochs = 0;
            return false;
        }
        if (++bad_epochs >= patience) {
            bad_epochs = 0;
            const double next = std::max(lr * factor, min_lr);
            const bool changed = next < lr;
            lr = next;
            return changed;
        }
        return false;
    }
};

} // namespace spineage::ag

#endif
