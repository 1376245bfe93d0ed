#pragma once

// Reverse-mode automatic differentiation on dense tensors.
//
// Every operation's backward rule is itself expressed through taped
// operations, so gradients can be differentiated again (grad_wrt with
// create_graph=true). The critic's gradient penalty depends on this: its
// parameter gradient differentiates through a gradient computed by a first
// backward pass.

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "volgen/blas.hpp"
#include "volgen/tensor.hpp"

namespace volgen {

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

struct GradModeGuard {
    explicit GradModeGuard(bool enable) : prev(detail::grad_mode_flag()) {
        detail::grad_mode_flag() = enable;
    }
    ~GradModeGuard() { detail::grad_mode_flag() = prev; }
    bool prev;
};
struct NoGradGuard : GradModeGuard {
    NoGradGuard() : GradModeGuard(false) {}
};

template <typename T>
class Var;

template <typename T>
struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    std::vector<Var<T>> parents;
    // Produces grads aligned with parents; entries whose need flag is false
    // may be returned undefined.
    std::function<std::vector<Var<T>>(const Var<T>&, const std::vector<bool>&)> backward;
    std::shared_ptr<Tensor<T>> grad_acc;  // leaves only, filled by backward()
};

template <typename T>
class Var {
public:
    Var() = default;

    static Var leaf(Tensor<T> v, bool requires_grad = false) {
        Var out;
        out.n_ = std::make_shared<Node<T>>();
        out.n_->value = std::move(v);
        out.n_->requires_grad = requires_grad;
        return out;
    }

    static Var constant(Tensor<T> v) { return leaf(std::move(v), false); }
    static Var scalar(T v) { return constant(Tensor<T>::scalar(v)); }

    bool defined() const { return n_ != nullptr; }
    const Tensor<T>& value() const { return n_->value; }
    Tensor<T>& value_mut() { return n_->value; }  // leaves between steps only
    const Shape& shape() const { return n_->value.shape; }
    T item() const { return n_->value.item(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    Node<T>* node() const { return n_.get(); }

    // For backward rules that reference their own output (tanh, sqrt, ...).
    // A strong self-capture would make the node unreclaimable; the weak
    // handle is always lockable during a backward pass because the pass
    // itself keeps the graph alive.
    std::weak_ptr<Node<T>> weak() const { return n_; }
    static Var lock(const std::weak_ptr<Node<T>>& w) {
        Var out;
        out.n_ = w.lock();
        if (!out.n_) throw Error("backward referenced a freed node");
        return out;
    }

    Var detach() const { return constant(n_->value); }

    const Tensor<T>* grad() const { return n_->grad_acc.get(); }
    void zero_grad() { n_->grad_acc.reset(); }
    void accumulate_grad(const Tensor<T>& g) {
        if (!n_->grad_acc) {
            n_->grad_acc = std::make_shared<Tensor<T>>(g);
        } else {
            T* a = n_->grad_acc->ptr();
            const T* b = g.ptr();
            for (std::int64_t i = 0; i < g.numel(); ++i) a[i] += b[i];
        }
    }

private:
    std::shared_ptr<Node<T>> n_;
};

// Builds an op node. When grad mode is off or no parent needs gradients the
// result is a plain constant and the inputs are not retained.
template <typename T, typename Backward>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, Backward bw) {
    bool req = false;
    if (grad_enabled())
        for (const auto& p : parents) req = req || p.requires_grad();
    Var<T> out = Var<T>::leaf(std::move(value), req);
    if (req) {
        out.node()->parents = std::move(parents);
        out.node()->backward = std::move(bw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!same_shape(a.shape(), b.shape()))
        throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> v = a.value();
    const T* pb = b.value().ptr();
    T* pv = v.ptr();
    for (std::int64_t i = 0; i < v.numel(); ++i) pv[i] += pb[i];
    return make_op<T>(std::move(v), {a, b},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{g, g};
                      });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> v = a.value();
    const T* pb = b.value().ptr();
    T* pv = v.ptr();
    for (std::int64_t i = 0; i < v.numel(); ++i) pv[i] -= pb[i];
    return make_op<T>(std::move(v), {a, b},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{g, neg(g)};
                      });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> v = a.value();
    const T* pb = b.value().ptr();
    T* pv = v.ptr();
    for (std::int64_t i = 0; i < v.numel(); ++i) pv[i] *= pb[i];
    return make_op<T>(std::move(v), {a, b},
                      [a, b](const Var<T>& g, const std::vector<bool>& need) {
                          std::vector<Var<T>> out(2);
                          if (need[0]) out[0] = mul(g, b);
                          if (need[1]) out[1] = mul(g, a);
                          return out;
                      });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x = -x;
    return make_op<T>(std::move(v), {a},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{neg(g)};
                      });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x *= c;
    return make_op<T>(std::move(v), {a},
                      [c](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{scale(g, c)};
                      });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x += c;
    return make_op<T>(std::move(v), {a},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{g};
                      });
}

template <typename T>
Var<T> sub_scalar(const Var<T>& a, T c) {
    return add_scalar(a, -c);
}

// Elementwise multiply by a constant tensor (masks). The mask is treated as
// locally constant, which is the a.e.-correct rule for kink nonlinearities.
template <typename T>
Var<T> mul_mask(const Var<T>& a, std::shared_ptr<Tensor<T>> mask) {
    Tensor<T> v = a.value();
    const T* pm = mask->ptr();
    T* pv = v.ptr();
    for (std::int64_t i = 0; i < v.numel(); ++i) pv[i] *= pm[i];
    return make_op<T>(std::move(v), {a},
                      [mask](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{mul_mask(g, mask)};
                      });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    auto mask = std::make_shared<Tensor<T>>(a.shape());
    Tensor<T> v = a.value();
    T* pv = v.ptr();
    T* pm = mask->ptr();
    for (std::int64_t i = 0; i < v.numel(); ++i) {
        pm[i] = pv[i] > T(0) ? T(1) : T(0);
        pv[i] *= pm[i];
    }
    return make_op<T>(std::move(v), {a},
                      [mask](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{mul_mask(g, mask)};
                      });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
    auto mask = std::make_shared<Tensor<T>>(a.shape());
    Tensor<T> v = a.value();
    T* pv = v.ptr();
    T* pm = mask->ptr();
    for (std::int64_t i = 0; i < v.numel(); ++i) {
        pm[i] = pv[i] > T(0) ? T(1) : slope;
        pv[i] *= pm[i];
    }
    return make_op<T>(std::move(v), {a},
                      [mask](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{mul_mask(g, mask)};
                      });
}

template <typename T>
Var<T> tanh_(const Var<T>& a) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x = std::tanh(x);
    Var<T> out = make_op<T>(std::move(v), {a}, nullptr);
    if (out.requires_grad()) {
        std::weak_ptr<Node<T>> self = out.weak();  // d tanh = (1 - y^2) g
        out.node()->backward = [self](const Var<T>& g, const std::vector<bool>&) {
            Var<T> y = Var<T>::lock(self);
            return std::vector<Var<T>>{mul(g, sub_scalar(neg(square(y)), T(-1)))};
        };
    }
    return out;
}

template <typename T>
Var<T> sigmoid_(const Var<T>& a) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x = T(1) / (T(1) + std::exp(-x));
    Var<T> out = make_op<T>(std::move(v), {a}, nullptr);
    if (out.requires_grad()) {
        std::weak_ptr<Node<T>> self = out.weak();  // d sigmoid = y (1 - y) g
        out.node()->backward = [self](const Var<T>& g, const std::vector<bool>&) {
            Var<T> y = Var<T>::lock(self);
            return std::vector<Var<T>>{mul(g, mul(y, sub_scalar(neg(y), T(-1))))};
        };
    }
    return out;
}

template <typename T>
Var<T> square(const Var<T>& a) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x *= x;
    return make_op<T>(std::move(v), {a},
                      [a](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{scale(mul(g, a), T(2))};
                      });
}

template <typename T>
Var<T> sqrt_(const Var<T>& a) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x = std::sqrt(x);
    Var<T> out = make_op<T>(std::move(v), {a}, nullptr);
    if (out.requires_grad()) {
        std::weak_ptr<Node<T>> self = out.weak();  // d sqrt = g / (2 y)
        out.node()->backward = [self](const Var<T>& g, const std::vector<bool>&) {
            Var<T> y = Var<T>::lock(self);
            return std::vector<Var<T>>{mul(g, recip(scale(y, T(2))))};
        };
    }
    return out;
}

template <typename T>
Var<T> recip(const Var<T>& a) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x = T(1) / x;
    Var<T> out = make_op<T>(std::move(v), {a}, nullptr);
    if (out.requires_grad()) {
        std::weak_ptr<Node<T>> self = out.weak();  // d(1/x) = -y^2 g
        out.node()->backward = [self](const Var<T>& g, const std::vector<bool>&) {
            Var<T> y = Var<T>::lock(self);
            return std::vector<Var<T>>{neg(mul(g, square(y)))};
        };
    }
    return out;
}

template <typename T>
Var<T> log_(const Var<T>& a) {
    Tensor<T> v = a.value();
    for (auto& x : v.data) x = std::log(x);
    return make_op<T>(std::move(v), {a},
                      [a](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{mul(g, recip(a))};
                      });
}

template <typename T>
Var<T> abs_(const Var<T>& a) {
    auto mask = std::make_shared<Tensor<T>>(a.shape());
    Tensor<T> v = a.value();
    T* pv = v.ptr();
    T* pm = mask->ptr();
    for (std::int64_t i = 0; i < v.numel(); ++i) {
        pm[i] = pv[i] < T(0) ? T(-1) : T(1);
        pv[i] *= pm[i];
    }
    return make_op<T>(std::move(v), {a},
                      [mask](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{mul_mask(g, mask)};
                      });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
    auto mask = std::make_shared<Tensor<T>>(a.shape());
    Tensor<T> v = a.value();
    T* pv = v.ptr();
    T* pm = mask->ptr();
    for (std::int64_t i = 0; i < v.numel(); ++i) {
        bool inside = pv[i] > lo && pv[i] < hi;
        pm[i] = inside ? T(1) : T(0);
        pv[i] = std::min(std::max(pv[i], lo), hi);
    }
    return make_op<T>(std::move(v), {a},
                      [mask](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{mul_mask(g, mask)};
                      });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

template <typename T>
Var<T> expand_to(const Var<T>& a, Shape shape);  // scalar -> shape

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    T acc = 0;
    for (T x : a.value().data) acc += x;
    Shape shape = a.shape();
    return make_op<T>(Tensor<T>::scalar(acc), {a},
                      [shape](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{expand_to(g, shape)};
                      });
}

template <typename T>
Var<T> expand_to(const Var<T>& a, Shape shape) {
    Tensor<T> v = Tensor<T>::full(shape, a.item());
    return make_op<T>(std::move(v), {a},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{sum_all(g)};
                      });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.value().numel()));
}

namespace detail {
// (N, C, ...) -> channel count C and per-channel run layout
template <typename T>
void channel_dims(const Tensor<T>& t, std::int64_t& n, std::int64_t& c, std::int64_t& inner) {
    if (t.ndim() < 2) throw Error("channel op needs rank >= 2, got " + shape_str(t.shape));
    n = t.shape[0];
    c = t.shape[1];
    inner = 1;
    for (int i = 2; i < t.ndim(); ++i) inner *= t.shape[i];
}
}  // namespace detail

template <typename T>
Var<T> expand_channel(const Var<T>& a, Shape shape);

// Sum over batch and spatial dims, one value per channel: (N,C,...) -> (C).
template <typename T>
Var<T> sum_to_channel(const Var<T>& a) {
    std::int64_t n, c, inner;
    detail::channel_dims(a.value(), n, c, inner);
    Tensor<T> v({c});
    const T* px = a.value().ptr();
    for (std::int64_t in = 0; in < n; ++in)
        for (std::int64_t ic = 0; ic < c; ++ic) {
            T acc = 0;
            const T* row = px + (in * c + ic) * inner;
            for (std::int64_t i = 0; i < inner; ++i) acc += row[i];
            v.data[static_cast<size_t>(ic)] += acc;
        }
    Shape shape = a.shape();
    return make_op<T>(std::move(v), {a},
                      [shape](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{expand_channel(g, shape)};
                      });
}

template <typename T>
Var<T> expand_channel(const Var<T>& a, Shape shape) {
    std::int64_t n = shape[0], c = shape[1], inner = 1;
    for (size_t i = 2; i < shape.size(); ++i) inner *= shape[i];
    if (a.value().numel() != c) throw Error("expand_channel: size mismatch");
    Tensor<T> v(shape);
    T* pv = v.ptr();
    const T* pa = a.value().ptr();
    for (std::int64_t in = 0; in < n; ++in)
        for (std::int64_t ic = 0; ic < c; ++ic) {
            T val = pa[ic];
            T* row = pv + (in * c + ic) * inner;
            for (std::int64_t i = 0; i < inner; ++i) row[i] = val;
        }
    return make_op<T>(std::move(v), {a},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{sum_to_channel(g)};
                      });
}

template <typename T>
Var<T> mean_channel(const Var<T>& a) {
    std::int64_t n, c, inner;
    detail::channel_dims(a.value(), n, c, inner);
    return scale(sum_to_channel(a), T(1) / static_cast<T>(n * inner));
}

template <typename T>
Var<T> mul_channel(const Var<T>& a, const Var<T>& s) {
    std::int64_t n, c, inner;
    detail::channel_dims(a.value(), n, c, inner);
    if (s.value().numel() != c) throw Error("mul_channel: size mismatch");
    Tensor<T> v = a.value();
    T* pv = v.ptr();
    const T* ps = s.value().ptr();
    for (std::int64_t in = 0; in < n; ++in)
        for (std::int64_t ic = 0; ic < c; ++ic) {
            T f = ps[ic];
            T* row = pv + (in * c + ic) * inner;
            for (std::int64_t i = 0; i < inner; ++i) row[i] *= f;
        }
    return make_op<T>(std::move(v), {a, s},
                      [a, s](const Var<T>& g, const std::vector<bool>& need) {
                          std::vector<Var<T>> out(2);
                          if (need[0]) out[0] = mul_channel(g, s);
                          if (need[1]) out[1] = sum_to_channel(mul(g, a));
                          return out;
                      });
}

template <typename T>
Var<T> add_channel(const Var<T>& a, const Var<T>& b) {
    std::int64_t n, c, inner;
    detail::channel_dims(a.value(), n, c, inner);
    if (b.value().numel() != c) throw Error("add_channel: size mismatch");
    Tensor<T> v = a.value();
    T* pv = v.ptr();
    const T* pb = b.value().ptr();
    for (std::int64_t in = 0; in < n; ++in)
        for (std::int64_t ic = 0; ic < c; ++ic) {
            T f = pb[ic];
            T* row = pv + (in * c + ic) * inner;
            for (std::int64_t i = 0; i < inner; ++i) row[i] += f;
        }
    return make_op<T>(std::move(v), {a, b},
                      [](const Var<T>& g, const std::vector<bool>& need) {
                          std::vector<Var<T>> out(2);
                          out[0] = g;
                          if (need[1]) out[1] = sum_to_channel(g);
                          return out;
                      });
}

template <typename T>
Var<T> sub_channel(const Var<T>& a, const Var<T>& b) {
    return add_channel(a, neg(b));
}

template <typename T>
Var<T> expand_sample(const Var<T>& a, Shape shape);

// Sum over everything but the batch dim: (N, ...) -> (N).
template <typename T>
Var<T> sum_per_sample(const Var<T>& a) {
    std::int64_t n = a.shape()[0];
    std::int64_t inner = a.value().numel() / n;
    Tensor<T> v({n});
    const T* px = a.value().ptr();
    for (std::int64_t in = 0; in < n; ++in) {
        T acc = 0;
        const T* row = px + in * inner;
        for (std::int64_t i = 0; i < inner; ++i) acc += row[i];
        v.data[static_cast<size_t>(in)] = acc;
    }
    Shape shape = a.shape();
    return make_op<T>(std::move(v), {a},
                      [shape](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{expand_sample(g, shape)};
                      });
}

template <typename T>
Var<T> expand_sample(const Var<T>& a, Shape shape) {
    std::int64_t n = shape[0];
    std::int64_t inner = shape_numel(shape) / n;
    if (a.value().numel() != n) throw Error("expand_sample: size mismatch");
    Tensor<T> v(shape);
    T* pv = v.ptr();
    const T* pa = a.value().ptr();
    for (std::int64_t in = 0; in < n; ++in) {
        T val = pa[in];
        T* row = pv + in * inner;
        for (std::int64_t i = 0; i < inner; ++i) row[i] = val;
    }
    return make_op<T>(std::move(v), {a},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{sum_per_sample(g)};
                      });
}

template <typename T>
Var<T> mul_sample(const Var<T>& a, const Var<T>& s) {
    std::int64_t n = a.shape()[0];
    std::int64_t inner = a.value().numel() / n;
    if (s.value().numel() != n) throw Error("mul_sample: size mismatch");
    Tensor<T> v = a.value();
    T* pv = v.ptr();
    const T* ps = s.value().ptr();
    for (std::int64_t in = 0; in < n; ++in) {
        T f = ps[in];
        T* row = pv + in * inner;
        for (std::int64_t i = 0; i < inner; ++i) row[i] *= f;
    }
    return make_op<T>(std::move(v), {a, s},
                      [a, s](const Var<T>& g, const std::vector<bool>& need) {
                          std::vector<Var<T>> out(2);
                          if (need[0]) out[0] = mul_sample(g, s);
                          if (need[1]) out[1] = sum_per_sample(mul(g, a));
                          return out;
                      });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    if (shape_numel(shape) != a.value().numel())
        throw Error("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                    shape_str(shape));
    Tensor<T> v(shape, a.value().data);
    Shape orig = a.shape();
    return make_op<T>(std::move(v), {a},
                      [orig](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{reshape(g, orig)};
                      });
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

// C = op(A) op(B) for 2-D tensors.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2) throw Error("matmul: rank-2 tensors required");
    std::int64_t m = ta ? av.shape[1] : av.shape[0];
    std::int64_t k = ta ? av.shape[0] : av.shape[1];
    std::int64_t kb = tb ? bv.shape[1] : bv.shape[0];
    std::int64_t n = tb ? bv.shape[0] : bv.shape[1];
    if (k != kb)
        throw Error("matmul: inner dim mismatch " + shape_str(av.shape) + " x " +
                    shape_str(bv.shape));
    Tensor<T> v({m, n});
    gemm(ta, tb, m, n, k, T(1), av.ptr(), av.shape[1], bv.ptr(), bv.shape[1], T(0), v.ptr(), n);
    return make_op<T>(std::move(v), {a, b},
                      [a, b, ta, tb](const Var<T>& g, const std::vector<bool>& need) {
                          std::vector<Var<T>> out(2);
                          // Standard transpose bookkeeping for dA = dC B^T etc.
                          if (need[0]) out[0] = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                          if (need[1]) out[1] = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                          return out;
                      });
}

// ---------------------------------------------------------------------------
// 3-D convolution family (stride s, symmetric zero padding p, cubic kernel k)
// ---------------------------------------------------------------------------

struct ConvSpec {
    int kernel;
    int stride;
    int pad;
};

namespace detail {

inline std::int64_t conv_out_size(std::int64_t in, const ConvSpec& cs) {
    return (in + 2 * cs.pad - cs.kernel) / cs.stride + 1;
}

// Scratch columns for one batch sample, chunked over output depth so the
// buffer stays bounded. 64 MB of T per buffer.
template <typename T>
std::int64_t conv_slab_depth(std::int64_t rows, std::int64_t ho, std::int64_t wo,
                             std::int64_t out_d) {
    std::int64_t cap = (64LL << 20) / static_cast<std::int64_t>(sizeof(T));
    std::int64_t slab = cap / std::max<std::int64_t>(1, rows * ho * wo);
    return std::max<std::int64_t>(1, std::min(slab, out_d));
}

template <typename T>
void im2col_slab(const T* x, std::int64_t C, std::int64_t D, std::int64_t H, std::int64_t W,
                 const ConvSpec& cs, std::int64_t Ho, std::int64_t Wo, std::int64_t d0,
                 std::int64_t d1, T* col) {
    const std::int64_t k = cs.kernel, s = cs.stride, p = cs.pad;
    const std::int64_t slab_cols = (d1 - d0) * Ho * Wo;
    std::int64_t r = 0;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t kd = 0; kd < k; ++kd)
            for (std::int64_t kh = 0; kh < k; ++kh)
                for (std::int64_t kw = 0; kw < k; ++kw, ++r) {
                    T* dst = col + r * slab_cols;
                    for (std::int64_t od = d0; od < d1; ++od) {
                        std::int64_t id = od * s - p + kd;
                        if (id < 0 || id >= D) {
                            std::memset(dst, 0, sizeof(T) * Ho * Wo);
                            dst += Ho * Wo;
                            continue;
                        }
                        for (std::int64_t oh = 0; oh < Ho; ++oh) {
                            std::int64_t ih = oh * s - p + kh;
                            if (ih < 0 || ih >= H) {
                                std::memset(dst, 0, sizeof(T) * Wo);
                                dst += Wo;
                                continue;
                            }
                            const T* src = x + ((c * D + id) * H + ih) * W;
                            if (s == 1) {
                                std::int64_t iw0 = kw - p;  // iw for ow = 0
                                std::int64_t lo = std::max<std::int64_t>(0, -iw0);
                                std::int64_t hi = std::min<std::int64_t>(Wo, W - iw0);
                                if (lo > 0) std::memset(dst, 0, sizeof(T) * std::min(lo, Wo));
                                if (hi > lo) std::memcpy(dst + lo, src + iw0 + lo, sizeof(T) * (hi - lo));
                                if (hi < Wo)
                                    std::memset(dst + std::max(hi, lo), 0,
                                                sizeof(T) * (Wo - std::max(hi, lo)));
                                dst += Wo;
                            } else {
                                for (std::int64_t ow = 0; ow < Wo; ++ow, ++dst) {
                                    std::int64_t iw = ow * s - p + kw;
                                    *dst = (iw >= 0 && iw < W) ? src[iw] : T(0);
                                }
                            }
                        }
                    }
                }
}

template <typename T>
void col2im_slab(const T* col, std::int64_t C, std::int64_t D, std::int64_t H, std::int64_t W,
                 const ConvSpec& cs, std::int64_t Ho, std::int64_t Wo, std::int64_t d0,
                 std::int64_t d1, T* x) {
    const std::int64_t k = cs.kernel, s = cs.stride, p = cs.pad;
    const std::int64_t slab_cols = (d1 - d0) * Ho * Wo;
    std::int64_t r = 0;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t kd = 0; kd < k; ++kd)
            for (std::int64_t kh = 0; kh < k; ++kh)
                for (std::int64_t kw = 0; kw < k; ++kw, ++r) {
                    const T* srcrow = col + r * slab_cols;
                    for (std::int64_t od = d0; od < d1; ++od) {
                        std::int64_t id = od * s - p + kd;
                        if (id < 0 || id >= D) {
                            srcrow += Ho * Wo;
                            continue;
                        }
                        for (std::int64_t oh = 0; oh < Ho; ++oh) {
                            std::int64_t ih = oh * s - p + kh;
                            if (ih < 0 || ih >= H) {
                                srcrow += Wo;
                                continue;
                            }
                            T* dst = x + ((c * D + id) * H + ih) * W;
                            for (std::int64_t ow = 0; ow < Wo; ++ow) {
                                std::int64_t iw = ow * s - p + kw;
                                if (iw >= 0 && iw < W) dst[iw] += srcrow[ow];
                            }
                            srcrow += Wo;
                        }
                    }
                }
}

}  // namespace detail

template <typename T>
Var<T> conv3d_grad_input(const Var<T>& gy, const Var<T>& w, const ConvSpec& cs, Shape x_shape);
template <typename T>
Var<T> conv3d_grad_weight(const Var<T>& x, const Var<T>& gy, const ConvSpec& cs, Shape w_shape);

// x: (N, Cin, D, H, W), w: (Cout, Cin, k, k, k) -> (N, Cout, Do, Ho, Wo).
// Bias is handled separately (add_channel).
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const ConvSpec& cs) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (xv.ndim() != 5 || wv.ndim() != 5) throw Error("conv3d: rank-5 tensors required");
    if (xv.shape[1] != wv.shape[1])
        throw Error("conv3d: channel mismatch " + shape_str(xv.shape) + " vs " +
                    shape_str(wv.shape));
    if (wv.shape[2] != cs.kernel || wv.shape[3] != cs.kernel || wv.shape[4] != cs.kernel)
        throw Error("conv3d: kernel shape mismatch");
    const std::int64_t N = xv.shape[0], Cin = xv.shape[1];
    const std::int64_t D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    const std::int64_t Cout = wv.shape[0];
    const std::int64_t Do = detail::conv_out_size(D, cs);
    const std::int64_t Ho = detail::conv_out_size(H, cs);
    const std::int64_t Wo = detail::conv_out_size(W, cs);
    if (Do < 1 || Ho < 1 || Wo < 1)
        throw Error("conv3d: input " + shape_str(xv.shape) + " too small for kernel");

    const std::int64_t rows = Cin * cs.kernel * cs.kernel * cs.kernel;
    const std::int64_t slab = detail::conv_slab_depth<T>(rows, Ho, Wo, Do);
    std::vector<T> col(static_cast<size_t>(rows * slab * Ho * Wo));

    Tensor<T> out({N, Cout, Do, Ho, Wo});
    for (std::int64_t n = 0; n < N; ++n) {
        const T* xn = xv.ptr() + n * Cin * D * H * W;
        T* on = out.ptr() + n * Cout * Do * Ho * Wo;
        for (std::int64_t d0 = 0; d0 < Do; d0 += slab) {
            std::int64_t d1 = std::min(Do, d0 + slab);
            detail::im2col_slab(xn, Cin, D, H, W, cs, Ho, Wo, d0, d1, col.data());
            gemm(false, false, Cout, (d1 - d0) * Ho * Wo, rows, T(1), wv.ptr(), rows, col.data(),
                 (d1 - d0) * Ho * Wo, T(0), on + d0 * Ho * Wo, Do * Ho * Wo);
        }
    }

    Shape xs = xv.shape, ws = wv.shape;
    return make_op<T>(std::move(out), {x, w},
                      [x, w, cs, xs, ws](const Var<T>& g, const std::vector<bool>& need) {
                          std::vector<Var<T>> out(2);
                          if (need[0]) out[0] = conv3d_grad_input(g, w, cs, xs);
                          if (need[1]) out[1] = conv3d_grad_weight(x, g, cs, ws);
                          return out;
                      });
}

// dx[n,c,i] = sum_{o,k} gy[n,o,p] w[o,c,k] over valid p with i = p*s - pad + k.
template <typename T>
Var<T> conv3d_grad_input(const Var<T>& gy, const Var<T>& w, const ConvSpec& cs, Shape x_shape) {
    const Tensor<T>& gv = gy.value();
    const Tensor<T>& wv = w.value();
    const std::int64_t N = gv.shape[0], Cout = gv.shape[1];
    const std::int64_t Do = gv.shape[2], Ho = gv.shape[3], Wo = gv.shape[4];
    const std::int64_t Cin = x_shape[1], D = x_shape[2], H = x_shape[3], W = x_shape[4];
    const std::int64_t rows = Cin * cs.kernel * cs.kernel * cs.kernel;
    const std::int64_t slab = detail::conv_slab_depth<T>(rows, Ho, Wo, Do);
    std::vector<T> col(static_cast<size_t>(rows * slab * Ho * Wo));

    Tensor<T> dx(x_shape);
    for (std::int64_t n = 0; n < N; ++n) {
        const T* gn = gv.ptr() + n * Cout * Do * Ho * Wo;
        T* xn = dx.ptr() + n * Cin * D * H * W;
        for (std::int64_t d0 = 0; d0 < Do; d0 += slab) {
            std::int64_t d1 = std::min(Do, d0 + slab);
            gemm(true, false, rows, (d1 - d0) * Ho * Wo, Cout, T(1), wv.ptr(), rows,
                 gn + d0 * Ho * Wo, Do * Ho * Wo, T(0), col.data(), (d1 - d0) * Ho * Wo);
            detail::col2im_slab(col.data(), Cin, D, H, W, cs, Ho, Wo, d0, d1, xn);
        }
    }

    return make_op<T>(std::move(dx), {gy, w},
                      [gy, w, cs, x_shape](const Var<T>& u, const std::vector<bool>& need) {
                          std::vector<Var<T>> out(2);
                          if (need[0]) out[0] = conv3d(u, w, cs);
                          if (need[1]) out[1] = conv3d_grad_weight(u, gy, cs, w.shape());
                          return out;
                      });
}

// dw[o,c,k] = sum_{n,p} x[n,c,p*s - pad + k] gy[n,o,p].
template <typename T>
Var<T> conv3d_grad_weight(const Var<T>& x, const Var<T>& gy, const ConvSpec& cs, Shape w_shape) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& gv = gy.value();
    const std::int64_t N = xv.shape[0], Cin = xv.shape[1];
    const std::int64_t D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    const std::int64_t Cout = gv.shape[1];
    const std::int64_t Do = gv.shape[2], Ho = gv.shape[3], Wo = gv.shape[4];
    const std::int64_t rows = Cin * cs.kernel * cs.kernel * cs.kernel;
    const std::int64_t slab = detail::conv_slab_depth<T>(rows, Ho, Wo, Do);
    std::vector<T> col(static_cast<size_t>(rows * slab * Ho * Wo));

    Tensor<T> dw(w_shape);  // (Cout, Cin, k, k, k), zero-filled
    for (std::int64_t n = 0; n < N; ++n) {
        const T* xn = xv.ptr() + n * Cin * D * H * W;
        const T* gn = gv.ptr() + n * Cout * Do * Ho * Wo;
        for (std::int64_t d0 = 0; d0 < Do; d0 += slab) {
            std::int64_t d1 = std::min(Do, d0 + slab);
            detail::im2col_slab(xn, Cin, D, H, W, cs, Ho, Wo, d0, d1, col.data());
            gemm(false, true, Cout, rows, (d1 - d0) * Ho * Wo, T(1), gn + d0 * Ho * Wo,
                 Do * Ho * Wo, col.data(), (d1 - d0) * Ho * Wo, T(1), dw.ptr(), rows);
        }
    }

    return make_op<T>(std::move(dw), {x, gy},
                      [x, gy, cs](const Var<T>& u, const std::vector<bool>& need) {
                          std::vector<Var<T>> out(2);
                          if (need[0]) out[0] = conv3d_grad_input(gy, u, cs, x.shape());
                          if (need[1]) out[1] = conv3d(x, u, cs);
                          return out;
                      });
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsample and its adjoint
// ---------------------------------------------------------------------------

template <typename T>
Var<T> block_sum2(const Var<T>& a);

template <typename T>
Var<T> nn_upsample2(const Var<T>& a) {
    const Tensor<T>& xv = a.value();
    if (xv.ndim() != 5) throw Error("nn_upsample2: rank-5 tensor required");
    const std::int64_t N = xv.shape[0], C = xv.shape[1];
    const std::int64_t D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    Tensor<T> out({N, C, 2 * D, 2 * H, 2 * W});
    const T* px = xv.ptr();
    T* po = out.ptr();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* xs = px + nc * D * H * W;
        T* os = po + nc * 8 * D * H * W;
        for (std::int64_t d = 0; d < D; ++d)
            for (std::int64_t h = 0; h < H; ++h) {
                const T* row = xs + (d * H + h) * W;
                T* r0 = os + ((2 * d) * 2 * H + 2 * h) * 2 * W;
                for (std::int64_t w = 0; w < W; ++w) {
                    r0[2 * w] = row[w];
                    r0[2 * w + 1] = row[w];
                }
                std::memcpy(r0 + 2 * W, r0, sizeof(T) * 2 * W);
                T* r2 = os + ((2 * d + 1) * 2 * H + 2 * h) * 2 * W;
                std::memcpy(r2, r0, sizeof(T) * 2 * W);
                std::memcpy(r2 + 2 * W, r0, sizeof(T) * 2 * W);
            }
    }
    return make_op<T>(std::move(out), {a},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{block_sum2(g)};
                      });
}

template <typename T>
Var<T> block_sum2(const Var<T>& a) {
    const Tensor<T>& xv = a.value();
    if (xv.ndim() != 5) throw Error("block_sum2: rank-5 tensor required");
    const std::int64_t N = xv.shape[0], C = xv.shape[1];
    const std::int64_t D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    if (D % 2 || H % 2 || W % 2) throw Error("block_sum2: odd spatial dims");
    Tensor<T> out({N, C, D / 2, H / 2, W / 2});
    const T* px = xv.ptr();
    T* po = out.ptr();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* xs = px + nc * D * H * W;
        T* os = po + nc * (D / 2) * (H / 2) * (W / 2);
        for (std::int64_t d = 0; d < D / 2; ++d)
            for (std::int64_t h = 0; h < H / 2; ++h) {
                const T* r0 = xs + ((2 * d) * H + 2 * h) * W;
                const T* r1 = r0 + W;
                const T* r2 = xs + ((2 * d + 1) * H + 2 * h) * W;
                const T* r3 = r2 + W;
                T* orow = os + (d * (H / 2) + h) * (W / 2);
                for (std::int64_t w = 0; w < W / 2; ++w)
                    orow[w] = r0[2 * w] + r0[2 * w + 1] + r1[2 * w] + r1[2 * w + 1] +
                              r2[2 * w] + r2[2 * w + 1] + r3[2 * w] + r3[2 * w + 1];
            }
    }
    return make_op<T>(std::move(out), {a},
                      [](const Var<T>& g, const std::vector<bool>&) {
                          return std::vector<Var<T>>{nn_upsample2(g)};
                      });
}

// ---------------------------------------------------------------------------
// Backward machinery
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<Node<T>*> topo_from(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_map<Node<T>*, int> state;  // 0 new, 1 open, 2 done
    std::vector<std::pair<Node<T>*, size_t>> stack{{root, 0}};
    state[root] = 1;
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].node();
            if (p && p->requires_grad && state[p] == 0) {
                state[p] = 1;
                stack.push_back({p, 0});
            }
        } else {
            state[n] = 2;
            order.push_back(n);
            stack.pop_back();
        }
    }
    return order;  // parents before children; reverse for backward
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. When `targets` is empty, gradients
// are accumulated into every reachable requires-grad leaf; otherwise only
// paths into the targets are evaluated and the result map holds their grads.
template <typename T>
std::unordered_map<Node<T>*, Var<T>> run_backward(const Var<T>& root,
                                                  const std::vector<Var<T>>& targets,
                                                  bool create_graph, bool accumulate_leaves) {
    if (root.value().numel() != 1) throw Error("backward: root must be scalar");
    if (!root.requires_grad()) throw Error("backward: root does not require grad");

    auto order = detail::topo_from<T>(root.node());

    std::unordered_map<Node<T>*, bool> needed;
    std::unordered_map<Node<T>*, bool> is_target;
    if (targets.empty()) {
        for (auto* n : order) needed[n] = true;
    } else {
        for (const auto& t : targets) {
            needed[t.node()] = true;
            is_target[t.node()] = true;
        }
        for (auto* n : order) {  // parents precede children in `order`
            if (needed[n]) continue;
            bool need = false;
            for (const auto& p : n->parents)
                if (p.node() && p.node()->requires_grad && needed[p.node()]) need = true;
            needed[n] = need;
        }
    }

    std::unordered_map<Node<T>*, Var<T>> grads;
    grads[root.node()] = Var<T>::constant(Tensor<T>::scalar(T(1)));

    GradModeGuard guard(create_graph);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        auto git = grads.find(n);
        if (git == grads.end() || !needed[n]) continue;
        Var<T> g = git->second;
        if (!n->backward) continue;  // leaf

        std::vector<bool> need_mask(n->parents.size());
        for (size_t i = 0; i < n->parents.size(); ++i) {
            Node<T>* p = n->parents[i].node();
            need_mask[i] = p && p->requires_grad && needed[p];
        }
        std::vector<Var<T>> pgrads = n->backward(g, need_mask);
        for (size_t i = 0; i < n->parents.size(); ++i) {
            if (!need_mask[i] || !pgrads[i].defined()) continue;
            Node<T>* p = n->parents[i].node();
            auto pit = grads.find(p);
            if (pit == grads.end())
                grads.emplace(p, pgrads[i]);
            else
                pit->second = add(pit->second, pgrads[i]);
        }
        if (n != root.node() && !is_target[n]) grads.erase(n);  // free as soon as consumed
    }

    if (accumulate_leaves) {
        for (auto* n : order) {
            if (n->backward || !n->requires_grad) continue;
            auto git = grads.find(n);
            if (git == grads.end()) continue;
            if (!n->grad_acc) {
                n->grad_acc = std::make_shared<Tensor<T>>(git->second.value());
            } else {
                T* a = n->grad_acc->ptr();
                const T* b = git->second.value().ptr();
                for (std::int64_t i = 0; i < git->second.value().numel(); ++i) a[i] += b[i];
            }
        }
    }
    return grads;
}

// Accumulate d(loss)/d(leaf) into every requires-grad leaf.
template <typename T>
void backward(const Var<T>& loss) {
    run_backward(loss, {}, /*create_graph=*/false, /*accumulate_leaves=*/true);
}

// d(root)/d(input) as a Var; with create_graph=true the result is itself
// differentiable. Returns zeros when input does not influence root.
template <typename T>
Var<T> grad_wrt(const Var<T>& root, const Var<T>& input, bool create_graph) {
    auto grads = run_backward(root, {input}, create_graph, /*accumulate_leaves=*/false);
    auto it = grads.find(input.node());
    if (it == grads.end()) return Var<T>::constant(Tensor<T>(input.shape()));
    return it->second;
}

}  // namespace volgen
