#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "udavt/common.hpp"
#include "udavt/rng.hpp"

namespace udavt {

// Dense tensors with reverse-mode autodiff. Scalar type S is float or
// double: double for the oracle/gradcheck path, float for training.
//
// Kernel set: matmul, transpose, add, sub, mul (Hadamard), scalar_mul,
// mean_axis, sum_axis (+ sum_all), relu, gelu, softmax (last axis), log,
// square, sqrt, layer_norm (learnable affine), concat, slice. reshape and
// gather_rows are data-movement helpers; make_op exposes the node factory
// so domain-specific fused ops (cross-correlation, MMD, ...) can define
// their own backward.
//
// No broadcasting except scalar-with-tensor in add/sub/mul.

template <class S> class TensorT;
template <class S> class GradStoreT;

inline std::atomic<bool> g_check_finite{true};
inline thread_local int t_no_grad_depth = 0;

// Disables graph construction in scope (inference / feature caching).
struct NoGradGuard {
    NoGradGuard() { ++t_no_grad_depth; }
    ~NoGradGuard() { --t_no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <class S>
struct NodeT {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until used
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<TensorT<S>> inputs;
    std::function<void(NodeT<S>&, GradStoreT<S>&)> backprop;

    size_t size() const { return data.size(); }
};

// Routes gradient accumulation for one backward pass. Interior nodes get
// per-pass scratch buffers (repeated passes must not re-propagate stale
// values); leaf gradients persist in the node, or in an external redirect
// map when shared parameter leaves are trained sample-parallel.
template <class S>
class GradStoreT {
  public:
    using Redirect = std::unordered_map<const NodeT<S>*, std::vector<S>>;

    GradStoreT() = default;
    explicit GradStoreT(Redirect* redirect) : redirect_(redirect) {}

    std::vector<S>& grad_of(NodeT<S>& n) {
        if (n.backprop) {
            auto& buf = scratch_[&n];
            if (buf.empty()) buf.assign(n.size(), S(0));
            return buf;
        }
        if (redirect_) {
            auto it = redirect_->find(&n);
            if (it != redirect_->end()) {
                if (it->second.empty()) it->second.assign(n.size(), S(0));
                return it->second;
            }
        }
        if (n.grad.empty()) n.grad.assign(n.size(), S(0));
        return n.grad;
    }

    bool has_grad(const NodeT<S>& n) const {
        if (n.backprop) {
            auto it = scratch_.find(&n);
            return it != scratch_.end() && !it->second.empty();
        }
        if (redirect_) {
            auto it = redirect_->find(&n);
            if (it != redirect_->end()) return !it->second.empty();
        }
        return !n.grad.empty();
    }

  private:
    Redirect* redirect_ = nullptr;
    Redirect scratch_;
};

template <class S>
class TensorT {
  public:
    TensorT() = default;

    static TensorT from_data(std::vector<int> shape, std::vector<S> data, bool requires_grad = false) {
        size_t n = count(shape);
        if (n != data.size())
            throw PreconditionError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(n) +
                                    " values, got " + std::to_string(data.size()));
        auto node = std::make_shared<NodeT<S>>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad && t_no_grad_depth == 0;
        return TensorT(std::move(node));
    }

    static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
        std::vector<S> d(count(shape), S(0));
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static TensorT full(std::vector<int> shape, S value) {
        std::vector<S> d(count(shape), value);
        return from_data(std::move(shape), std::move(d));
    }

    static TensorT ones(std::vector<int> shape) { return full(std::move(shape), S(1)); }

    static TensorT scalar(S v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    size_t size() const { return node_->data.size(); }
    int rows() const { return node_->shape.size() == 1 ? 1 : node_->shape[0]; }
    int cols() const { return node_->shape.back(); }

    std::vector<S>& data() { return node_->data; }
    const std::vector<S>& data() const { return node_->data; }
    S value() const {
        if (size() != 1) throw PreconditionError("value(): tensor is not scalar, shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    std::vector<S>& grad() {
        if (node_->grad.empty()) node_->grad.assign(size(), S(0));
        return node_->grad;
    }
    const std::vector<S>& grad_ref() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    TensorT detached() const {
        return from_data(node_->shape, node_->data, false);
    }

    NodeT<S>* node() const { return node_.get(); }
    std::shared_ptr<NodeT<S>> shared_node() const { return node_; }

    explicit TensorT(std::shared_ptr<NodeT<S>> n) : node_(std::move(n)) {}

    static size_t count(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw PreconditionError("tensor: non-positive extent in shape " + shape_str(shape));
            n *= static_cast<size_t>(d);
        }
        return n;
    }

  private:
    std::shared_ptr<NodeT<S>> node_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

namespace detail {

template <class S>
void check_finite(const std::vector<S>& v, const char* op) {
    if (!g_check_finite.load(std::memory_order_relaxed)) return;
    for (S x : v)
        if (!std::isfinite(static_cast<double>(x)))
            throw NumericError(std::string("non-finite value produced by ") + op);
}

// C[n,m] (+)= A[n,k] * B[k,m]
template <class S>
void gemm_nn(const S* a, const S* b, S* c, int n, int k, int m, bool accumulate) {
    for (int i = 0; i < n; ++i) {
        S* ci = c + static_cast<size_t>(i) * m;
        if (!accumulate)
            for (int j = 0; j < m; ++j) ci[j] = S(0);
        const S* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            S av = ai[p];
            const S* bp = b + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[n,m] (+)= A[n,k] * B^T  where B is [m,k]
template <class S>
void gemm_nt(const S* a, const S* b, S* c, int n, int k, int m, bool accumulate) {
    for (int i = 0; i < n; ++i) {
        const S* ai = a + static_cast<size_t>(i) * k;
        S* ci = c + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const S* bj = b + static_cast<size_t>(j) * k;
            S acc = S(0);
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

// C[k,m] (+)= A^T * B  where A is [n,k], B is [n,m]
template <class S>
void gemm_tn(const S* a, const S* b, S* c, int n, int k, int m, bool accumulate) {
    if (!accumulate)
        for (size_t i = 0; i < static_cast<size_t>(k) * m; ++i) c[i] = S(0);
    for (int p = 0; p < n; ++p) {
        const S* ap = a + static_cast<size_t>(p) * k;
        const S* bp = b + static_cast<size_t>(p) * m;
        for (int i = 0; i < k; ++i) {
            S av = ap[i];
            S* ci = c + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
}

template <class S>
void accumulate_into(std::vector<S>& dst, const std::vector<S>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// Factory for ops. backprop sees the finished node (upstream grad available
// through the store) and accumulates into input grads through the store.
template <class S>
TensorT<S> make_op(std::vector<int> shape, std::vector<S> data, std::vector<TensorT<S>> inputs,
                   const char* name, std::function<void(NodeT<S>&, GradStoreT<S>&)> backprop) {
    detail::check_finite(data, name);
    auto node = std::make_shared<NodeT<S>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = name;
    bool rg = false;
    if (t_no_grad_depth == 0)
        for (const auto& in : inputs) rg = rg || in.requires_grad();
    node->requires_grad = rg;
    if (rg) {
        node->inputs = std::move(inputs);
        node->backprop = std::move(backprop);
    }
    return TensorT<S>(std::move(node));
}

// ---------------------------------------------------------------------------
// kernels

template <class S>
TensorT<S> matmul(TensorT<S> a, TensorT<S> b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw PreconditionError("matmul: expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
    int n = a.dim(0), k = a.dim(1), k2 = b.dim(0), m = b.dim(1);
    if (k != k2)
        throw PreconditionError("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
    std::vector<S> out(static_cast<size_t>(n) * m);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m, false);
    return make_op<S>({n, m}, std::move(out), {a, b}, "matmul", [n, k, m](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& a_in = node.inputs[0];
        auto& b_in = node.inputs[1];
        if (a_in.requires_grad())
            detail::gemm_nt(g.data(), b_in.data().data(), gs.grad_of(*a_in.node()).data(), n, m, k, true);
        if (b_in.requires_grad())
            detail::gemm_tn(a_in.data().data(), g.data(), gs.grad_of(*b_in.node()).data(), n, k, m, true);
    });
}

template <class S>
TensorT<S> transpose(TensorT<S> a) {
    if (a.ndim() != 2) throw PreconditionError("transpose: expects 2-d operand, got " + shape_str(a.shape()));
    int n = a.dim(0), m = a.dim(1);
    std::vector<S> out(a.size());
    const auto& src = a.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out[static_cast<size_t>(j) * n + i] = src[static_cast<size_t>(i) * m + j];
    return make_op<S>({m, n}, std::move(out), {a}, "transpose", [n, m](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) gi[static_cast<size_t>(i) * m + j] += g[static_cast<size_t>(j) * n + i];
    });
}

namespace detail {

enum class EwKind { add, sub, mul };

// Shared elementwise core with scalar-with-tensor broadcast only.
template <class S>
TensorT<S> elementwise(TensorT<S> a, TensorT<S> b, EwKind kind, const char* name) {
    bool a_scalar = a.size() == 1;
    bool b_scalar = b.size() == 1;
    if (a.shape() != b.shape() && !a_scalar && !b_scalar)
        throw PreconditionError(std::string(name) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
    const auto& av = a.data();
    const auto& bv = b.data();
    size_t n = std::max(av.size(), bv.size());
    std::vector<S> out(n);
    for (size_t i = 0; i < n; ++i) {
        S x = av[a_scalar ? 0 : i];
        S y = bv[b_scalar ? 0 : i];
        out[i] = kind == EwKind::add ? x + y : kind == EwKind::sub ? x - y : x * y;
    }
    std::vector<int> shape = av.size() >= bv.size() ? a.shape() : b.shape();
    return make_op<S>(std::move(shape), std::move(out), {a, b}, name,
                      [kind, a_scalar, b_scalar, n](NodeT<S>& node, GradStoreT<S>& gs) {
                          auto& g = gs.grad_of(node);
                          auto& a_in = node.inputs[0];
                          auto& b_in = node.inputs[1];
                          if (a_in.requires_grad()) {
                              auto& ga = gs.grad_of(*a_in.node());
                              for (size_t i = 0; i < n; ++i) {
                                  S w = kind == EwKind::mul ? b_in.data()[b_scalar ? 0 : i] : S(1);
                                  ga[a_scalar ? 0 : i] += g[i] * w;
                              }
                          }
                          if (b_in.requires_grad()) {
                              auto& gb = gs.grad_of(*b_in.node());
                              for (size_t i = 0; i < n; ++i) {
                                  S w = kind == EwKind::mul ? a_in.data()[a_scalar ? 0 : i]
                                        : kind == EwKind::sub ? S(-1)
                                                              : S(1);
                                  gb[b_scalar ? 0 : i] += g[i] * w;
                              }
                          }
                      });
}

}  // namespace detail

template <class S> TensorT<S> add(TensorT<S> a, TensorT<S> b) { return detail::elementwise(a, b, detail::EwKind::add, "add"); }
template <class S> TensorT<S> sub(TensorT<S> a, TensorT<S> b) { return detail::elementwise(a, b, detail::EwKind::sub, "sub"); }
template <class S> TensorT<S> mul(TensorT<S> a, TensorT<S> b) { return detail::elementwise(a, b, detail::EwKind::mul, "mul"); }

template <class S>
TensorT<S> scalar_mul(TensorT<S> a, S c) {
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return make_op<S>(a.shape(), std::move(out), {a}, "scalar_mul", [c](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * c;
    });
}

namespace detail {

template <class S>
TensorT<S> reduce_axis(TensorT<S> a, int axis, bool mean, const char* name) {
    if (a.ndim() == 1) {
        if (axis != 0) throw PreconditionError(std::string(name) + ": axis out of range for " + shape_str(a.shape()));
        size_t n = a.size();
        S acc = S(0);
        for (S x : a.data()) acc += x;
        if (mean) acc /= static_cast<S>(n);
        return make_op<S>({1}, {acc}, {a}, name, [n, mean](NodeT<S>& node, GradStoreT<S>& gs) {
            auto& g = gs.grad_of(node);
            auto& in = node.inputs[0];
            if (!in.requires_grad()) return;
            auto& gi = gs.grad_of(*in.node());
            S w = mean ? g[0] / static_cast<S>(n) : g[0];
            for (size_t i = 0; i < n; ++i) gi[i] += w;
        });
    }
    if (a.ndim() != 2 || (axis != 0 && axis != 1))
        throw PreconditionError(std::string(name) + ": expects 1-d or 2-d operand and axis 0/1, got " +
                                shape_str(a.shape()));
    int n = a.dim(0), m = a.dim(1);
    int out_len = axis == 0 ? m : n;
    int red = axis == 0 ? n : m;
    std::vector<S> out(static_cast<size_t>(out_len), S(0));
    const auto& av = a.data();
    if (axis == 0) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) out[j] += av[static_cast<size_t>(i) * m + j];
    } else {
        for (int i = 0; i < n; ++i) {
            S acc = S(0);
            for (int j = 0; j < m; ++j) acc += av[static_cast<size_t>(i) * m + j];
            out[i] = acc;
        }
    }
    if (mean)
        for (auto& x : out) x /= static_cast<S>(red);
    return make_op<S>({out_len}, std::move(out), {a}, name,
                      [n, m, axis, red, mean](NodeT<S>& node, GradStoreT<S>& gs) {
                          auto& g = gs.grad_of(node);
                          auto& in = node.inputs[0];
                          if (!in.requires_grad()) return;
                          auto& gi = gs.grad_of(*in.node());
                          S div = mean ? static_cast<S>(red) : S(1);
                          for (int i = 0; i < n; ++i)
                              for (int j = 0; j < m; ++j)
                                  gi[static_cast<size_t>(i) * m + j] += g[axis == 0 ? j : i] / div;
                      });
}

}  // namespace detail

template <class S> TensorT<S> sum_axis(TensorT<S> a, int axis) { return detail::reduce_axis(a, axis, false, "sum_axis"); }
template <class S> TensorT<S> mean_axis(TensorT<S> a, int axis) { return detail::reduce_axis(a, axis, true, "mean_axis"); }

template <class S>
TensorT<S> sum_all(TensorT<S> a) {
    size_t n = a.size();
    S acc = S(0);
    for (S x : a.data()) acc += x;
    return make_op<S>({1}, {acc}, {a}, "sum_all", [n](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        for (size_t i = 0; i < n; ++i) gi[i] += g[0];
    });
}

template <class S>
TensorT<S> relu(TensorT<S> a) {
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > S(0) ? av[i] : S(0);
    return make_op<S>(a.shape(), std::move(out), {a}, "relu", [](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        const auto& x = in.data();
        for (size_t i = 0; i < g.size(); ++i)
            if (x[i] > S(0)) gi[i] += g[i];
    });
}

template <class S>
TensorT<S> gelu(TensorT<S> a) {
    // exact erf form
    std::vector<S> out(a.size());
    const auto& av = a.data();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < out.size(); ++i) {
        double x = static_cast<double>(av[i]);
        out[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    return make_op<S>(a.shape(), std::move(out), {a}, "gelu", [](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        const auto& xv = in.data();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < g.size(); ++i) {
            double x = static_cast<double>(xv[i]);
            double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            gi[i] += g[i] * static_cast<S>(phi + x * pdf);
        }
    });
}

// softmax over the last axis; 1-d input treated as one row.
template <class S>
TensorT<S> softmax(TensorT<S> a) {
    if (a.ndim() > 2) throw PreconditionError("softmax: expects 1-d or 2-d operand, got " + shape_str(a.shape()));
    int n = a.rows(), m = a.cols();
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (int i = 0; i < n; ++i) {
        const S* row = av.data() + static_cast<size_t>(i) * m;
        S* orow = out.data() + static_cast<size_t>(i) * m;
        S mx = row[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < m; ++j) {
            double e = std::exp(static_cast<double>(row[j] - mx));
            orow[j] = static_cast<S>(e);
            denom += e;
        }
        for (int j = 0; j < m; ++j) orow[j] = static_cast<S>(static_cast<double>(orow[j]) / denom);
    }
    return make_op<S>(a.shape(), std::move(out), {a}, "softmax", [n, m](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        const auto& y = node.data;
        for (int i = 0; i < n; ++i) {
            size_t off = static_cast<size_t>(i) * m;
            S dot = S(0);
            for (int j = 0; j < m; ++j) dot += g[off + j] * y[off + j];
            for (int j = 0; j < m; ++j) gi[off + j] += y[off + j] * (g[off + j] - dot);
        }
    });
}

template <class S>
TensorT<S> log(TensorT<S> a) {
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(std::log(static_cast<double>(av[i])));
    return make_op<S>(a.shape(), std::move(out), {a}, "log", [](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        const auto& x = in.data();
        for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / x[i];
    });
}

template <class S>
TensorT<S> square(TensorT<S> a) {
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
    return make_op<S>(a.shape(), std::move(out), {a}, "square", [](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        const auto& x = in.data();
        for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * S(2) * x[i];
    });
}

template <class S>
TensorT<S> sqrt(TensorT<S> a) {
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(std::sqrt(static_cast<double>(av[i])));
    return make_op<S>(a.shape(), std::move(out), {a}, "sqrt", [](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        const auto& y = node.data;
        for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / (S(2) * y[i]);
    });
}

// Row-wise layer norm with learnable affine: y = gamma * (x-mu)/sqrt(var+eps) + beta.
template <class S>
TensorT<S> layer_norm(TensorT<S> x, TensorT<S> gamma, TensorT<S> beta, double eps = 1e-5) {
    if (x.ndim() != 2) throw PreconditionError("layer_norm: expects 2-d input, got " + shape_str(x.shape()));
    int n = x.dim(0), d = x.dim(1);
    if (gamma.size() != static_cast<size_t>(d) || beta.size() != static_cast<size_t>(d))
        throw PreconditionError("layer_norm: affine shape " + shape_str(gamma.shape()) + "/" +
                                shape_str(beta.shape()) + " does not match feature extent " + std::to_string(d));
    std::vector<S> out(x.size());
    auto xhat = std::make_shared<std::vector<S>>(x.size());
    auto istd = std::make_shared<std::vector<S>>(n);
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (int i = 0; i < n; ++i) {
        const S* row = xv.data() + static_cast<size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = row[j] - mu;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        (*istd)[i] = static_cast<S>(is);
        for (int j = 0; j < d; ++j) {
            S xh = static_cast<S>((row[j] - mu) * is);
            (*xhat)[static_cast<size_t>(i) * d + j] = xh;
            out[static_cast<size_t>(i) * d + j] = gv[j] * xh + bv[j];
        }
    }
    return make_op<S>(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                      [n, d, xhat, istd](NodeT<S>& node, GradStoreT<S>& gs) {
                          auto& g = gs.grad_of(node);
                          auto& x_in = node.inputs[0];
                          auto& g_in = node.inputs[1];
                          auto& b_in = node.inputs[2];
                          const auto& gv = g_in.data();
                          if (g_in.requires_grad()) {
                              auto& gg = gs.grad_of(*g_in.node());
                              for (int i = 0; i < n; ++i)
                                  for (int j = 0; j < d; ++j)
                                      gg[j] += g[static_cast<size_t>(i) * d + j] * (*xhat)[static_cast<size_t>(i) * d + j];
                          }
                          if (b_in.requires_grad()) {
                              auto& gb = gs.grad_of(*b_in.node());
                              for (int i = 0; i < n; ++i)
                                  for (int j = 0; j < d; ++j) gb[j] += g[static_cast<size_t>(i) * d + j];
                          }
                          if (x_in.requires_grad()) {
                              auto& gx = gs.grad_of(*x_in.node());
                              for (int i = 0; i < n; ++i) {
                                  size_t off = static_cast<size_t>(i) * d;
                                  double m1 = 0.0, m2 = 0.0;
                                  for (int j = 0; j < d; ++j) {
                                      double dxh = static_cast<double>(g[off + j]) * gv[j];
                                      m1 += dxh;
                                      m2 += dxh * (*xhat)[off + j];
                                  }
                                  m1 /= d;
                                  m2 /= d;
                                  for (int j = 0; j < d; ++j) {
                                      double dxh = static_cast<double>(g[off + j]) * gv[j];
                                      gx[off + j] += static_cast<S>((*istd)[i] * (dxh - m1 - (*xhat)[off + j] * m2));
                                  }
                              }
                          }
                      });
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
    if (parts.empty()) throw PreconditionError("concat: no inputs");
    int nd = parts[0].ndim();
    if (nd == 1 && axis != 0)
        throw PreconditionError("concat: axis out of range for " + shape_str(parts[0].shape()));
    if (nd == 2 && axis != 0 && axis != 1)
        throw PreconditionError("concat: axis out of range for " + shape_str(parts[0].shape()));
    for (const auto& p : parts) {
        if (p.ndim() != nd)
            throw PreconditionError("concat: rank mismatch: " + shape_str(parts[0].shape()) + " vs " +
                                    shape_str(p.shape()));
        for (int i = 0; i < nd; ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw PreconditionError("concat: shape mismatch off-axis: " + shape_str(parts[0].shape()) +
                                        " vs " + shape_str(p.shape()));
    }
    if (nd == 1 || axis == 0) {
        std::vector<S> out;
        std::vector<int> offsets;
        for (const auto& p : parts) {
            offsets.push_back(static_cast<int>(out.size()));
            out.insert(out.end(), p.data().begin(), p.data().end());
        }
        std::vector<int> shape = parts[0].shape();
        int total = 0;
        for (const auto& p : parts) total += nd == 1 ? static_cast<int>(p.size()) : p.dim(0);
        shape[0] = total;
        return make_op<S>(std::move(shape), std::move(out), parts, "concat",
                          [offsets](NodeT<S>& node, GradStoreT<S>& gs) {
                              auto& g = gs.grad_of(node);
                              for (size_t p = 0; p < node.inputs.size(); ++p) {
                                  auto& in = node.inputs[p];
                                  if (!in.requires_grad()) continue;
                                  auto& gi = gs.grad_of(*in.node());
                                  size_t off = static_cast<size_t>(offsets[p]);
                                  for (size_t i = 0; i < gi.size(); ++i) gi[i] += g[off + i];
                              }
                          });
    }
    // axis == 1, 2-d
    int n = parts[0].dim(0);
    int total = 0;
    std::vector<int> col_off;
    for (const auto& p : parts) {
        col_off.push_back(total);
        total += p.dim(1);
    }
    std::vector<S> out(static_cast<size_t>(n) * total);
    for (size_t p = 0; p < parts.size(); ++p) {
        int m = parts[p].dim(1);
        const auto& pv = parts[p].data();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                out[static_cast<size_t>(i) * total + col_off[p] + j] = pv[static_cast<size_t>(i) * m + j];
    }
    return make_op<S>({n, total}, std::move(out), parts, "concat",
                      [n, total, col_off](NodeT<S>& node, GradStoreT<S>& gs) {
                          auto& g = gs.grad_of(node);
                          for (size_t p = 0; p < node.inputs.size(); ++p) {
                              auto& in = node.inputs[p];
                              if (!in.requires_grad()) continue;
                              auto& gi = gs.grad_of(*in.node());
                              int m = in.dim(1);
                              for (int i = 0; i < n; ++i)
                                  for (int j = 0; j < m; ++j)
                                      gi[static_cast<size_t>(i) * m + j] +=
                                          g[static_cast<size_t>(i) * total + col_off[p] + j];
                          }
                      });
}

template <class S>
TensorT<S> slice(TensorT<S> a, int axis, int start, int len) {
    if (a.ndim() == 1) {
        if (axis != 0 || start < 0 || len <= 0 || start + len > a.dim(0))
            throw PreconditionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                    ") invalid for " + shape_str(a.shape()));
        std::vector<S> out(a.data().begin() + start, a.data().begin() + start + len);
        return make_op<S>({len}, std::move(out), {a}, "slice", [start, len](NodeT<S>& node, GradStoreT<S>& gs) {
            auto& g = gs.grad_of(node);
            auto& in = node.inputs[0];
            if (!in.requires_grad()) return;
            auto& gi = gs.grad_of(*in.node());
            for (int i = 0; i < len; ++i) gi[static_cast<size_t>(start + i)] += g[i];
        });
    }
    if (a.ndim() != 2 || (axis != 0 && axis != 1))
        throw PreconditionError("slice: expects 1-d or 2-d operand and axis 0/1, got " + shape_str(a.shape()));
    int n = a.dim(0), m = a.dim(1);
    int ext = axis == 0 ? n : m;
    if (start < 0 || len <= 0 || start + len > ext)
        throw PreconditionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") invalid for " + shape_str(a.shape()));
    std::vector<int> shape = axis == 0 ? std::vector<int>{len, m} : std::vector<int>{n, len};
    std::vector<S> out(TensorT<S>::count(shape));
    const auto& av = a.data();
    if (axis == 0) {
        std::copy(av.begin() + static_cast<size_t>(start) * m, av.begin() + static_cast<size_t>(start + len) * m,
                  out.begin());
    } else {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < len; ++j)
                out[static_cast<size_t>(i) * len + j] = av[static_cast<size_t>(i) * m + start + j];
    }
    return make_op<S>(std::move(shape), std::move(out), {a}, "slice",
                      [axis, start, len, n, m](NodeT<S>& node, GradStoreT<S>& gs) {
                          auto& g = gs.grad_of(node);
                          auto& in = node.inputs[0];
                          if (!in.requires_grad()) return;
                          auto& gi = gs.grad_of(*in.node());
                          if (axis == 0) {
                              for (size_t i = 0; i < g.size(); ++i) gi[static_cast<size_t>(start) * m + i] += g[i];
                          } else {
                              for (int i = 0; i < n; ++i)
                                  for (int j = 0; j < len; ++j)
                                      gi[static_cast<size_t>(i) * m + start + j] += g[static_cast<size_t>(i) * len + j];
                          }
                      });
}

template <class S>
TensorT<S> reshape(TensorT<S> a, std::vector<int> shape) {
    if (TensorT<S>::count(shape) != a.size())
        throw PreconditionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return make_op<S>(std::move(shape), a.data(), {a}, "reshape", [](NodeT<S>& node, GradStoreT<S>& gs) {
        auto& g = gs.grad_of(node);
        auto& in = node.inputs[0];
        if (!in.requires_grad()) return;
        auto& gi = gs.grad_of(*in.node());
        for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
}

// out[r, :] = a[idx[r], :]; backward scatter-adds.
template <class S>
TensorT<S> gather_rows(TensorT<S> a, std::vector<int> idx) {
    if (a.ndim() != 2) throw PreconditionError("gather_rows: expects 2-d operand, got " + shape_str(a.shape()));
    int n = a.dim(0), m = a.dim(1);
    for (int r : idx)
        if (r < 0 || r >= n)
            throw PreconditionError("gather_rows: index " + std::to_string(r) + " out of range for " +
                                    shape_str(a.shape()));
    std::vector<S> out(idx.size() * static_cast<size_t>(m));
    const auto& av = a.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(av.begin() + static_cast<size_t>(idx[r]) * m, av.begin() + static_cast<size_t>(idx[r] + 1) * m,
                  out.begin() + r * m);
    int rows_out = static_cast<int>(idx.size());
    return make_op<S>({rows_out, m}, std::move(out), {a}, "gather_rows",
                      [idx = std::move(idx), m](NodeT<S>& node, GradStoreT<S>& gs) {
                          auto& g = gs.grad_of(node);
                          auto& in = node.inputs[0];
                          if (!in.requires_grad()) return;
                          auto& gi = gs.grad_of(*in.node());
                          for (size_t r = 0; r < idx.size(); ++r)
                              for (int j = 0; j < m; ++j)
                                  gi[static_cast<size_t>(idx[r]) * m + j] += g[r * static_cast<size_t>(m) + j];
                      });
}

// ---------------------------------------------------------------------------
// backward

namespace detail {

template <class S>
std::vector<NodeT<S>*> topo_order(NodeT<S>* root) {
    std::vector<NodeT<S>*> order;
    std::unordered_set<NodeT<S>*> visited;
    // iterative post-order DFS
    std::vector<std::pair<NodeT<S>*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->inputs.size()) {
            NodeT<S>* child = node->inputs[next_child].node();
            ++next_child;
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // children before parents
}

template <class S>
void run_backward(NodeT<S>* root, const std::vector<S>& seed, GradStoreT<S>& gs) {
    if (!root->requires_grad) return;  // constant graph, nothing to populate
    auto order = topo_order(root);
    {
        auto& g = gs.grad_of(*root);
        for (size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<S>* node = *it;
        if (!node->backprop) continue;
        if (!gs.has_grad(*node)) continue;
        node->backprop(*node, gs);
    }
}

}  // namespace detail

// Populates gradient buffers of every requires_grad node reachable from
// loss. Repeated calls accumulate.
template <class S>
void backward(TensorT<S> loss, GradStoreT<S>* store = nullptr) {
    if (loss.size() != 1)
        throw PreconditionError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    GradStoreT<S> local;
    detail::run_backward(loss.node(), std::vector<S>{S(1)}, store ? *store : local);
}

// Backward from an interior node with an explicit upstream gradient.
template <class S>
void backward_seeded(TensorT<S> t, const std::vector<S>& seed, GradStoreT<S>* store = nullptr) {
    if (seed.size() != t.size())
        throw PreconditionError("backward_seeded: seed size " + std::to_string(seed.size()) +
                                " does not match tensor " + shape_str(t.shape()));
    GradStoreT<S> local;
    detail::run_backward(t.node(), seed, store ? *store : local);
}

// ---------------------------------------------------------------------------
// seeded initializers

template <class S>
TensorT<S> randn_tensor(std::vector<int> shape, Rng rng, double sd) {
    std::vector<S> d(TensorT<S>::count(shape));
    for (auto& x : d) x = static_cast<S>(rng.normal(0.0, sd));
    return TensorT<S>::from_data(std::move(shape), std::move(d));
}

template <class S>
TensorT<S> trunc_normal_tensor(std::vector<int> shape, Rng rng, double sd) {
    std::vector<S> d(TensorT<S>::count(shape));
    for (auto& x : d) x = static_cast<S>(rng.trunc_normal(sd));
    return TensorT<S>::from_data(std::move(shape), std::move(d));
}

template <class S>
TensorT<S> uniform_tensor(std::vector<int> shape, Rng rng, double lo, double hi) {
    std::vector<S> d(TensorT<S>::count(shape));
    for (auto& x : d) x = static_cast<S>(rng.uniform(lo, hi));
    return TensorT<S>::from_data(std::move(shape), std::move(d));
}

}  // namespace udavt
