#pragma once

/// \file autograd.hpp
/// \brief Tape-free reverse-mode automatic differentiation over Tensor values.
///
/// A Var is a shared handle to a graph node. Operations on Vars that require
/// gradients record their parents and a backward closure; calling backward()
/// on a scalar result walks the graph in reverse topological order. Inside a
/// NoGradGuard scope no graph is recorded, so inference runs allocation-light.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tgps/errors.hpp"
#include "tgps/tensor.hpp"

namespace tgps::ag {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.empty()) grad = Tensor(value.shape);
        return grad;
    }
};

namespace detail {
inline bool& grad_disabled() {
    thread_local bool disabled = false;
    return disabled;
}
}  // namespace detail

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_disabled()) { detail::grad_disabled() = true; }
    ~NoGradGuard() { detail::grad_disabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    int dim(int i) const { return node_->value.dim(i); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    /// Gradient accumulated by the last backward(); zero tensor if none reached this node.
    Tensor& grad() { return node_->ensure_grad(); }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(0.0);
    }

    /// The same value as a graph leaf with no history.
    Var detach() const { return Var(node_->value, false); }

    double item() const {
        if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
        return node_->value[0];
    }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }

/// Builds an op result. `bw` is stored only when some parent requires a gradient.
inline Var make_op(Tensor value, std::initializer_list<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (detail::grad_disabled()) return Var(n);
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return Var(n);
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(bw);
    return Var(n);
}

inline Var make_op(Tensor value, const std::vector<Var>& parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (detail::grad_disabled()) return Var(n);
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return Var(n);
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(bw);
    return Var(n);
}

/// Reverse-mode sweep from a scalar. Gradients accumulate into every reachable node.
inline void backward(const Var& root) {
    if (root.value().size() != 1) throw ShapeError("backward() requires a scalar root, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

namespace detail {
inline Tensor* grad_of(Node& out, std::size_t i) {
    Node& p = *out.parents[i];
    return p.requires_grad ? &p.ensure_grad() : nullptr;
}
}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& o) {
        for (std::size_t k = 0; k < 2; ++k)
            if (Tensor* g = detail::grad_of(o, k))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
        if (Tensor* g = detail::grad_of(o, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= o.grad[i];
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& o) {
        const Tensor& av = o.parents[0]->value;
        const Tensor& bv = o.parents[1]->value;
        if (Tensor* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * bv[i];
        if (Tensor* g = detail::grad_of(o, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * av[i];
    });
}

/// Sum of a list of same-shaped Vars.
inline Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("add_n of empty list");
    Tensor out = xs[0].value();
    for (std::size_t k = 1; k < xs.size(); ++k) {
        require_same_shape(out, xs[k].value(), "add_n");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += xs[k].value()[i];
    }
    return make_op(std::move(out), xs, [](Node& o) {
        for (std::size_t k = 0; k < o.parents.size(); ++k)
            if (Tensor* g = detail::grad_of(o, k))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    });
}

/// Elementwise product with a constant tensor of the same shape.
inline Var mul_const(const Var& a, const Tensor& c) {
    require_same_shape(a.value(), c, "mul_const");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
    return make_op(std::move(out), {a}, [c](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * c[i];
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v *= s;
    return make_op(std::move(out), {a}, [s](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * s;
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v += s;
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    });
}

namespace detail {
/// Unary op whose derivative is a function of (input, output).
template <class F, class D>
Var unary(const Var& a, F f, D dfdx) {
    Tensor out = a.value();
    for (double& v : out.data) v = f(v);
    return make_op(std::move(out), {a}, [dfdx](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            const Tensor& x = o.parents[0]->value;
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * dfdx(x[i], o.value[i]);
        }
    });
}
}  // namespace detail

inline Var sigmoid(const Var& a) {
    return detail::unary(
        a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var leaky_relu(const Var& a, double slope = 0.2) {
    return detail::unary(
        a, [slope](double x) { return x > 0 ? x : slope * x; }, [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

inline Var relu(const Var& a) { return leaky_relu(a, 0.0); }

inline Var exp(const Var& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var abs(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::fabs(x); }, [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Var square(const Var& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// log(clamp(p, eps, 1 - eps)); zero gradient where the clamp is active.
inline Var clamped_log(const Var& p, double eps) {
    return detail::unary(
        p, [eps](double x) { return std::log(std::clamp(x, eps, 1.0 - eps)); },
        [eps](double x, double) { return (x < eps || x > 1.0 - eps) ? 0.0 : 1.0 / x; });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
    return make_op(Tensor::scalar(a.value().sum()), {a}, [](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (double& v : g->data) v += o.grad[0];
    });
}

inline Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    return make_op(Tensor::scalar(a.value().sum() / n), {a}, [n](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (double& v : g->data) v += o.grad[0] / n;
    });
}

/// log(sum(exp(x))) over all entries, computed with max-shift.
inline Var logsumexp(const Var& a) {
    const auto& x = a.value().data;
    if (x.empty()) throw ShapeError("logsumexp of empty tensor");
    const double m = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    const double lse = m + std::log(s);
    return make_op(Tensor::scalar(lse), {a}, [lse](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0)) {
            const Tensor& xv = o.parents[0]->value;
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[0] * std::exp(xv[i] - lse);
        }
    });
}

// ---------------------------------------------------------------- shape ops

inline Var reshape(const Var& a, Shape s) {
    Tensor out = a.value().reshaped(std::move(s));
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    });
}

inline Var transpose(const Var& a) {
    if (a.value().rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
    const int r = a.dim(0), c = a.dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
    return make_op(std::move(out), {a}, [r, c](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g->at(i, j) += o.grad.at(j, i);
    });
}

namespace detail {
/// Splits a shape around `axis` into (outer, axis extent, inner).
inline void axis_split(const Shape& s, int axis, std::size_t& outer, int& extent, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
    extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= static_cast<std::size_t>(s[i]);
}
}  // namespace detail

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat of empty list");
    Shape s = xs[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw ShapeError("concat axis out of range");
    int total = 0;
    for (const auto& x : xs) {
        Shape t = x.shape();
        if (t.size() != s.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && t[i] != s[i])
                throw ShapeError("concat extent mismatch " + shape_str(s) + " vs " + shape_str(t));
        total += t[axis];
    }
    s[axis] = total;
    Tensor out(s);
    std::size_t outer, inner;
    int ext;
    detail::axis_split(s, axis, outer, ext, inner);
    std::vector<int> offsets;
    int off = 0;
    for (const auto& x : xs) {
        offsets.push_back(off);
        const int e = x.dim(axis);
        const std::size_t chunk = static_cast<std::size_t>(e) * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(x.value().ptr() + o * chunk, chunk, out.ptr() + (o * total + off) * inner);
        off += e;
    }
    return make_op(std::move(out), xs, [offsets, outer, inner, total, axis](Node& o) {
        for (std::size_t k = 0; k < o.parents.size(); ++k) {
            Tensor* g = detail::grad_of(o, k);
            if (!g) continue;
            const int e = o.parents[k]->value.dim(axis);
            const std::size_t chunk = static_cast<std::size_t>(e) * inner;
            for (std::size_t q = 0; q < outer; ++q) {
                const double* src = o.grad.ptr() + (q * total + offsets[k]) * inner;
                double* dst = g->ptr() + q * chunk;
                for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
        }
    });
}

/// Contiguous range [start, start+len) along `axis`.
inline Var slice(const Var& a, int axis, int start, int len) {
    Shape s = a.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()) || start < 0 || len < 0 || start + len > s[axis])
        throw ShapeError("slice out of range on " + shape_str(s));
    std::size_t outer, inner;
    int ext;
    detail::axis_split(s, axis, outer, ext, inner);
    s[axis] = len;
    Tensor out(s);
    const std::size_t chunk = static_cast<std::size_t>(len) * inner;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.value().ptr() + (o * ext + start) * inner, chunk, out.ptr() + o * chunk);
    return make_op(std::move(out), {a}, [outer, inner, ext, start, chunk](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (std::size_t q = 0; q < outer; ++q) {
                double* dst = g->ptr() + (q * ext + start) * inner;
                const double* src = o.grad.ptr() + q * chunk;
                for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
    });
}

/// Index `i` along the leading axis, dropping that axis.
inline Var select(const Var& a, int i) {
    Shape rest(a.shape().begin() + 1, a.shape().end());
    if (rest.empty()) rest = {1};
    return reshape(slice(a, 0, i, 1), rest);
}

/// Stacks same-shaped Vars along a new leading axis.
inline Var stack(const std::vector<Var>& xs) {
    std::vector<Var> expanded;
    expanded.reserve(xs.size());
    for (const auto& x : xs) {
        Shape s = x.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(x, s));
    }
    return concat(expanded, 0);
}

// ---------------------------------------------------------------- linear algebra

/// [M,K] x [K,N] -> [M,N].
inline Var matmul(const Var& a, const Var& b) {
    if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor out({M, N});
    MapMat(out.ptr(), M, N).noalias() = CMapMat(a.value().ptr(), M, K) * CMapMat(b.value().ptr(), K, N);
    return make_op(std::move(out), {a, b}, [M, K, N](Node& o) {
        CMapMat go(o.grad.ptr(), M, N);
        if (Tensor* g = detail::grad_of(o, 0))
            MapMat(g->ptr(), M, K).noalias() += go * CMapMat(o.parents[1]->value.ptr(), K, N).transpose();
        if (Tensor* g = detail::grad_of(o, 1))
            MapMat(g->ptr(), K, N).noalias() += CMapMat(o.parents[0]->value.ptr(), M, K).transpose() * go;
    });
}

/// Affine map on rows: x [B,in], weight [out,in], bias [out] -> [B,out].
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
    if (x.value().rank() != 2 || weight.value().rank() != 2 || x.dim(1) != weight.dim(1) ||
        bias.value().size() != static_cast<std::size_t>(weight.dim(0)))
        throw ShapeError("linear dimension mismatch x=" + shape_str(x.shape()) + " w=" + shape_str(weight.shape()));
    const int B = x.dim(0), I = x.dim(1), O = weight.dim(0);
    Tensor out({B, O});
    MapMat y(out.ptr(), B, O);
    y.noalias() = CMapMat(x.value().ptr(), B, I) * CMapMat(weight.value().ptr(), O, I).transpose();
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().ptr(), O);
    return make_op(std::move(out), {x, weight, bias}, [B, I, O](Node& o) {
        CMapMat go(o.grad.ptr(), B, O);
        if (Tensor* g = detail::grad_of(o, 0))
            MapMat(g->ptr(), B, I).noalias() += go * CMapMat(o.parents[1]->value.ptr(), O, I);
        if (Tensor* g = detail::grad_of(o, 1))
            MapMat(g->ptr(), O, I).noalias() += go.transpose() * CMapMat(o.parents[0]->value.ptr(), B, I);
        // Plain loops: Eigen's vectorized reductions peel by alignment, so their
        // rounding would depend on where the buffers happen to live.
        if (Tensor* g = detail::grad_of(o, 2))
            for (int b = 0; b < B; ++b)
                for (int k = 0; k < O; ++k) (*g)[k] += go(b, k);
    });
}

// ---------------------------------------------------------------- convolution

struct ConvGeometry {
    int channels, height, width, kernel, stride, pad, out_h, out_w;
    static ConvGeometry make(int c, int h, int w, int k, int s, int p) {
        const int oh = (h + 2 * p - k) / s + 1;
        const int ow = (w + 2 * p - k) / s + 1;
        if (oh <= 0 || ow <= 0) throw ShapeError("convolution output would be empty");
        return {c, h, w, k, s, p, oh, ow};
    }
    int col_rows() const { return channels * kernel * kernel; }
    int col_cols() const { return out_h * out_w; }
};

namespace detail {
inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
    const int hw = g.col_cols();
    for (int c = 0; c < g.channels; ++c)
        for (int ki = 0; ki < g.kernel; ++ki)
            for (int kj = 0; kj < g.kernel; ++kj) {
                double* row = cols + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * hw;
                const double* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int y = oy * g.stride - g.pad + ki;
                    double* dst = row + oy * g.out_w;
                    if (y < 0 || y >= g.height) {
                        std::fill_n(dst, g.out_w, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(y) * g.width;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int x = ox * g.stride - g.pad + kj;
                        dst[ox] = (x >= 0 && x < g.width) ? src[x] : 0.0;
                    }
                }
            }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
    const int hw = g.col_cols();
    for (int c = 0; c < g.channels; ++c)
        for (int ki = 0; ki < g.kernel; ++ki)
            for (int kj = 0; kj < g.kernel; ++kj) {
                const double* row = cols + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * hw;
                double* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int y = oy * g.stride - g.pad + ki;
                    if (y < 0 || y >= g.height) continue;
                    double* dst = plane + static_cast<std::size_t>(y) * g.width;
                    const double* src = row + oy * g.out_w;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int x = ox * g.stride - g.pad + kj;
                        if (x >= 0 && x < g.width) dst[x] += src[ox];
                    }
                }
            }
}
}  // namespace detail

/// 2D cross-correlation: x [B,C,H,W], weight [O,C,k,k], bias [O].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    if (x.value().rank() != 4 || weight.value().rank() != 4 || x.dim(1) != weight.dim(1) ||
        weight.dim(2) != weight.dim(3) || bias.value().size() != static_cast<std::size_t>(weight.dim(0)))
        throw ShapeError("conv2d shape mismatch x=" + shape_str(x.shape()) + " w=" + shape_str(weight.shape()));
    const int B = x.dim(0), O = weight.dim(0);
    const ConvGeometry g = ConvGeometry::make(x.dim(1), x.dim(2), x.dim(3), weight.dim(2), stride, pad);
    const int R = g.col_rows(), P = g.col_cols();
    Tensor out({B, O, g.out_h, g.out_w});
    std::vector<double> cols(static_cast<std::size_t>(R) * P);
    CMapMat w(weight.value().ptr(), O, R);
    Eigen::Map<const Eigen::VectorXd> b(bias.value().ptr(), O);
    const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;
    const std::size_t out_stride = static_cast<std::size_t>(O) * P;
    for (int n = 0; n < B; ++n) {
        detail::im2col(x.value().ptr() + n * in_stride, g, cols.data());
        MapMat y(out.ptr() + n * out_stride, O, P);
        y.noalias() = w * CMapMat(cols.data(), R, P);
        y.colwise() += b;
    }
    return make_op(std::move(out), {x, weight, bias}, [g, B, O, R, P, in_stride, out_stride](Node& o) {
        Tensor* gx = detail::grad_of(o, 0);
        Tensor* gw = detail::grad_of(o, 1);
        Tensor* gb = detail::grad_of(o, 2);
        const Tensor& xv = o.parents[0]->value;
        CMapMat w(o.parents[1]->value.ptr(), O, R);
        std::vector<double> cols(static_cast<std::size_t>(R) * P);
        for (int n = 0; n < B; ++n) {
            CMapMat go(o.grad.ptr() + n * out_stride, O, P);
            if (gw) {
                detail::im2col(xv.ptr() + n * in_stride, g, cols.data());
                MapMat(gw->ptr(), O, R).noalias() += go * CMapMat(cols.data(), R, P).transpose();
            }
            if (gb)
                for (int k = 0; k < O; ++k) {
                    double acc = 0;
                    for (int p = 0; p < P; ++p) acc += go(k, p);
                    (*gb)[k] += acc;
                }
            if (gx) {
                MapMat(cols.data(), R, P).noalias() = w.transpose() * go;
                detail::col2im_add(cols.data(), g, gx->ptr() + n * in_stride);
            }
        }
    });
}

/// Nearest-neighbour 2x spatial upsampling of [B,C,H,W].
inline Var upsample_nearest2x(const Var& x) {
    if (x.value().rank() != 4) throw ShapeError("upsample expects rank 4");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out({B, C, 2 * H, 2 * W});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx) out.at(n, c, y, xx) = x.value().at(n, c, y / 2, xx / 2);
    return make_op(std::move(out), {x}, [B, C, H, W](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < 2 * H; ++y)
                        for (int xx = 0; xx < 2 * W; ++xx) g->at(n, c, y / 2, xx / 2) += o.grad.at(n, c, y, xx);
    });
}

/// Non-overlapping k x k average pooling of [B,C,H,W]; H and W must be multiples of k.
inline Var avg_pool(const Var& x, int k) {
    if (x.value().rank() != 4 || x.dim(2) % k != 0 || x.dim(3) % k != 0)
        throw ShapeError("avg_pool: extent not divisible by " + std::to_string(k) + " in " + shape_str(x.shape()));
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2) / k, W = x.dim(3) / k;
    const double inv = 1.0 / (k * k);
    Tensor out({B, C, H, W});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H * k; ++y)
                for (int xx = 0; xx < W * k; ++xx) out.at(n, c, y / k, xx / k) += inv * x.value().at(n, c, y, xx);
    return make_op(std::move(out), {x}, [B, C, H, W, k, inv](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < H * k; ++y)
                        for (int xx = 0; xx < W * k; ++xx) g->at(n, c, y, xx) += inv * o.grad.at(n, c, y / k, xx / k);
    });
}

/// [B,C] -> [B,C,H,W] by spatial replication.
inline Var broadcast_spatial(const Var& x, int H, int W) {
    if (x.value().rank() != 2) throw ShapeError("broadcast_spatial expects [B,C]");
    const int B = x.dim(0), C = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor out({B, C, H, W});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) std::fill_n(out.ptr() + (static_cast<std::size_t>(n) * C + c) * hw, hw, x.value().at(n, c));
    return make_op(std::move(out), {x}, [B, C, hw](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* src = o.grad.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                    double s = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) s += src[i];
                    g->at(n, c) += s;
                }
    });
}

/// [B,C,H,W] -> [B,C] spatial mean.
inline Var mean_spatial(const Var& x) {
    if (x.value().rank() != 4) throw ShapeError("mean_spatial expects rank 4");
    const int B = x.dim(0), C = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor out({B, C});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = x.value().ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += src[i];
            out.at(n, c) = s / static_cast<double>(hw);
        }
    return make_op(std::move(out), {x}, [B, C, hw](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c) {
                    double* dst = g->ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                    const double v = o.grad.at(n, c) / static_cast<double>(hw);
                    for (std::size_t i = 0; i < hw; ++i) dst[i] += v;
                }
    });
}

/// Rows of table [V,d] gathered by id -> [n,d].
inline Var embedding(const Var& table, std::span<const int> ids) {
    const int V = table.dim(0), d = table.dim(1);
    const int n = static_cast<int>(ids.size());
    Tensor out({n, d});
    for (int i = 0; i < n; ++i) {
        if (ids[i] < 0 || ids[i] >= V) throw ShapeError("embedding id out of range");
        std::copy_n(table.value().ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + static_cast<std::size_t>(i) * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return make_op(std::move(out), {table}, [idv, d](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < idv.size(); ++i)
                for (int k = 0; k < d; ++k) (*g)[static_cast<std::size_t>(idv[i]) * d + k] += o.grad[i * d + k];
    });
}

// ---------------------------------------------------------------- softmax family

/// Softmax of a rank-2 tensor along `axis` (0: each column normalised over rows;
/// 1: each row over columns). Only the first `n_valid` entries along the axis take
/// part; the rest receive weight exactly 0. n_valid < 0 means all.
inline Var softmax(const Var& x, int axis, int n_valid = -1) {
    if (x.value().rank() != 2 || (axis != 0 && axis != 1)) throw ShapeError("softmax expects rank 2 and axis 0/1");
    const int R = x.dim(0), C = x.dim(1);
    const int extent = axis == 0 ? R : C;
    const int groups = axis == 0 ? C : R;
    const int nv = n_valid < 0 ? extent : n_valid;
    if (nv < 1 || nv > extent) throw ShapeError("softmax: invalid valid-count " + std::to_string(nv));
    auto idx = [axis, C](int group, int k) { return axis == 0 ? static_cast<std::size_t>(k) * C + group : static_cast<std::size_t>(group) * C + k; };
    Tensor out({R, C});
    const Tensor& xv = x.value();
    for (int gi = 0; gi < groups; ++gi) {
        double m = xv[idx(gi, 0)];
        for (int k = 1; k < nv; ++k) m = std::max(m, xv[idx(gi, k)]);
        double s = 0.0;
        for (int k = 0; k < nv; ++k) s += (out[idx(gi, k)] = std::exp(xv[idx(gi, k)] - m));
        for (int k = 0; k < nv; ++k) out[idx(gi, k)] /= s;
    }
    return make_op(std::move(out), {x}, [groups, nv, idx](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (int gi = 0; gi < groups; ++gi) {
                double dot = 0.0;
                for (int k = 0; k < nv; ++k) dot += o.value[idx(gi, k)] * o.grad[idx(gi, k)];
                for (int k = 0; k < nv; ++k) (*g)[idx(gi, k)] += o.value[idx(gi, k)] * (o.grad[idx(gi, k)] - dot);
            }
    });
}

/// Log-softmax of a rank-2 tensor along `axis`, all entries participating.
inline Var log_softmax(const Var& x, int axis) {
    if (x.value().rank() != 2 || (axis != 0 && axis != 1)) throw ShapeError("log_softmax expects rank 2 and axis 0/1");
    const int R = x.dim(0), C = x.dim(1);
    const int extent = axis == 0 ? R : C;
    const int groups = axis == 0 ? C : R;
    auto idx = [axis, C](int group, int k) { return axis == 0 ? static_cast<std::size_t>(k) * C + group : static_cast<std::size_t>(group) * C + k; };
    Tensor out({R, C});
    const Tensor& xv = x.value();
    for (int gi = 0; gi < groups; ++gi) {
        double m = xv[idx(gi, 0)];
        for (int k = 1; k < extent; ++k) m = std::max(m, xv[idx(gi, k)]);
        double s = 0.0;
        for (int k = 0; k < extent; ++k) s += std::exp(xv[idx(gi, k)] - m);
        const double lse = m + std::log(s);
        for (int k = 0; k < extent; ++k) out[idx(gi, k)] = xv[idx(gi, k)] - lse;
    }
    return make_op(std::move(out), {x}, [groups, extent, idx](Node& o) {
        if (Tensor* g = detail::grad_of(o, 0))
            for (int gi = 0; gi < groups; ++gi) {
                double s = 0.0;
                for (int k = 0; k < extent; ++k) s += o.grad[idx(gi, k)];
                for (int k = 0; k < extent; ++k) (*g)[idx(gi, k)] += o.grad[idx(gi, k)] - std::exp(o.value[idx(gi, k)]) * s;
            }
    });
}

/// Cosine similarity between matching columns of a and b ([L,N] each) for the
/// first n columns -> [n]. A zero-norm column yields similarity 0 and no gradient.
inline Var cosine_columns(const Var& a, const Var& b, int n) {
    require_same_shape(a.value(), b.value(), "cosine_columns");
    if (a.value().rank() != 2 || n < 0 || n > a.dim(1)) throw ShapeError("cosine_columns: bad column count");
    const int L = a.dim(0), N = a.dim(1);
    Tensor out({n});
    std::vector<double> na(n), nb(n);
    for (int j = 0; j < n; ++j) {
        double dot = 0, sa = 0, sb = 0;
        for (int i = 0; i < L; ++i) {
            const double x = a.value()[static_cast<std::size_t>(i) * N + j], y = b.value()[static_cast<std::size_t>(i) * N + j];
            dot += x * y;
            sa += x * x;
            sb += y * y;
        }
        na[j] = std::sqrt(sa);
        nb[j] = std::sqrt(sb);
        out[j] = (na[j] > 0 && nb[j] > 0) ? dot / (na[j] * nb[j]) : 0.0;
    }
    return make_op(std::move(out), {a, b}, [L, N, n, na, nb](Node& o) {
        Tensor* ga = detail::grad_of(o, 0);
        Tensor* gb = detail::grad_of(o, 1);
        const Tensor& av = o.parents[0]->value;
        const Tensor& bv = o.parents[1]->value;
        for (int j = 0; j < n; ++j) {
            if (!(na[j] > 0 && nb[j] > 0)) continue;
            const double r = o.value[j], go = o.grad[j];
            for (int i = 0; i < L; ++i) {
                const std::size_t k = static_cast<std::size_t>(i) * N + j;
                if (ga) (*ga)[k] += go * (bv[k] / (na[j] * nb[j]) - r * av[k] / (na[j] * na[j]));
                if (gb) (*gb)[k] += go * (av[k] / (na[j] * nb[j]) - r * bv[k] / (nb[j] * nb[j]));
            }
        }
    });
}

}  // namespace tgps::ag
