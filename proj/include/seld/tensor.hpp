// Dense N-dimensional tensor with reverse-mode automatic differentiation over
// a dynamically recorded op graph. Scalar type is a template parameter:
// float for training, double for finite-difference verification. Only the
// operations the model needs are provided; each op records a closure that
// accumulates gradients into its parents.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "seld/rng.hpp"

namespace seld {

using Shape = std::vector<std::int64_t>;

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace debug {
// Selftest negative control: when nonzero, the linear() backward scales its
// weight gradient by (1 + value), which the gradient spot-check must catch.
inline std::atomic<double> gradient_fault{0.0};
}  // namespace debug

namespace detail {

// Thread-local switch: when false, ops do not record the graph.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
class TensorT {
public:
    using Scalar = T;

    TensorT() = default;

    static TensorT zeros(Shape shape) { return filled(std::move(shape), T(0)); }
    static TensorT ones(Shape shape) { return filled(std::move(shape), T(1)); }

    static TensorT filled(Shape shape, T value) {
        TensorT t;
        t.n_ = std::make_shared<detail::Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->data.assign(static_cast<std::size_t>(shape_numel(t.n_->shape)), value);
        return t;
    }

    static TensorT from(Shape shape, std::vector<T> data) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("from: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        TensorT t;
        t.n_ = std::make_shared<detail::Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        return t;
    }

    static TensorT scalar(T value) { return from({1}, {value}); }

    static TensorT rand_uniform(Shape shape, CounterRng& rng, T lo, T hi) {
        TensorT t = zeros(std::move(shape));
        for (auto& v : t.n_->data) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    static TensorT rand_normal(Shape shape, CounterRng& rng, T mean = T(0), T stddev = T(1)) {
        TensorT t = zeros(std::move(shape));
        for (auto& v : t.n_->data) v = static_cast<T>(mean + stddev * rng.normal());
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::int64_t ndim() const { return static_cast<std::int64_t>(n_->shape.size()); }
    std::int64_t dim(std::int64_t i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return n_->numel(); }

    T* data() { return n_->data.data(); }
    const T* data() const { return n_->data.data(); }
    std::vector<T>& vec() { return n_->data; }
    const std::vector<T>& vec() const { return n_->data; }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
        return n_->data[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        n_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<T>& grad() const { return n_->grad; }
    std::vector<T>& grad_mut() { return n_->ensure_grad(); }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
    }

    // Reverse-mode sweep from a scalar root. Gradients accumulate (+=) into
    // leaves, so repeated sweeps over different roots sum as expected;
    // interior-node grads are scratch and reset at the start of each sweep,
    // which makes a second sweep after zeroing leaf grads bit-identical.
    void backward() const {
        if (numel() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(shape()));
        std::vector<detail::Node<T>*> order;
        topo_sort(order);
        for (detail::Node<T>* node : order)
            if (!node->parents.empty() && !node->grad.empty())
                std::fill(node->grad.begin(), node->grad.end(), T(0));
        n_->ensure_grad()[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node<T>* node = *it;
            if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
        }
    }

    TensorT detach() const {
        TensorT t;
        t.n_ = std::make_shared<detail::Node<T>>();
        t.n_->shape = n_->shape;
        t.n_->data = n_->data;
        return t;
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(n_->data.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(n_->data[i]);
        return TensorT<U>::from(n_->shape, std::move(out));
    }

    std::shared_ptr<detail::Node<T>> node() const { return n_; }

    static TensorT wrap(std::shared_ptr<detail::Node<T>> n) {
        TensorT t;
        t.n_ = std::move(n);
        return t;
    }

private:
    void topo_sort(std::vector<detail::Node<T>*>& order) const {
        std::unordered_set<detail::Node<T>*> visited;
        // Iterative post-order DFS; parent order is deterministic.
        struct Frame {
            detail::Node<T>* node;
            std::size_t next_child;
        };
        std::vector<Frame> stack;
        if (visited.insert(n_.get()).second) stack.push_back({n_.get(), 0});
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_child < f.node->parents.size()) {
                detail::Node<T>* child = f.node->parents[f.next_child++].get();
                if (child->requires_grad && visited.insert(child).second)
                    stack.push_back({child, 0});
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<detail::Node<T>> n_;
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

// ---------------------------------------------------------------------------
// op construction helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
TensorT<T> make_op(Shape shape, std::vector<T> data, std::vector<TensorT<T>> parents,
                   std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool track = grad_mode();
    if (track) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        track = any;
    }
    if (track) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward);
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
void accumulate(Node<T>& dst, const std::vector<T>& g) {
    auto& acc = dst.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
}

inline Shape drop_axis(const Shape& s, std::int64_t axis) {
    Shape out;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.size()); ++i)
        if (i != axis) out.push_back(s[static_cast<std::size_t>(i)]);
    if (out.empty()) out.push_back(1);
    return out;
}

// (outer, extent, inner) factorization of an axis for strided iteration.
inline void axis_spans(const Shape& s, std::int64_t axis, std::int64_t& outer,
                       std::int64_t& extent, std::int64_t& inner) {
    outer = 1;
    inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    extent = s[static_cast<std::size_t>(axis)];
    for (std::int64_t i = axis + 1; i < static_cast<std::int64_t>(s.size()); ++i)
        inner *= s[static_cast<std::size_t>(i)];
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.vec());
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
        for (auto& parent : self.parents)
            if (parent->requires_grad) detail::accumulate(*parent, self.grad);
    });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.vec());
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
        if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
            auto& acc = self.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc[i] -= self.grad[i];
        }
    });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.vec());
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
        const auto& da = self.parents[0]->data;
        const auto& db = self.parents[1]->data;
        if (self.parents[0]->requires_grad) {
            auto& acc = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc[i] += self.grad[i] * db[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& acc = self.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc[i] += self.grad[i] * da[i];
        }
    });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v *= c;
    return detail::make_op<T>(x.shape(), std::move(out), {x}, [c](detail::Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& acc = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) acc[i] += self.grad[i] * c;
    });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, T c) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v += c;
    return detail::make_op<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
    });
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return detail::make_op<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        const auto& xv = self.parents[0]->data;
        auto& acc = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (xv[i] > T(0)) acc[i] += self.grad[i];
    });
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    // exact erf form: 0.5 x (1 + erf(x / sqrt(2)))
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<T> out(x.vec());
    for (auto& v : out) {
        const double d = static_cast<double>(v);
        v = static_cast<T>(0.5 * d * (1.0 + std::erf(d * inv_sqrt2)));
    }
    return detail::make_op<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        const auto& xv = self.parents[0]->data;
        auto& acc = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double d = static_cast<double>(xv[i]);
            const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
            acc[i] += self.grad[i] * static_cast<T>(cdf + d * pdf);
        }
    });
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& x) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v = std::tanh(v);
    return detail::make_op<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& acc = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T y = self.data[i];
            acc[i] += self.grad[i] * (T(1) - y * y);
        }
    });
}

// Numerically stable softmax along `axis` (max subtraction).
template <typename T>
TensorT<T> softmax(const TensorT<T>& x, std::int64_t axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim())
        throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    std::int64_t outer, extent, inner;
    detail::axis_spans(x.shape(), axis, outer, extent, inner);
    std::vector<T> out(x.vec());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            T* base = out.data() + o * extent * inner + in;
            T mx = base[0];
            for (std::int64_t e = 1; e < extent; ++e) mx = std::max(mx, base[e * inner]);
            T sum = T(0);
            for (std::int64_t e = 0; e < extent; ++e) {
                T v = std::exp(base[e * inner] - mx);
                base[e * inner] = v;
                sum += v;
            }
            const T norm = T(1) / sum;
            for (std::int64_t e = 0; e < extent; ++e) base[e * inner] *= norm;
        }
    }
    return detail::make_op<T>(
        x.shape(), std::move(out), {x}, [outer, extent, inner](detail::Node<T>& self) {
            if (!self.parents[0]->requires_grad) return;
            auto& acc = self.parents[0]->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t off = o * extent * inner + in;
                    T dot = T(0);
                    for (std::int64_t e = 0; e < extent; ++e)
                        dot += self.grad[off + e * inner] * self.data[off + e * inner];
                    for (std::int64_t e = 0; e < extent; ++e) {
                        const std::int64_t i = off + e * inner;
                        acc[i] += self.data[i] * (self.grad[i] - dot);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape) {
    // one extent may be -1 (inferred)
    std::int64_t known = 1, infer = -1;
    for (std::size_t i = 0; i < new_shape.size(); ++i) {
        if (new_shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one -1 extent");
            infer = static_cast<std::int64_t>(i);
        } else {
            known *= new_shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || x.numel() % known != 0)
            throw ShapeError("reshape: cannot infer extent for " + shape_str(new_shape));
        new_shape[static_cast<std::size_t>(infer)] = x.numel() / known;
    }
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    std::vector<T> out(x.vec());
    return detail::make_op<T>(std::move(new_shape), std::move(out), {x}, [](detail::Node<T>& self) {
        if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
    });
}

namespace detail {
// dst[j] = src[perm_src_index(j)] for a permutation of axes; returns dst shape.
template <typename T>
void permute_raw(const T* src, const Shape& shape, const std::vector<std::int64_t>& axes,
                 T* dst, bool add_into) {
    const std::int64_t nd = static_cast<std::int64_t>(shape.size());
    Shape out_shape(nd);
    for (std::int64_t i = 0; i < nd; ++i) out_shape[i] = shape[axes[i]];
    std::vector<std::int64_t> src_strides(nd, 1);
    for (std::int64_t i = nd - 2; i >= 0; --i) src_strides[i] = src_strides[i + 1] * shape[i + 1];
    // stride of output axis i in the source layout
    std::vector<std::int64_t> gather(nd);
    for (std::int64_t i = 0; i < nd; ++i) gather[i] = src_strides[axes[i]];
    std::vector<std::int64_t> idx(nd, 0);
    const std::int64_t total = shape_numel(shape);
    std::int64_t src_off = 0;
    for (std::int64_t j = 0; j < total; ++j) {
        if (add_into)
            dst[j] += src[src_off];
        else
            dst[j] = src[src_off];
        for (std::int64_t ax = nd - 1; ax >= 0; --ax) {
            if (++idx[ax] < out_shape[ax]) {
                src_off += gather[ax];
                break;
            }
            idx[ax] = 0;
            src_off -= gather[ax] * (out_shape[ax] - 1);
        }
    }
}
}  // namespace detail

template <typename T>
TensorT<T> permute(const TensorT<T>& x, std::vector<std::int64_t> axes) {
    const std::int64_t nd = x.ndim();
    if (static_cast<std::int64_t>(axes.size()) != nd)
        throw ShapeError("permute: axes rank mismatch for " + shape_str(x.shape()));
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    for (auto a : axes) {
        if (a < 0 || a >= nd || seen[static_cast<std::size_t>(a)])
            throw ShapeError("permute: invalid axes for " + shape_str(x.shape()));
        seen[static_cast<std::size_t>(a)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(nd));
    for (std::int64_t i = 0; i < nd; ++i)
        out_shape[static_cast<std::size_t>(i)] = x.dim(axes[static_cast<std::size_t>(i)]);
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    detail::permute_raw(x.data(), x.shape(), axes, out.data(), false);
    std::vector<std::int64_t> inverse(static_cast<std::size_t>(nd));
    for (std::int64_t i = 0; i < nd; ++i) inverse[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = i;
    return detail::make_op<T>(
        std::move(out_shape), std::move(out), {x}, [inverse](detail::Node<T>& self) {
            if (!self.parents[0]->requires_grad) return;
            auto& acc = self.parents[0]->ensure_grad();
            detail::permute_raw(self.grad.data(), self.shape, inverse, acc.data(), true);
        });
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, std::int64_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const std::int64_t nd = xs[0].ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range");
    Shape out_shape = xs[0].shape();
    std::int64_t total_extent = 0;
    for (const auto& x : xs) {
        if (x.ndim() != nd) throw ShapeError("concat: rank mismatch");
        for (std::int64_t i = 0; i < nd; ++i)
            if (i != axis && x.dim(i) != out_shape[static_cast<std::size_t>(i)])
                throw ShapeError("concat: extent mismatch on axis " + std::to_string(i));
        total_extent += x.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total_extent;
    std::int64_t outer, extent_out, inner;
    detail::axis_spans(out_shape, axis, outer, extent_out, inner);
    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::int64_t> extents;
    std::int64_t pos = 0;
    for (const auto& x : xs) {
        const std::int64_t e = x.dim(axis);
        extents.push_back(e);
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * extent_out + pos) * inner,
                        x.data() + o * e * inner, static_cast<std::size_t>(e * inner) * sizeof(T));
        pos += e;
    }
    std::vector<TensorT<T>> parents = xs;
    return detail::make_op<T>(
        std::move(out_shape), std::move(out), std::move(parents),
        [outer, extent_out, inner, extents](detail::Node<T>& self) {
            std::int64_t pos = 0;
            for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                const std::int64_t e = extents[pi];
                if (self.parents[pi]->requires_grad) {
                    auto& acc = self.parents[pi]->ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* g = self.grad.data() + (o * extent_out + pos) * inner;
                        T* a = acc.data() + o * e * inner;
                        for (std::int64_t i = 0; i < e * inner; ++i) a[i] += g[i];
                    }
                }
                pos += e;
            }
        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
    T s = T(0);
    for (auto v : x.vec()) s += v;
    return detail::make_op<T>({1}, {s}, {x}, [](detail::Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& acc = self.parents[0]->ensure_grad();
        const T g = self.grad[0];
        for (auto& v : acc) v += g;
    });
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    T s = T(0);
    for (auto v : x.vec()) s += v;
    s *= inv;
    return detail::make_op<T>({1}, {s}, {x}, [inv](detail::Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& acc = self.parents[0]->ensure_grad();
        const T g = self.grad[0] * inv;
        for (auto& v : acc) v += g;
    });
}

template <typename T>
TensorT<T> sum_axis(const TensorT<T>& x, std::int64_t axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("sum_axis: axis out of range");
    std::int64_t outer, extent, inner;
    detail::axis_spans(x.shape(), axis, outer, extent, inner);
    Shape out_shape = detail::drop_axis(x.shape(), axis);
    std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
    const T* px = x.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t e = 0; e < extent; ++e)
            for (std::int64_t in = 0; in < inner; ++in)
                out[o * inner + in] += px[(o * extent + e) * inner + in];
    return detail::make_op<T>(
        std::move(out_shape), std::move(out), {x}, [outer, extent, inner](detail::Node<T>& self) {
            if (!self.parents[0]->requires_grad) return;
            auto& acc = self.parents[0]->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t e = 0; e < extent; ++e)
                    for (std::int64_t in = 0; in < inner; ++in)
                        acc[(o * extent + e) * inner + in] += self.grad[o * inner + in];
        });
}

template <typename T>
TensorT<T> mean_axis(const TensorT<T>& x, std::int64_t axis) {
    if (axis < 0) axis += x.ndim();
    TensorT<T> s = sum_axis(x, axis);
    return scale(s, T(1) / static_cast<T>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// x: (..., Din), weight: (Dout, Din), bias: (Dout) or undefined.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias) {
    if (x.ndim() < 1 || weight.ndim() != 2)
        throw ShapeError("linear: bad ranks " + shape_str(x.shape()) + ", " + shape_str(weight.shape()));
    const std::int64_t din = x.dim(x.ndim() - 1);
    const std::int64_t dout = weight.dim(0);
    if (weight.dim(1) != din)
        throw ShapeError("linear: input feature extent " + std::to_string(din) +
                         " does not match weight " + shape_str(weight.shape()));
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != dout))
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " vs Dout " +
                         std::to_string(dout));
    const std::int64_t rows = x.numel() / din;
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    std::vector<T> out(static_cast<std::size_t>(rows * dout));
    {
        detail::ECMap<T> X(x.data(), rows, din);
        detail::ECMap<T> W(weight.data(), dout, din);
        detail::EMap<T> O(out.data(), rows, dout);
        O.noalias() = X * W.transpose();
        if (has_bias) {
            const T* pb = bias.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                T* row = out.data() + r * dout;
                for (std::int64_t o = 0; o < dout; ++o) row[o] += pb[o];
            }
        }
    }
    std::vector<TensorT<T>> parents = {x, weight};
    if (has_bias) parents.push_back(bias);
    return detail::make_op<T>(
        std::move(out_shape), std::move(out), std::move(parents),
        [rows, din, dout, has_bias](detail::Node<T>& self) {
            detail::ECMap<T> G(self.grad.data(), rows, dout);
            auto& xp = *self.parents[0];
            auto& wp = *self.parents[1];
            if (xp.requires_grad) {
                detail::ECMap<T> W(wp.data.data(), dout, din);
                detail::EMap<T> DX(xp.ensure_grad().data(), rows, din);
                DX.noalias() += G * W;
            }
            if (wp.requires_grad) {
                detail::ECMap<T> X(xp.data.data(), rows, din);
                detail::EMap<T> DW(wp.ensure_grad().data(), dout, din);
                const double fault = debug::gradient_fault.load();
                if (fault != 0.0)
                    DW.noalias() += static_cast<T>(1.0 + fault) * (G.transpose() * X);
                else
                    DW.noalias() += G.transpose() * X;
            }
            if (has_bias && self.parents[2]->requires_grad) {
                // fixed-order accumulation; Eigen's redux is alignment-peeled
                // and would break bitwise run-to-run determinism
                auto& acc = self.parents[2]->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* g = self.grad.data() + r * dout;
                    for (std::int64_t o = 0; o < dout; ++o) acc[static_cast<std::size_t>(o)] += g[o];
                }
            }
        });
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& weight) {
    return linear(x, weight, TensorT<T>());
}

// batched matmul: a (N, R, K) x b (N, K, C) -> (N, R, C)
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t n = a.dim(0), r = a.dim(1), k = a.dim(2), c = b.dim(2);
    std::vector<T> out(static_cast<std::size_t>(n * r * c));
    for (std::int64_t i = 0; i < n; ++i) {
        detail::ECMap<T> A(a.data() + i * r * k, r, k);
        detail::ECMap<T> B(b.data() + i * k * c, k, c);
        detail::EMap<T> O(out.data() + i * r * c, r, c);
        O.noalias() = A * B;
    }
    return detail::make_op<T>(
        {n, r, c}, std::move(out), {a, b}, [n, r, k, c](detail::Node<T>& self) {
            auto& ap = *self.parents[0];
            auto& bp = *self.parents[1];
            for (std::int64_t i = 0; i < n; ++i) {
                detail::ECMap<T> G(self.grad.data() + i * r * c, r, c);
                if (ap.requires_grad) {
                    detail::ECMap<T> B(bp.data.data() + i * k * c, k, c);
                    detail::EMap<T> DA(ap.ensure_grad().data() + i * r * k, r, k);
                    DA.noalias() += G * B.transpose();
                }
                if (bp.requires_grad) {
                    detail::ECMap<T> A(ap.data.data() + i * r * k, r, k);
                    detail::EMap<T> DB(bp.ensure_grad().data() + i * k * c, k, c);
                    DB.noalias() += A.transpose() * G;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace detail {

// col is (Cin*kh*kw) x (OH*OW) for one sample.
template <typename T>
void im2col(const T* x, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, T* col) {
    for (std::int64_t c = 0; c < cin; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                T* row = col + ((c * kh + ki) * kw + kj) * oh * ow;
                for (std::int64_t oi = 0; oi < oh; ++oi) {
                    const std::int64_t ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= h) {
                        std::fill(row + oi * ow, row + (oi + 1) * ow, T(0));
                        continue;
                    }
                    const T* src = x + (c * h + ii) * w;
                    for (std::int64_t oj = 0; oj < ow; ++oj) {
                        const std::int64_t jj = oj * stride - pad + kj;
                        row[oi * ow + oj] = (jj >= 0 && jj < w) ? src[jj] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
                std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
                std::int64_t ow, T* dx) {
    for (std::int64_t c = 0; c < cin; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const T* row = col + ((c * kh + ki) * kw + kj) * oh * ow;
                for (std::int64_t oi = 0; oi < oh; ++oi) {
                    const std::int64_t ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= h) continue;
                    T* dst = dx + (c * h + ii) * w;
                    for (std::int64_t oj = 0; oj < ow; ++oj) {
                        const std::int64_t jj = oj * stride - pad + kj;
                        if (jj >= 0 && jj < w) dst[jj] += row[oi * ow + oj];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: (B, Cin, H, W), weight: (Cout, Cin, kh, kw), bias: (Cout) or undefined.
// Cross-correlation; H' = (H + 2p - kh) / s + 1.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                  std::int64_t stride = 1, std::int64_t padding = 0) {
    if (x.ndim() != 4) throw ShapeError("conv2d: input must be 4-d, got " + shape_str(x.shape()));
    if (weight.ndim() != 4)
        throw ShapeError("conv2d: weight must be 4-d, got " + shape_str(weight.shape()));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const std::int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != cin)
        throw ShapeError("conv2d: weight Cin " + std::to_string(weight.dim(1)) +
                         " does not match input channel extent " + std::to_string(cin));
    if (h + 2 * padding < kh || w + 2 * padding < kw)
        throw ShapeError("conv2d: kernel (" + std::to_string(kh) + "," + std::to_string(kw) +
                         ") does not fit padded input " + shape_str(x.shape()));
    const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != cout))
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
    const std::int64_t ck = cin * kh * kw;
    std::vector<T> out(static_cast<std::size_t>(b * cout * oh * ow));
    {
        std::vector<T> col(static_cast<std::size_t>(ck * oh * ow));
        detail::ECMap<T> W(weight.data(), cout, ck);
        for (std::int64_t i = 0; i < b; ++i) {
            detail::im2col(x.data() + i * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow,
                           col.data());
            detail::ECMap<T> C(col.data(), ck, oh * ow);
            detail::EMap<T> O(out.data() + i * cout * oh * ow, cout, oh * ow);
            O.noalias() = W * C;
            if (has_bias) {
                for (std::int64_t co = 0; co < cout; ++co) {
                    T* row = out.data() + (i * cout + co) * oh * ow;
                    const T bv = bias.data()[co];
                    for (std::int64_t j = 0; j < oh * ow; ++j) row[j] += bv;
                }
            }
        }
    }
    std::vector<TensorT<T>> parents = {x, weight};
    if (has_bias) parents.push_back(bias);
    return detail::make_op<T>(
        {b, cout, oh, ow}, std::move(out), std::move(parents),
        [b, cin, h, w, cout, kh, kw, stride, padding, oh, ow, ck, has_bias](detail::Node<T>& self) {
            auto& xp = *self.parents[0];
            auto& wp = *self.parents[1];
            std::vector<T> col(static_cast<std::size_t>(ck * oh * ow));
            std::vector<T> dcol;
            detail::ECMap<T> W(wp.data.data(), cout, ck);
            for (std::int64_t i = 0; i < b; ++i) {
                detail::ECMap<T> G(self.grad.data() + i * cout * oh * ow, cout, oh * ow);
                if (wp.requires_grad || xp.requires_grad)
                    detail::im2col(xp.data.data() + i * cin * h * w, cin, h, w, kh, kw, stride,
                                   padding, oh, ow, col.data());
                if (wp.requires_grad) {
                    detail::ECMap<T> C(col.data(), ck, oh * ow);
                    detail::EMap<T> DW(wp.ensure_grad().data(), cout, ck);
                    DW.noalias() += G * C.transpose();
                }
                if (xp.requires_grad) {
                    dcol.assign(static_cast<std::size_t>(ck * oh * ow), T(0));
                    detail::EMap<T> DC(dcol.data(), ck, oh * ow);
                    DC.noalias() = W.transpose() * G;
                    detail::col2im_add(dcol.data(), cin, h, w, kh, kw, stride, padding, oh, ow,
                                       xp.ensure_grad().data() + i * cin * h * w);
                }
                if (has_bias && self.parents[2]->requires_grad) {
                    auto& acc = self.parents[2]->ensure_grad();
                    for (std::int64_t co = 0; co < cout; ++co) {
                        T s = T(0);
                        const T* g = self.grad.data() + (i * cout + co) * oh * ow;
                        for (std::int64_t j = 0; j < oh * ow; ++j) s += g[j];
                        acc[static_cast<std::size_t>(co)] += s;
                    }
                }
            }
        });
}

// x: (B, C, H, W), weight: (C, 1, kh, kw), bias: (C) or undefined; groups = C.
template <typename T>
TensorT<T> depthwise_conv2d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                            std::int64_t stride = 1, std::int64_t padding = 0) {
    if (x.ndim() != 4 || weight.ndim() != 4)
        throw ShapeError("depthwise_conv2d: inputs must be 4-d");
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(0) != c || weight.dim(1) != 1)
        throw ShapeError("depthwise_conv2d: weight " + shape_str(weight.shape()) +
                         " does not match channel extent " + std::to_string(c));
    if (h + 2 * padding < kh || w + 2 * padding < kw)
        throw ShapeError("depthwise_conv2d: kernel does not fit padded input");
    const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != c))
        throw ShapeError("depthwise_conv2d: bias shape " + shape_str(bias.shape()));
    std::vector<T> out(static_cast<std::size_t>(b * c * oh * ow), T(0));
    const T* px = x.data();
    const T* pw = weight.data();
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* xs = px + (i * c + ch) * h * w;
            const T* ws = pw + ch * kh * kw;
            T* os = out.data() + (i * c + ch) * oh * ow;
            const T bv = has_bias ? bias.data()[ch] : T(0);
            for (std::int64_t oi = 0; oi < oh; ++oi) {
                for (std::int64_t oj = 0; oj < ow; ++oj) {
                    T s = bv;
                    for (std::int64_t ki = 0; ki < kh; ++ki) {
                        const std::int64_t ii = oi * stride - padding + ki;
                        if (ii < 0 || ii >= h) continue;
                        for (std::int64_t kj = 0; kj < kw; ++kj) {
                            const std::int64_t jj = oj * stride - padding + kj;
                            if (jj < 0 || jj >= w) continue;
                            s += xs[ii * w + jj] * ws[ki * kw + kj];
                        }
                    }
                    os[oi * ow + oj] = s;
                }
            }
        }
    }
    std::vector<TensorT<T>> parents = {x, weight};
    if (has_bias) parents.push_back(bias);
    return detail::make_op<T>(
        {b, c, oh, ow}, std::move(out), std::move(parents),
        [b, c, h, w, kh, kw, stride, padding, oh, ow, has_bias](detail::Node<T>& self) {
            auto& xp = *self.parents[0];
            auto& wp = *self.parents[1];
            for (std::int64_t i = 0; i < b; ++i) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const T* g = self.grad.data() + (i * c + ch) * oh * ow;
                    const T* xs = xp.data.data() + (i * c + ch) * h * w;
                    const T* ws = wp.data.data() + ch * kh * kw;
                    T* dx = xp.requires_grad ? xp.ensure_grad().data() + (i * c + ch) * h * w : nullptr;
                    T* dw = wp.requires_grad ? wp.ensure_grad().data() + ch * kh * kw : nullptr;
                    for (std::int64_t oi = 0; oi < oh; ++oi) {
                        for (std::int64_t oj = 0; oj < ow; ++oj) {
                            const T gv = g[oi * ow + oj];
                            for (std::int64_t ki = 0; ki < kh; ++ki) {
                                const std::int64_t ii = oi * stride - padding + ki;
                                if (ii < 0 || ii >= h) continue;
                                for (std::int64_t kj = 0; kj < kw; ++kj) {
                                    const std::int64_t jj = oj * stride - padding + kj;
                                    if (jj < 0 || jj >= w) continue;
                                    if (dx) dx[ii * w + jj] += gv * ws[ki * kw + kj];
                                    if (dw) dw[ki * kw + kj] += gv * xs[ii * w + jj];
                                }
                            }
                        }
                    }
                    if (has_bias && self.parents[2]->requires_grad) {
                        T s = T(0);
                        for (std::int64_t j = 0; j < oh * ow; ++j) s += g[j];
                        self.parents[2]->ensure_grad()[static_cast<std::size_t>(ch)] += s;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

// Non-overlapping pooling: stride equals kernel, extents must divide exactly.
template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& x, std::int64_t kh, std::int64_t kw) {
    if (x.ndim() != 4) throw ShapeError("max_pool2d: input must be 4-d");
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (kh < 1 || kw < 1) throw ShapeError("max_pool2d: kernel must be positive");
    if (h % kh != 0)
        throw ShapeError("max_pool2d: H extent " + std::to_string(h) + " not divisible by kernel " +
                         std::to_string(kh));
    if (w % kw != 0)
        throw ShapeError("max_pool2d: W extent " + std::to_string(w) + " not divisible by kernel " +
                         std::to_string(kw));
    const std::int64_t oh = h / kh, ow = w / kw;
    std::vector<T> out(static_cast<std::size_t>(b * c * oh * ow));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
    const T* px = x.data();
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const T* xs = px + bc * h * w;
        for (std::int64_t oi = 0; oi < oh; ++oi) {
            for (std::int64_t oj = 0; oj < ow; ++oj) {
                std::int64_t best = oi * kh * w + oj * kw;
                T bv = xs[best];
                for (std::int64_t ki = 0; ki < kh; ++ki)
                    for (std::int64_t kj = 0; kj < kw; ++kj) {
                        const std::int64_t idx = (oi * kh + ki) * w + oj * kw + kj;
                        if (xs[idx] > bv) {
                            bv = xs[idx];
                            best = idx;
                        }
                    }
                const std::int64_t o = bc * oh * ow + oi * ow + oj;
                out[static_cast<std::size_t>(o)] = bv;
                (*argmax)[static_cast<std::size_t>(o)] = bc * h * w + best;
            }
        }
    }
    return detail::make_op<T>({b, c, oh, ow}, std::move(out), {x},
                              [argmax](detail::Node<T>& self) {
                                  if (!self.parents[0]->requires_grad) return;
                                  auto& acc = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      acc[static_cast<std::size_t>((*argmax)[i])] += self.grad[i];
                              });
}

template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, std::int64_t kh, std::int64_t kw) {
    if (x.ndim() != 4) throw ShapeError("avg_pool2d: input must be 4-d");
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % kh != 0 || w % kw != 0)
        throw ShapeError("avg_pool2d: extents " + shape_str({h, w}) + " not divisible by kernel");
    const std::int64_t oh = h / kh, ow = w / kw;
    const T inv = T(1) / static_cast<T>(kh * kw);
    std::vector<T> out(static_cast<std::size_t>(b * c * oh * ow), T(0));
    const T* px = x.data();
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const T* xs = px + bc * h * w;
        T* os = out.data() + bc * oh * ow;
        for (std::int64_t oi = 0; oi < oh; ++oi)
            for (std::int64_t oj = 0; oj < ow; ++oj) {
                T s = T(0);
                for (std::int64_t ki = 0; ki < kh; ++ki)
                    for (std::int64_t kj = 0; kj < kw; ++kj)
                        s += xs[(oi * kh + ki) * w + oj * kw + kj];
                os[oi * ow + oj] = s * inv;
            }
    }
    return detail::make_op<T>(
        {b, c, oh, ow}, std::move(out), {x}, [b, c, h, w, kh, kw, oh, ow, inv](detail::Node<T>& self) {
            if (!self.parents[0]->requires_grad) return;
            auto& acc = self.parents[0]->ensure_grad();
            for (std::int64_t bc = 0; bc < b * c; ++bc)
                for (std::int64_t oi = 0; oi < oh; ++oi)
                    for (std::int64_t oj = 0; oj < ow; ++oj) {
                        const T g = self.grad[static_cast<std::size_t>(bc * oh * ow + oi * ow + oj)] * inv;
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj)
                                acc[static_cast<std::size_t>(bc * h * w + (oi * kh + ki) * w + oj * kw + kj)] += g;
                    }
        });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// x: (B, C, H, W); gamma/beta: (C). Training mode normalizes by biased batch
// statistics and updates the running buffers in place (unbiased variance, as
// is conventional); eval mode uses the running buffers.
template <typename T>
TensorT<T> batch_norm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                        TensorT<T>& running_mean, TensorT<T>& running_var, bool training,
                        T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.ndim() != 4) throw ShapeError("batch_norm2d: input must be 4-d");
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("batch_norm2d: affine params must have extent C=" + std::to_string(c));
    const std::int64_t n = b * h * w;
    const std::int64_t plane = h * w;
    auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c), T(0));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c), T(0));
    if (training) {
        const T* px = x.data();
        for (std::int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0, s2 = 0.0;
            for (std::int64_t i = 0; i < b; ++i) {
                const T* xs = px + (i * c + ch) * plane;
                for (std::int64_t j = 0; j < plane; ++j) {
                    s += xs[j];
                    s2 += static_cast<double>(xs[j]) * xs[j];
                }
            }
            const double mu = s / static_cast<double>(n);
            const double var = std::max(0.0, s2 / static_cast<double>(n) - mu * mu);
            (*mean)[static_cast<std::size_t>(ch)] = static_cast<T>(mu);
            (*invstd)[static_cast<std::size_t>(ch)] =
                static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
            running_mean.data()[ch] =
                static_cast<T>((1.0 - static_cast<double>(momentum)) * running_mean.data()[ch] +
                               static_cast<double>(momentum) * mu);
            running_var.data()[ch] =
                static_cast<T>((1.0 - static_cast<double>(momentum)) * running_var.data()[ch] +
                               static_cast<double>(momentum) * unbiased);
        }
    } else {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            (*mean)[static_cast<std::size_t>(ch)] = running_mean.data()[ch];
            (*invstd)[static_cast<std::size_t>(ch)] =
                static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[ch]) +
                                               static_cast<double>(eps)));
        }
    }
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    {
        const T* px = x.data();
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T mu = (*mean)[static_cast<std::size_t>(ch)];
                const T is = (*invstd)[static_cast<std::size_t>(ch)];
                const T g = gamma.data()[ch], bt = beta.data()[ch];
                const T* xs = px + (i * c + ch) * plane;
                T* os = out.data() + (i * c + ch) * plane;
                for (std::int64_t j = 0; j < plane; ++j) os[j] = (xs[j] - mu) * is * g + bt;
            }
    }
    return detail::make_op<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [b, c, plane, n, mean, invstd, training](detail::Node<T>& self) {
            auto& xp = *self.parents[0];
            auto& gp = *self.parents[1];
            auto& bp = *self.parents[2];
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T mu = (*mean)[static_cast<std::size_t>(ch)];
                const T is = (*invstd)[static_cast<std::size_t>(ch)];
                const T g = gp.data[static_cast<std::size_t>(ch)];
                // per-channel reductions of dout and dout * xhat
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t i = 0; i < b; ++i) {
                    const T* gr = self.grad.data() + (i * c + ch) * plane;
                    const T* xs = xp.data.data() + (i * c + ch) * plane;
                    for (std::int64_t j = 0; j < plane; ++j) {
                        sum_g += gr[j];
                        sum_gx += static_cast<double>(gr[j]) * ((xs[j] - mu) * is);
                    }
                }
                if (gp.requires_grad) gp.ensure_grad()[static_cast<std::size_t>(ch)] += static_cast<T>(sum_gx);
                if (bp.requires_grad) bp.ensure_grad()[static_cast<std::size_t>(ch)] += static_cast<T>(sum_g);
                if (xp.requires_grad) {
                    auto& acc = xp.ensure_grad();
                    const T mg = static_cast<T>(sum_g / static_cast<double>(n));
                    const T mgx = static_cast<T>(sum_gx / static_cast<double>(n));
                    for (std::int64_t i = 0; i < b; ++i) {
                        const T* gr = self.grad.data() + (i * c + ch) * plane;
                        const T* xs = xp.data.data() + (i * c + ch) * plane;
                        T* dx = acc.data() + (i * c + ch) * plane;
                        if (training) {
                            for (std::int64_t j = 0; j < plane; ++j) {
                                const T xh = (xs[j] - mu) * is;
                                dx[j] += g * is * (gr[j] - mg - xh * mgx);
                            }
                        } else {
                            for (std::int64_t j = 0; j < plane; ++j) dx[j] += g * is * gr[j];
                        }
                    }
                }
            }
        });
}

// Normalizes over the last axis; gamma/beta: (D).
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5)) {
    const std::int64_t d = x.dim(x.ndim() - 1);
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm: affine params must have extent D=" + std::to_string(d));
    const std::int64_t rows = x.numel() / d;
    auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    const T* px = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xs = px + r * d;
        double s = 0.0, s2 = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            s += xs[j];
            s2 += static_cast<double>(xs[j]) * xs[j];
        }
        const double mu = s / static_cast<double>(d);
        const double var = std::max(0.0, s2 / static_cast<double>(d) - mu * mu);
        const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*mean)[static_cast<std::size_t>(r)] = static_cast<T>(mu);
        (*invstd)[static_cast<std::size_t>(r)] = is;
        T* os = out.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j)
            os[j] = (xs[j] - static_cast<T>(mu)) * is * gamma.data()[j] + beta.data()[j];
    }
    return detail::make_op<T>(
        x.shape(), std::move(out), {x, gamma, beta}, [rows, d, mean, invstd](detail::Node<T>& self) {
            auto& xp = *self.parents[0];
            auto& gp = *self.parents[1];
            auto& bp = *self.parents[2];
            for (std::int64_t r = 0; r < rows; ++r) {
                const T mu = (*mean)[static_cast<std::size_t>(r)];
                const T is = (*invstd)[static_cast<std::size_t>(r)];
                const T* gr = self.grad.data() + r * d;
                const T* xs = xp.data.data() + r * d;
                double sum_gg = 0.0, sum_ggx = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const T gg = gr[j] * gp.data[static_cast<std::size_t>(j)];
                    const T xh = (xs[j] - mu) * is;
                    sum_gg += gg;
                    sum_ggx += static_cast<double>(gg) * xh;
                    if (gp.requires_grad) gp.ensure_grad()[static_cast<std::size_t>(j)] += gr[j] * xh;
                    if (bp.requires_grad) bp.ensure_grad()[static_cast<std::size_t>(j)] += gr[j];
                }
                if (xp.requires_grad) {
                    auto& acc = xp.ensure_grad();
                    const T mg = static_cast<T>(sum_gg / static_cast<double>(d));
                    const T mgx = static_cast<T>(sum_ggx / static_cast<double>(d));
                    T* dx = acc.data() + r * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T gg = gr[j] * gp.data[static_cast<std::size_t>(j)];
                        const T xh = (xs[j] - mu) * is;
                        dx[j] += is * (gg - mg - xh * mgx);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

// Inverted dropout; the mask is drawn from the supplied counter RNG so a
// fixed (seed, counter) reproduces it exactly. Identity when not training.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double p, bool training, CounterRng& rng) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw ConfigError("dropout: rate must be < 1");
    auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(x.numel()));
    const T scale_keep = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> out(x.vec());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool keep = rng.uniform() >= p;
        (*mask)[i] = keep ? 1 : 0;
        out[i] = keep ? out[i] * scale_keep : T(0);
    }
    return detail::make_op<T>(x.shape(), std::move(out), {x},
                              [mask, scale_keep](detail::Node<T>& self) {
                                  if (!self.parents[0]->requires_grad) return;
                                  auto& acc = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      if ((*mask)[i]) acc[i] += self.grad[i] * scale_keep;
                              });
}

}  // namespace seld
