#pragma once

// Dense 64-bit real tensors with reverse-mode automatic differentiation.
// Graphs are recorded per forward pass (define-by-run); backward replays
// the recorded ops in exact reverse execution order. Gradients accumulate
// across multiple uses of a tensor; call zero_grad() between steps.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "catsnet/errors.hpp"

namespace catsnet {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until backward touches this node
    bool requires_grad = false;
    std::uint64_t seq = 0; // forward execution order
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward; // accumulates into parents' grads

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (detail::shape_size(shape) != values.size())
            throw ShapeMismatch("tensor: shape " + detail::shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
        node_ = std::make_shared<detail::Node>();
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
        node_->seq = detail::next_seq();
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::size_t n = detail::shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor(Shape{1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        node_->requires_grad = value;
        return *this;
    }

    bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw Error("grad: no gradient recorded; run backward first");
        return node_->grad;
    }
    void zero_grad() {
        if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Deep copy of the values; drops any recorded graph.
    Tensor clone() const {
        Tensor t(node_->shape, node_->data, node_->requires_grad);
        return t;
    }

    double item() const {
        if (!node_ || node_->size() != 1) throw NotScalar("item: tensor is not a scalar");
        return node_->data[0];
    }

    // Reverse-mode sweep from a scalar loss. Visits recorded ops in exact
    // reverse forward order; grads of reachable requires_grad tensors are
    // populated (accumulated, not overwritten).
    void backward() const {
        if (!node_) throw NotScalar("backward: undefined tensor");
        if (node_->size() != 1)
            throw NotScalar("backward: loss has " + std::to_string(node_->size()) +
                            " elements, expected 1");
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        std::vector<detail::Node*> stack{node_.get()};
        seen.insert(node_.get());
        while (!stack.empty()) {
            detail::Node* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const auto& p : n->parents) {
                if (p->requires_grad && !seen.count(p.get())) {
                    seen.insert(p.get());
                    stack.push_back(p.get());
                }
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
        for (detail::Node* n : order) n->ensure_grad();
        node_->grad[0] += 1.0;
        for (detail::Node* n : order)
            if (n->backward) n->backward(*n);
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

inline void zero_grads(const std::vector<Tensor>& tensors) {
    for (const Tensor& t : tensors) const_cast<Tensor&>(t).zero_grad();
}

namespace detail {

// Records one executed op. The backward closure may capture raw Node*
// pointers to the inputs; the parents vector keeps them alive. When no
// input requires grad the graph edge is pruned entirely.
inline Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                      std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->seq = next_seq();
    bool rg = false;
    for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    node->requires_grad = rg;
    if (rg) {
        node->parents.reserve(inputs.size());
        for (const Tensor& t : inputs) node->parents.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

// b broadcasts over a when b's shape is a trailing suffix of a's shape;
// the flat data then tiles with period size(b).
inline bool is_suffix(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Inner gemm kernels. All accumulate into dst (caller zeroes when needed);
// loop orders keep every inner loop contiguous in memory.
inline void gemm_nn(double* dst, const double* a, const double* b, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* drow = dst + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = a[i * k + l];
            const double* brow = b + l * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += av * brow[j];
        }
    }
}

// dst[m,k] += a[m,n] * b[k,n]^T
inline void gemm_nt(double* dst, const double* a, const double* b, std::size_t m, std::size_t n,
                    std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double* brow = b + l * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            dst[i * k + l] += acc;
        }
    }
}

// dst[k,n] += a[m,k]^T * b[m,n]
inline void gemm_tn(double* dst, const double* a, const double* b, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* brow = b + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = a[i * k + l];
            double* drow = dst + l * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += av * brow[j];
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    const bool b_small = is_suffix(a.shape(), b.shape());
    const bool a_small = !b_small && is_suffix(b.shape(), a.shape());
    if (!b_small && !a_small)
        throw ShapeMismatch(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                            " and " + shape_str(b.shape()));
    const Tensor& big = b_small ? a : b;
    const Tensor& small = b_small ? b : a;
    const std::size_t nb = big.size(), ns = small.size();
    std::vector<double> out(nb);
    const double* pb = big.data().data();
    const double* ps = small.data().data();
    for (std::size_t i = 0; i < nb; ++i) {
        const double x = b_small ? pb[i] : ps[i % ns];
        const double y = b_small ? ps[i % ns] : pb[i];
        out[i] = fwd(x, y);
    }
    Node* an = a.node().get();
    Node* bn = b.node().get();
    return make_op(big.shape(), std::move(out), {a, b}, [=](Node& self) {
        const double* g = self.grad.data();
        const double* pa = an->data.data();
        const double* pbd = bn->data.data();
        const std::size_t na = an->size(), nbb = bn->size();
        const std::size_t total = self.size();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t i = 0; i < total; ++i) {
            const std::size_t ia = na == total ? i : i % na;
            const std::size_t ib = nbb == total ? i : i % nbb;
            double dx, dy;
            bwd(pa[ia], pbd[ib], g[i], dx, dy);
            if (an->requires_grad) an->grad[ia] += dx;
            if (bn->requires_grad) bn->grad[ib] += dy;
        }
    });
}

template <class Fwd, class Bwd>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Bwd bwd) {
    std::vector<double> out(x.size());
    const double* px = x.data().data();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(px[i]);
    Node* xn = x.node().get();
    return make_op(x.shape(), std::move(out), {x}, [=](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i)
            xn->grad[i] += bwd(xn->data[i], self.data[i]) * self.grad[i];
    });
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double g, double& dx, double& dy) {
            dx = g;
            dy = g;
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double g, double& dx, double& dy) {
            dx = g;
            dy = -g;
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& dx, double& dy) {
            dx = g * y;
            dy = g * x;
        });
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary_elementwise(
        x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_const(const Tensor& x, double c) {
    return detail::unary_elementwise(
        x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_elementwise(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor log(const Tensor& x) {
    for (double v : x.data())
        if (!(v > 0.0)) throw DomainError("log: input " + std::to_string(v) + " is not positive");
    return detail::unary_elementwise(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// y = x^p with constant exponent. p in [0,1) other than 0 needs x > 0;
// p >= 1 allows x >= 0 (derivative at 0 is 0 for p > 1, 1 for p == 1).
inline Tensor pow_const(const Tensor& x, double p) {
    if (p == 0.0)
        return detail::unary_elementwise(
            x, [](double) { return 1.0; }, [](double, double) { return 0.0; });
    if (p < 1.0) {
        for (double v : x.data())
            if (!(v > 0.0))
                throw DomainError("pow_const: exponent " + std::to_string(p) +
                                  " needs positive input");
    } else {
        for (double v : x.data())
            if (v < 0.0) throw DomainError("pow_const: negative base");
    }
    return detail::unary_elementwise(
        x, [p](double v) { return std::pow(v, p); },
        [p](double v, double) {
            if (v == 0.0) return p == 1.0 ? 1.0 : 0.0;
            return p * std::pow(v, p - 1.0);
        });
}

// Gradient passes inside [lo, hi], zero where the value was clipped.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    return detail::unary_elementwise(
        x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// matmul and friends

namespace detail {

struct BatchedMatmulPlan {
    Shape out_shape;
    std::size_t m, k, n;
    std::size_t batches;
    // per output batch: flat offsets into a and b (in units of matrices)
    std::vector<std::size_t> a_index, b_index;
};

inline BatchedMatmulPlan plan_matmul(const Shape& sa, const Shape& sb) {
    if (sa.size() < 2 || sb.size() < 2) throw ShapeMismatch("matmul: operands must have rank >= 2");
    BatchedMatmulPlan plan;
    plan.m = sa[sa.size() - 2];
    plan.k = sa[sa.size() - 1];
    const std::size_t kb = sb[sb.size() - 2];
    plan.n = sb[sb.size() - 1];
    if (plan.k != kb)
        throw ShapeMismatch("matmul: inner dimensions differ, " + shape_str(sa) + " vs " +
                            shape_str(sb));
    const std::size_t ra = sa.size() - 2, rb = sb.size() - 2;
    const std::size_t rc = std::max(ra, rb);
    Shape batch(rc);
    for (std::size_t i = 0; i < rc; ++i) {
        const std::size_t da = i < rc - ra ? 1 : sa[i - (rc - ra)];
        const std::size_t db = i < rc - rb ? 1 : sb[i - (rc - rb)];
        if (da != db && da != 1 && db != 1)
            throw ShapeMismatch("matmul: batch dimensions incompatible, " + shape_str(sa) +
                                " vs " + shape_str(sb));
        batch[i] = std::max(da, db);
    }
    plan.batches = shape_size(batch);
    plan.out_shape = batch;
    plan.out_shape.push_back(plan.m);
    plan.out_shape.push_back(plan.n);
    plan.a_index.resize(plan.batches);
    plan.b_index.resize(plan.batches);
    for (std::size_t flat = 0; flat < plan.batches; ++flat) {
        std::size_t rem = flat, ia = 0, ib = 0;
        for (std::size_t i = 0; i < rc; ++i) {
            // row-major mixed radix walk over the broadcast batch shape
            std::size_t stride = 1;
            for (std::size_t j = i + 1; j < rc; ++j) stride *= batch[j];
            const std::size_t idx = rem / stride;
            rem %= stride;
            const std::size_t da = i < rc - ra ? 1 : sa[i - (rc - ra)];
            const std::size_t db = i < rc - rb ? 1 : sb[i - (rc - rb)];
            ia = ia * da + (da == 1 ? 0 : idx);
            ib = ib * db + (db == 1 ? 0 : idx);
        }
        plan.a_index[flat] = ia;
        plan.b_index[flat] = ib;
    }
    return plan;
}

} // namespace detail

// Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n]; leading
// batch dimensions broadcast when equal or 1. dA = dC.B^T, dB = A^T.dC,
// reduced over broadcast batches.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    auto plan = detail::plan_matmul(a.shape(), b.shape());
    const std::size_t m = plan.m, k = plan.k, n = plan.n;
    std::vector<double> out(plan.batches * m * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < plan.batches; ++i)
        detail::gemm_nn(out.data() + i * m * n, pa + plan.a_index[i] * m * k,
                        pb + plan.b_index[i] * k * n, m, k, n);
    detail::Node* an = a.node().get();
    detail::Node* bn = b.node().get();
    return detail::make_op(plan.out_shape, std::move(out), {a, b}, [=](detail::Node& self) {
        const double* g = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < plan.batches; ++i)
                detail::gemm_nt(an->grad.data() + plan.a_index[i] * m * k, g + i * m * n,
                                bn->data.data() + plan.b_index[i] * k * n, m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < plan.batches; ++i)
                detail::gemm_tn(bn->grad.data() + plan.b_index[i] * k * n,
                                an->data.data() + plan.a_index[i] * m * k, g + i * m * n, m, k, n);
        }
    });
}

// Materialized transpose of the two trailing axes.
inline Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw ShapeMismatch("transpose_last2: rank must be >= 2");
    Shape shape = x.shape();
    const std::size_t r = shape.size(), m = shape[r - 2], n = shape[r - 1];
    std::swap(shape[r - 2], shape[r - 1]);
    const std::size_t batches = x.size() / (m * n);
    std::vector<double> out(x.size());
    const double* px = x.data().data();
    for (std::size_t bidx = 0; bidx < batches; ++bidx) {
        const double* src = px + bidx * m * n;
        double* dst = out.data() + bidx * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    detail::Node* xn = x.node().get();
    return detail::make_op(std::move(shape), std::move(out), {x}, [=](detail::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (std::size_t bidx = 0; bidx < batches; ++bidx) {
            const double* src = g + bidx * m * n;
            double* dst = xn->grad.data() + bidx * m * n;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += src[j * m + i];
        }
    });
}

// ---------------------------------------------------------------------------
// axis reductions, softmax, layer norm

namespace detail {

struct AxisSplit {
    std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw ShapeMismatch("axis out of range");
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

} // namespace detail

// Numerically stable softmax along one axis (max subtraction).
// dx = y * (dy - sum(dy * y, axis)).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis);
    std::vector<double> out(x.size());
    const double* px = x.data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double mx = px[base];
            for (std::size_t t = 1; t < s.len; ++t)
                mx = std::max(mx, px[base + t * s.inner]);
            double z = 0.0;
            for (std::size_t t = 0; t < s.len; ++t) {
                const double e = std::exp(px[base + t * s.inner] - mx);
                out[base + t * s.inner] = e;
                z += e;
            }
            for (std::size_t t = 0; t < s.len; ++t) out[base + t * s.inner] /= z;
        }
    }
    detail::Node* xn = x.node().get();
    return detail::make_op(x.shape(), std::move(out), {x}, [=](detail::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* y = self.data.data();
        const double* g = self.grad.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = o * s.len * s.inner + in;
                double dot = 0.0;
                for (std::size_t t = 0; t < s.len; ++t) {
                    const std::size_t i = base + t * s.inner;
                    dot += g[i] * y[i];
                }
                for (std::size_t t = 0; t < s.len; ++t) {
                    const std::size_t i = base + t * s.inner;
                    xn->grad[i] += y[i] * (g[i] - dot);
                }
            }
        }
    });
}

inline Tensor sum_over_axis(const Tensor& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis);
    Shape shape;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (i != axis) shape.push_back(x.dim(i));
    if (shape.empty()) shape.push_back(1);
    std::vector<double> out(s.outer * s.inner, 0.0);
    const double* px = x.data().data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t t = 0; t < s.len; ++t)
            for (std::size_t in = 0; in < s.inner; ++in)
                out[o * s.inner + in] += px[(o * s.len + t) * s.inner + in];
    detail::Node* xn = x.node().get();
    return detail::make_op(std::move(shape), std::move(out), {x}, [=](detail::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t t = 0; t < s.len; ++t)
                for (std::size_t in = 0; in < s.inner; ++in)
                    xn->grad[(o * s.len + t) * s.inner + in] += g[o * s.inner + in];
    });
}

inline Tensor mean_over_axis(const Tensor& x, std::size_t axis) {
    const double inv = 1.0 / static_cast<double>(x.dim(axis));
    return scale(sum_over_axis(x, axis), inv);
}

// Per last-axis slice: gain * (x - mean) / sqrt(var + eps) + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() < 1) throw ShapeMismatch("layer_norm: rank must be >= 1");
    const std::size_t d = x.dim(x.rank() - 1);
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw ShapeMismatch("layer_norm: gain/bias must have shape [d]");
    if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
    const std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    std::vector<double> inv_std(rows), means(rows);
    const double* px = x.data().data();
    const double* pg = gain.data().data();
    const double* pb = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        means[r] = mean;
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j)
            out[r * d + j] = pg[j] * (row[j] - mean) * is + pb[j];
    }
    detail::Node* xn = x.node().get();
    detail::Node* gn = gain.node().get();
    detail::Node* bn = bias.node().get();
    return detail::make_op(
        x.shape(), std::move(out), {x, gain, bias},
        [=, inv_std = std::move(inv_std), means = std::move(means)](detail::Node& self) {
            const double* g = self.grad.data();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* row = xn->data.data() + r * d;
                const double* grow = g + r * d;
                const double is = inv_std[r], mean = means[r];
                if (gn->requires_grad || bn->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = (row[j] - mean) * is;
                        if (gn->requires_grad) gn->grad[j] += grow[j] * xhat;
                        if (bn->requires_grad) bn->grad[j] += grow[j];
                    }
                }
                if (xn->requires_grad) {
                    // dxhat = g * gain; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = (row[j] - mean) * is;
                        const double dxhat = grow[j] * gn->data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    const double invd = 1.0 / static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = (row[j] - mean) * is;
                        const double dxhat = grow[j] * gn->data[j];
                        xn->grad[r * d + j] +=
                            is * (dxhat - sum_dxhat * invd - xhat * sum_dxhat_xhat * invd);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// shape surgery

inline Tensor concat_last_axis(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 1)
        throw ShapeMismatch("concat_last_axis: rank mismatch");
    for (std::size_t i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeMismatch("concat_last_axis: leading dims differ, " +
                                detail::shape_str(a.shape()) + " vs " +
                                detail::shape_str(b.shape()));
    const std::size_t da = a.dim(a.rank() - 1), db = b.dim(b.rank() - 1);
    const std::size_t rows = a.size() / da;
    Shape shape = a.shape();
    shape.back() = da + db;
    std::vector<double> out(rows * (da + db));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy(pa + r * da, pa + (r + 1) * da, out.begin() + r * (da + db));
        std::copy(pb + r * db, pb + (r + 1) * db, out.begin() + r * (da + db) + da);
    }
    detail::Node* an = a.node().get();
    detail::Node* bn = b.node().get();
    return detail::make_op(std::move(shape), std::move(out), {a, b}, [=](detail::Node& self) {
        const double* g = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < da; ++j)
                    an->grad[r * da + j] += g[r * (da + db) + j];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < db; ++j)
                    bn->grad[r * db + j] += g[r * (da + db) + da + j];
        }
    });
}

inline Tensor slice_last_axis(const Tensor& x, std::size_t start, std::size_t len) {
    const std::size_t d = x.dim(x.rank() - 1);
    if (start + len > d) throw ShapeMismatch("slice_last_axis: slice exceeds axis extent");
    const std::size_t rows = x.size() / d;
    Shape shape = x.shape();
    shape.back() = len;
    std::vector<double> out(rows * len);
    const double* px = x.data().data();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(px + r * d + start, px + r * d + start + len, out.begin() + r * len);
    detail::Node* xn = x.node().get();
    return detail::make_op(std::move(shape), std::move(out), {x}, [=](detail::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) xn->grad[r * d + start + j] += g[r * len + j];
    });
}

// x[b, n, d] -> x[:, t, :] as [b, d]
inline Tensor time_step(const Tensor& x, std::size_t t) {
    if (x.rank() != 3) throw ShapeMismatch("time_step: expected rank-3 input");
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    if (t >= n) throw ShapeMismatch("time_step: index out of range");
    std::vector<double> out(b * d);
    const double* px = x.data().data();
    for (std::size_t i = 0; i < b; ++i)
        std::copy(px + (i * n + t) * d, px + (i * n + t + 1) * d, out.begin() + i * d);
    detail::Node* xn = x.node().get();
    return detail::make_op(Shape{b, d}, std::move(out), {x}, [=](detail::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < d; ++j) xn->grad[(i * n + t) * d + j] += g[i * d + j];
    });
}

// Stack n tensors of shape [b, d] into [b, n, d].
inline Tensor stack_steps(const std::vector<Tensor>& steps) {
    if (steps.empty()) throw ShapeMismatch("stack_steps: no steps");
    const std::size_t n = steps.size();
    const std::size_t b = steps[0].dim(0), d = steps[0].dim(1);
    for (const Tensor& s : steps)
        if (s.shape() != Shape{b, d}) throw ShapeMismatch("stack_steps: step shapes differ");
    std::vector<double> out(b * n * d);
    for (std::size_t t = 0; t < n; ++t) {
        const double* ps = steps[t].data().data();
        for (std::size_t i = 0; i < b; ++i)
            std::copy(ps + i * d, ps + (i + 1) * d, out.begin() + (i * n + t) * d);
    }
    std::vector<detail::Node*> nodes;
    nodes.reserve(n);
    for (const Tensor& s : steps) nodes.push_back(s.node().get());
    return detail::make_op(Shape{b, n, d}, std::move(out), steps,
                           [=, nodes = std::move(nodes)](detail::Node& self) {
                               const double* g = self.grad.data();
                               for (std::size_t t = 0; t < n; ++t) {
                                   detail::Node* sn = nodes[t];
                                   if (!sn->requires_grad) continue;
                                   sn->ensure_grad();
                                   for (std::size_t i = 0; i < b; ++i)
                                       for (std::size_t j = 0; j < d; ++j)
                                           sn->grad[i * d + j] += g[(i * n + t) * d + j];
                               }
                           });
}

} // namespace catsnet
