#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "lion/rng.hpp"

namespace lion {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline void check_shape_valid(const Shape& s, const char* who) {
    if (s.empty()) throw ShapeError(std::string(who) + ": empty shape");
    for (int64_t d : s)
        if (d < 1) throw ShapeError(std::string(who) + ": nonpositive dim in " + shape_str(s));
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;   // allocated lazily, same length as data
    bool requires_grad = false; // set on leaves that want gradients
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    bool has_graph() const { return static_cast<bool>(backward_fn); }
    // True when backward should deposit gradient into this node: either a
    // trainable leaf or an interior node that must pass gradient onward.
    bool wants_grad() const { return requires_grad || has_graph(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

} // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap handle onto a shared node. Nodes are immutable after
/// creation except for their grad buffer; gradients accumulate across
/// backward() calls until zero_grad(). Graphs (tapes) are single-threaded.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape) {
        check_shape_valid(shape, "zeros");
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = shape;
        t.node_->data.assign(shape_numel(shape), 0.0);
        return t;
    }

    static Tensor full(const Shape& shape, double v) {
        Tensor t = zeros(shape);
        std::fill(t.node_->data.begin(), t.node_->data.end(), v);
        return t;
    }

    /// I.i.d. N(0, stddev^2) entries via Box-Muller over splitmix64 draws.
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
        check_shape_valid(shape, "randn");
        if (!(stddev > 0.0)) throw ContractError("randn: stddev must be > 0");
        Tensor t = zeros(shape);
        for (double& v : t.node_->data) v = rng.next_normal() * stddev;
        return t;
    }

    static Tensor from_data(const Shape& shape, std::vector<double> data) {
        check_shape_valid(shape, "from_data");
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("from_data: data length does not match " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = shape;
        t.node_->data = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    size_t ndim() const { return node_->shape.size(); }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; } // optimizer use only
    double item() const {
        if (numel() != 1) throw ContractError("item: tensor is not scalar");
        return node_->data[0];
    }
    double at(int64_t i) const { return node_->data.at(static_cast<size_t>(i)); }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (node_->grad.empty()) throw ContractError("grad: no gradient recorded");
        return node_->grad;
    }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    bool all_finite() const {
        for (double v : node_->data)
            if (!std::isfinite(v)) return false;
        for (double v : node_->grad)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable node that wants them; call zero_grad between steps.
    void backward() const {
        if (numel() != 1) throw ContractError("backward: loss must be scalar");
        std::vector<detail::TensorNode*> topo;
        std::unordered_set<detail::TensorNode*> seen;
        std::function<void(detail::TensorNode*)> dfs = [&](detail::TensorNode* n) {
            if (seen.count(n)) return;
            seen.insert(n);
            for (auto& p : n->parents) dfs(p.get());
            topo.push_back(n);
        };
        dfs(node_.get());
        // Interior nodes restart each sweep; only leaf grads accumulate
        // across backward calls (until explicitly zeroed).
        for (auto* n : topo)
            if (n->has_graph() && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
        node_->ensure_grad();
        node_->grad[0] += 1.0;
        for (auto it = topo.rbegin(); it != topo.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn();
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor make_op_output(Shape shape, std::vector<double> data,
                                 std::vector<Tensor> inputs,
                                 std::function<void()> (*bind)(detail::TensorNode*, std::vector<Tensor>));
};

/// Scoped tape switch: while alive, ops do not record backward functions.
/// Inference paths (decoding, scoring, metric sweeps) use it to skip graph
/// construction entirely.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(enabled()) { enabled() = false; }
    ~NoGradGuard() { enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

namespace detail {

// Builds the output node of an op: attaches parents + backward only when some
// input participates in a graph, so frozen subnetworks carry no tape at all.
template <typename BackwardBuilder>
Tensor op_output(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                 BackwardBuilder&& build) {
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    bool needs = NoGradGuard::enabled();
    if (needs) {
        needs = false;
        for (const auto& in : inputs)
            if (in.node()->wants_grad()) { needs = true; break; }
    }
    if (needs) {
        auto out_node = out.node();
        for (const auto& in : inputs) out_node->parents.push_back(in.node());
        out_node->backward_fn = build(out_node.get());
    }
    return out;
}

inline void accumulate(TensorNode* n, const std::vector<double>& g) {
    if (!n->wants_grad()) return;
    n->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise / broadcast arithmetic
// ---------------------------------------------------------------------------

namespace detail {

// b may equal a's shape or be a suffix of it (broadcast over leading dims).
inline int64_t broadcast_repeat(const Shape& a, const Shape& b, const char* who) {
    if (a.size() < b.size()) throw ShapeError(std::string(who) + ": " + shape_str(b) + " vs " + shape_str(a));
    size_t off = a.size() - b.size();
    for (size_t i = 0; i < b.size(); ++i)
        if (a[off + i] != b[i])
            throw ShapeError(std::string(who) + ": cannot broadcast " + shape_str(b) + " over " + shape_str(a));
    int64_t rep = 1;
    for (size_t i = 0; i < off; ++i) rep *= a[i];
    return rep;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    int64_t rep = detail::broadcast_repeat(a.shape(), b.shape(), "add");
    int64_t bn = b.numel();
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t r = 0; r < rep; ++r)
        for (int64_t i = 0; i < bn; ++i) out[r * bn + i] = pa[r * bn + i] + pb[i];
    return detail::op_output(a.shape(), std::move(out), {a, b}, [=](detail::TensorNode* o) {
        auto an = a.node(); auto bn_node = b.node();
        return std::function<void()>([o, an, bn_node, rep, bn]() {
            if (an->wants_grad()) {
                an->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
            }
            if (bn_node->wants_grad()) {
                bn_node->ensure_grad();
                for (int64_t r = 0; r < rep; ++r)
                    for (int64_t i = 0; i < bn; ++i) bn_node->grad[i] += o->grad[r * bn + i];
            }
        });
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    int64_t rep = detail::broadcast_repeat(a.shape(), b.shape(), "mul");
    int64_t bn = b.numel();
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t r = 0; r < rep; ++r)
        for (int64_t i = 0; i < bn; ++i) out[r * bn + i] = pa[r * bn + i] * pb[i];
    return detail::op_output(a.shape(), std::move(out), {a, b}, [=](detail::TensorNode* o) {
        auto an = a.node(); auto bn_node = b.node();
        return std::function<void()>([o, an, bn_node, rep, bn]() {
            if (an->wants_grad()) {
                an->ensure_grad();
                for (int64_t r = 0; r < rep; ++r)
                    for (int64_t i = 0; i < bn; ++i)
                        an->grad[r * bn + i] += o->grad[r * bn + i] * bn_node->data[i];
            }
            if (bn_node->wants_grad()) {
                bn_node->ensure_grad();
                for (int64_t r = 0; r < rep; ++r)
                    for (int64_t i = 0; i < bn; ++i)
                        bn_node->grad[i] += o->grad[r * bn + i] * an->data[r * bn + i];
            }
        });
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * c;
    return detail::op_output(a.shape(), std::move(out), {a}, [=](detail::TensorNode* o) {
        auto an = a.node();
        return std::function<void()>([o, an, c]() {
            if (!an->wants_grad()) return;
            an->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i] * c;
        });
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::op_output({1}, {s}, {a}, [=](detail::TensorNode* o) {
        auto an = a.node();
        return std::function<void()>([o, an]() {
            if (!an->wants_grad()) return;
            an->ensure_grad();
            for (double& g : an->grad) g += o->grad[0];
        });
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// matmul: a [..., K] x b [K, M] -> [..., M]; rows of a are flattened.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() != 2)
        throw ShapeError("matmul: need a with >=2 dims and 2-d b, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    int64_t k = a.shape().back();
    if (k != b.dim(0))
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = b.dim(1);
    int64_t rows = a.numel() / k;
    std::vector<double> out(rows * m, 0.0);
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* po = out.data();
        for (int64_t i = 0; i < rows; ++i) {
            const double* ai = pa + i * k;
            double* oi = po + i * m;
            for (int64_t kk = 0; kk < k; ++kk) {
                double av = ai[kk];
                const double* bk = pb + kk * m;
                for (int64_t j = 0; j < m; ++j) oi[j] += av * bk[j];
            }
        }
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(m);
    return detail::op_output(std::move(out_shape), std::move(out), {a, b}, [=](detail::TensorNode* o) {
        auto an = a.node(); auto bn = b.node();
        return std::function<void()>([o, an, bn, rows, k, m]() {
            const double* go = o->grad.data();
            if (an->wants_grad()) {
                an->ensure_grad();
                double* ga = an->grad.data();
                const double* pb = bn->data.data();
                for (int64_t i = 0; i < rows; ++i) {
                    const double* gi = go + i * m;
                    double* gai = ga + i * k;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const double* bk = pb + kk * m;
                        double s = 0.0;
                        for (int64_t j = 0; j < m; ++j) s += gi[j] * bk[j];
                        gai[kk] += s;
                    }
                }
            }
            if (bn->wants_grad()) {
                bn->ensure_grad();
                double* gb = bn->grad.data();
                const double* pa = an->data.data();
                for (int64_t i = 0; i < rows; ++i) {
                    const double* ai = pa + i * k;
                    const double* gi = go + i * m;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        double av = ai[kk];
                        double* gbk = gb + kk * m;
                        for (int64_t j = 0; j < m; ++j) gbk[j] += av * gi[j];
                    }
                }
            }
        });
    });
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    return detail::op_output(a.shape(), std::move(out), {a}, [=](detail::TensorNode* o) {
        auto an = a.node();
        return std::function<void()>([o, an]() {
            if (!an->wants_grad()) return;
            an->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i)
                if (an->data[i] > 0.0) an->grad[i] += o->grad[i];
        });
    });
}

// GeLU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
inline Tensor gelu(const Tensor& a) {
    constexpr double kS = 0.7978845608028654; // sqrt(2/pi)
    constexpr double kC = 0.044715;
    std::vector<double> out(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) {
        double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(kS * (x + kC * x * x * x)));
    }
    return detail::op_output(a.shape(), std::move(out), {a}, [=](detail::TensorNode* o) {
        auto an = a.node();
        return std::function<void()>([o, an]() {
            if (!an->wants_grad()) return;
            an->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) {
                double x = an->data[i];
                double u = kS * (x + kC * x * x * x);
                double t = std::tanh(u);
                double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kS * (1.0 + 3.0 * kC * x * x);
                an->grad[i] += o->grad[i] * d;
            }
        });
    });
}

// ---------------------------------------------------------------------------
// softmax / layernorm over an axis (softmax) or the last dim (layernorm)
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis = -1) {
    int nd = static_cast<int>(a.ndim());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ContractError("softmax: axis out of range");
    int64_t n = a.shape()[axis];
    int64_t inner = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= a.shape()[i];
    int64_t outer = a.numel() / (n * inner);
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = ou * n * inner + in;
            double mx = -INFINITY;
            for (int64_t i = 0; i < n; ++i) mx = std::max(mx, pa[base + i * inner]);
            double z = 0.0;
            for (int64_t i = 0; i < n; ++i) z += std::exp(pa[base + i * inner] - mx);
            for (int64_t i = 0; i < n; ++i) out[base + i * inner] = std::exp(pa[base + i * inner] - mx) / z;
        }
    return detail::op_output(a.shape(), std::move(out), {a}, [=](detail::TensorNode* o) {
        auto an = a.node();
        return std::function<void()>([o, an, n, inner, outer]() {
            if (!an->wants_grad()) return;
            an->ensure_grad();
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = ou * n * inner + in;
                    double dot = 0.0;
                    for (int64_t i = 0; i < n; ++i) dot += o->grad[base + i * inner] * o->data[base + i * inner];
                    for (int64_t i = 0; i < n; ++i) {
                        int64_t idx = base + i * inner;
                        an->grad[idx] += o->data[idx] * (o->grad[idx] - dot);
                    }
                }
        });
    });
}

/// Layer normalization over the last dimension with affine gamma/beta.
inline Tensor layernorm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (!(eps > 0.0)) throw ContractError("layernorm: eps must be > 0");
    int64_t d = a.shape().back();
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layernorm: gamma/beta must have " + std::to_string(d) + " entries");
    int64_t rows = a.numel() / d;
    std::vector<double> out(a.numel());
    std::vector<double> xhat(a.numel());
    std::vector<double> inv_std(rows);
    const double* pa = a.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = pa + r * d;
        double mu = 0.0;
        for (int64_t i = 0; i < d; ++i) mu += x[i];
        mu /= d;
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int64_t i = 0; i < d; ++i) {
            double xh = (x[i] - mu) * is;
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * pg[i] + pb[i];
        }
    }
    auto xhat_p = std::make_shared<std::vector<double>>(std::move(xhat));
    auto istd_p = std::make_shared<std::vector<double>>(std::move(inv_std));
    return detail::op_output(a.shape(), std::move(out), {a, gamma, beta}, [=](detail::TensorNode* o) {
        auto an = a.node(); auto gn = gamma.node(); auto bn = beta.node();
        return std::function<void()>([o, an, gn, bn, xhat_p, istd_p, rows, d]() {
            const auto& xh = *xhat_p;
            const auto& istd = *istd_p;
            if (gn->wants_grad()) {
                gn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i) gn->grad[i] += o->grad[r * d + i] * xh[r * d + i];
            }
            if (bn->wants_grad()) {
                bn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i) bn->grad[i] += o->grad[r * d + i];
            }
            if (an->wants_grad()) {
                an->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t i = 0; i < d; ++i) {
                        double gy = o->grad[r * d + i] * gn->data[i];
                        m1 += gy;
                        m2 += gy * xh[r * d + i];
                    }
                    m1 /= d;
                    m2 /= d;
                    for (int64_t i = 0; i < d; ++i) {
                        double gy = o->grad[r * d + i] * gn->data[i];
                        an->grad[r * d + i] += (gy - m1 - xh[r * d + i] * m2) * istd[r];
                    }
                }
            }
        });
    });
}

// ---------------------------------------------------------------------------
// concat / slice / reshape
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw ContractError("concat: empty tensor list");
    int nd = static_cast<int>(xs[0].ndim());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ContractError("concat: axis out of range");
    Shape out_shape = xs[0].shape();
    int64_t cat_dim = 0;
    for (const auto& x : xs) {
        if (static_cast<int>(x.ndim()) != nd) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis && x.shape()[i] != out_shape[i])
                throw ShapeError("concat: shape mismatch at non-concat dim");
        cat_dim += x.shape()[axis];
    }
    out_shape[axis] = cat_dim;
    int64_t inner = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];
    int64_t outer = shape_numel(out_shape) / (cat_dim * inner);
    std::vector<double> out(shape_numel(out_shape));
    int64_t off = 0;
    for (const auto& x : xs) {
        int64_t xi = x.shape()[axis];
        const double* px = x.data().data();
        for (int64_t ou = 0; ou < outer; ++ou)
            std::copy(px + ou * xi * inner, px + (ou + 1) * xi * inner,
                      out.data() + (ou * cat_dim + off) * inner);
        off += xi;
    }
    return detail::op_output(std::move(out_shape), std::move(out), xs, [=](detail::TensorNode* o) {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        std::vector<int64_t> sizes;
        for (const auto& x : xs) { nodes.push_back(x.node()); sizes.push_back(x.shape()[axis]); }
        return std::function<void()>([o, nodes, sizes, outer, inner, cat_dim]() {
            int64_t off = 0;
            for (size_t t = 0; t < nodes.size(); ++t) {
                auto& n = nodes[t];
                int64_t xi = sizes[t];
                if (n->wants_grad()) {
                    n->ensure_grad();
                    for (int64_t ou = 0; ou < outer; ++ou) {
                        const double* g = o->grad.data() + (ou * cat_dim + off) * inner;
                        double* dst = n->grad.data() + ou * xi * inner;
                        for (int64_t i = 0; i < xi * inner; ++i) dst[i] += g[i];
                    }
                }
                off += xi;
            }
        });
    });
}

inline Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    int nd = static_cast<int>(a.ndim());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ContractError("slice: axis out of range");
    if (start < 0 || len < 1 || start + len > a.shape()[axis])
        throw ShapeError("slice: range out of bounds");
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    int64_t inner = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= a.shape()[i];
    int64_t dim = a.shape()[axis];
    int64_t outer = a.numel() / (dim * inner);
    std::vector<double> out(shape_numel(out_shape));
    const double* pa = a.data().data();
    for (int64_t ou = 0; ou < outer; ++ou)
        std::copy(pa + (ou * dim + start) * inner, pa + (ou * dim + start + len) * inner,
                  out.data() + ou * len * inner);
    return detail::op_output(std::move(out_shape), std::move(out), {a}, [=](detail::TensorNode* o) {
        auto an = a.node();
        return std::function<void()>([o, an, outer, inner, dim, start, len]() {
            if (!an->wants_grad()) return;
            an->ensure_grad();
            for (int64_t ou = 0; ou < outer; ++ou) {
                const double* g = o->grad.data() + ou * len * inner;
                double* dst = an->grad.data() + (ou * dim + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        });
    });
}

inline Tensor reshape(const Tensor& a, const Shape& new_shape) {
    check_shape_valid(new_shape, "reshape");
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
    std::vector<double> out = a.data();
    return detail::op_output(new_shape, std::move(out), {a}, [=](detail::TensorNode* o) {
        auto an = a.node();
        return std::function<void()>([o, an]() { detail::accumulate(an.get(), o->grad); });
    });
}

// ---------------------------------------------------------------------------
// embedding lookup and row substitution
// ---------------------------------------------------------------------------

inline Tensor embed(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("embed: table must be 2-d");
    int64_t v = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw ContractError("embed: empty id list");
    for (int id : ids)
        if (id < 0 || id >= v)
            throw ContractError("embed: id " + std::to_string(id) + " outside vocab " + std::to_string(v));
    std::vector<double> out(ids.size() * d);
    const double* pt = table.data().data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(pt + ids[i] * d, pt + (ids[i] + 1) * d, out.data() + i * d);
    return detail::op_output({static_cast<int64_t>(ids.size()), d}, std::move(out), {table},
                             [=](detail::TensorNode* o) {
        auto tn = table.node();
        return std::function<void()>([o, tn, ids, d]() {
            if (!tn->wants_grad()) return;
            tn->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i) {
                const double* g = o->grad.data() + i * d;
                double* dst = tn->grad.data() + ids[i] * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
    });
}

/// Replace rows[i] of x with repl[map[i]]; gradient reaches both sides.
inline Tensor replace_rows(const Tensor& x, const std::vector<int64_t>& rows, const Tensor& repl,
                           const std::vector<int64_t>& map) {
    if (x.ndim() != 2 || repl.ndim() != 2) throw ShapeError("replace_rows: need 2-d tensors");
    if (x.dim(1) != repl.dim(1)) throw ShapeError("replace_rows: width mismatch");
    if (rows.size() != map.size()) throw ContractError("replace_rows: rows/map length mismatch");
    int64_t d = x.dim(1);
    std::vector<double> out = x.data();
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= x.dim(0)) throw ContractError("replace_rows: row out of range");
        if (map[i] < 0 || map[i] >= repl.dim(0)) throw ContractError("replace_rows: source row out of range");
        std::copy(repl.data().data() + map[i] * d, repl.data().data() + (map[i] + 1) * d,
                  out.data() + rows[i] * d);
    }
    return detail::op_output(x.shape(), std::move(out), {x, repl}, [=](detail::TensorNode* o) {
        auto xn = x.node(); auto rn = repl.node();
        return std::function<void()>([o, xn, rn, rows, map, d]() {
            if (xn->wants_grad()) {
                xn->ensure_grad();
                std::vector<bool> replaced(xn->data.size() / d, false);
                for (int64_t r : rows) replaced[r] = true;
                for (size_t r = 0; r < replaced.size(); ++r)
                    if (!replaced[r])
                        for (int64_t j = 0; j < d; ++j) xn->grad[r * d + j] += o->grad[r * d + j];
            }
            if (rn->wants_grad()) {
                rn->ensure_grad();
                for (size_t i = 0; i < rows.size(); ++i)
                    for (int64_t j = 0; j < d; ++j)
                        rn->grad[map[i] * d + j] += o->grad[rows[i] * d + j];
            }
        });
    });
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood over rows whose target != ignore_id.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int ignore_id = -100) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [N, V]");
    int64_t n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != n)
        throw ShapeError("cross_entropy: targets length != logit rows");
    int64_t kept = 0;
    for (int t : targets) {
        if (t == ignore_id) continue;
        if (t < 0 || t >= v) throw ContractError("cross_entropy: target id outside vocab");
        ++kept;
    }
    if (kept == 0) throw ContractError("cross_entropy: undefined loss, every target position is ignored");
    std::vector<double> probs(logits.numel());
    double loss = 0.0;
    const double* pl = logits.data().data();
    for (int64_t r = 0; r < n; ++r) {
        const double* row = pl + r * v;
        double mx = -INFINITY;
        for (int64_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        double logz = std::log(z) + mx;
        for (int64_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - logz);
        if (targets[r] != ignore_id) loss -= row[targets[r]] - logz;
    }
    loss /= static_cast<double>(kept);
    auto probs_p = std::make_shared<std::vector<double>>(std::move(probs));
    return detail::op_output({1}, {loss}, {logits}, [=](detail::TensorNode* o) {
        auto ln = logits.node();
        return std::function<void()>([o, ln, probs_p, targets, ignore_id, n, v, kept]() {
            if (!ln->wants_grad()) return;
            ln->ensure_grad();
            double g = o->grad[0] / static_cast<double>(kept);
            const auto& p = *probs_p;
            for (int64_t r = 0; r < n; ++r) {
                if (targets[r] == ignore_id) continue;
                for (int64_t j = 0; j < v; ++j) ln->grad[r * v + j] += g * p[r * v + j];
                ln->grad[r * v + targets[r]] -= g;
            }
        });
    });
}

// ---------------------------------------------------------------------------
// fused multi-head attention core (projections live outside)
// ---------------------------------------------------------------------------

/// softmax(Q Kᵀ/sqrt(dh)) V per head. q: [L, D], k/v: [M, D]; causal requires
/// L == M and masks keys j > i. Backward is hand-derived and grad-checked.
inline Tensor mha_core(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads, bool causal) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw ShapeError("mha_core: q/k/v must be 2-d [len, D]");
    int64_t L = q.dim(0), D = q.dim(1), M = k.dim(0);
    if (k.dim(1) != D || v.dim(1) != D || v.dim(0) != M)
        throw ShapeError("mha_core: k/v shape mismatch with q width " + std::to_string(D));
    if (n_heads < 1 || D % n_heads != 0)
        throw ShapeError("mha_core: D must be divisible by n_heads");
    if (causal && L != M) throw ContractError("mha_core: causal attention requires self-attention lengths");
    int64_t dh = D / n_heads;
    double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs_p = std::make_shared<std::vector<double>>(static_cast<size_t>(n_heads) * L * M, 0.0);
    std::vector<double> out(L * D, 0.0);
    {
        const double* pq = q.data().data();
        const double* pk = k.data().data();
        const double* pv = v.data().data();
        auto& probs = *probs_p;
        std::vector<double> srow(M);
        for (int h = 0; h < n_heads; ++h) {
            int64_t hoff = h * dh;
            for (int64_t i = 0; i < L; ++i) {
                int64_t lim = causal ? i + 1 : M;
                double mx = -INFINITY;
                for (int64_t j = 0; j < lim; ++j) {
                    double s = 0.0;
                    const double* qi = pq + i * D + hoff;
                    const double* kj = pk + j * D + hoff;
                    for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    s *= inv;
                    srow[j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (int64_t j = 0; j < lim; ++j) z += std::exp(srow[j] - mx);
                double* prow = probs.data() + (static_cast<int64_t>(h) * L + i) * M;
                for (int64_t j = 0; j < lim; ++j) prow[j] = std::exp(srow[j] - mx) / z;
                double* oi = out.data() + i * D + hoff;
                for (int64_t j = 0; j < lim; ++j) {
                    double p = prow[j];
                    const double* vj = pv + j * D + hoff;
                    for (int64_t d = 0; d < dh; ++d) oi[d] += p * vj[d];
                }
            }
        }
    }
    return detail::op_output({L, D}, std::move(out), {q, k, v}, [=](detail::TensorNode* o) {
        auto qn = q.node(); auto kn = k.node(); auto vn = v.node();
        return std::function<void()>([o, qn, kn, vn, probs_p, n_heads, causal, L, M, D, dh, inv]() {
            bool wq = qn->wants_grad(), wk = kn->wants_grad(), wv = vn->wants_grad();
            if (!wq && !wk && !wv) return;
            if (wq) qn->ensure_grad();
            if (wk) kn->ensure_grad();
            if (wv) vn->ensure_grad();
            const auto& probs = *probs_p;
            std::vector<double> dp(M), ds(M);
            for (int h = 0; h < n_heads; ++h) {
                int64_t hoff = h * dh;
                for (int64_t i = 0; i < L; ++i) {
                    int64_t lim = causal ? i + 1 : M;
                    const double* prow = probs.data() + (static_cast<int64_t>(h) * L + i) * M;
                    const double* goi = o->grad.data() + i * D + hoff;
                    // dP = dO . Vᵀ ; dS = P ⊙ (dP - <dP, P>)
                    double dot = 0.0;
                    for (int64_t j = 0; j < lim; ++j) {
                        const double* vj = vn->data.data() + j * D + hoff;
                        double s = 0.0;
                        for (int64_t d = 0; d < dh; ++d) s += goi[d] * vj[d];
                        dp[j] = s;
                        dot += s * prow[j];
                    }
                    for (int64_t j = 0; j < lim; ++j) ds[j] = prow[j] * (dp[j] - dot);
                    if (wv)
                        for (int64_t j = 0; j < lim; ++j) {
                            double p = prow[j];
                            double* gv = vn->grad.data() + j * D + hoff;
                            for (int64_t d = 0; d < dh; ++d) gv[d] += p * goi[d];
                        }
                    if (wq) {
                        double* gq = qn->grad.data() + i * D + hoff;
                        for (int64_t j = 0; j < lim; ++j) {
                            double c = ds[j] * inv;
                            const double* kj = kn->data.data() + j * D + hoff;
                            for (int64_t d = 0; d < dh; ++d) gq[d] += c * kj[d];
                        }
                    }
                    if (wk) {
                        const double* qi = qn->data.data() + i * D + hoff;
                        for (int64_t j = 0; j < lim; ++j) {
                            double c = ds[j] * inv;
                            double* gk = kn->grad.data() + j * D + hoff;
                            for (int64_t d = 0; d < dh; ++d) gk[d] += c * qi[d];
                        }
                    }
                }
            }
        });
    });
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// Coordinates listed in `skip` are excluded; callers use this to step around
/// non-differentiable points (e.g. relu inputs that are exactly 0).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5,
                         const std::vector<int64_t>& skip = {}) {
    if (!(eps >= 1e-7 && eps <= 1e-4)) throw ContractError("grad_check: eps outside [1e-7, 1e-4]");
    x.set_requires_grad(true);
    Tensor y = f(x);
    if (y.numel() != 1) throw ContractError("grad_check: f must return a scalar");
    if (x.has_grad()) x.zero_grad();
    y.backward();
    std::vector<double> analytic = x.grad();
    std::unordered_set<int64_t> skipped(skip.begin(), skip.end());
    double worst = 0.0;
    auto& data = x.mutable_data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (skipped.count(i)) continue;
        double keep = data[i];
        data[i] = keep + eps;
        double up = f(x).item();
        data[i] = keep - eps;
        double down = f(x).item();
        data[i] = keep;
        double numeric = (up - down) / (2.0 * eps);
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

inline Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape()); }

} // namespace lion
