#pragma once

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

#include "maeclip/errors.hpp"
#include "maeclip/rng.hpp"

namespace maeclip {

// ---------------------------------------------------------------------------
// Dense double-precision tensor participating in a reverse-mode autodiff
// graph. A Tensor is a cheap handle onto a shared node; operations never
// mutate their inputs and record enough structure to run backward() later.
//
// Supported ranks are 1 and 2 (vectors and matrices); scalars are shape {1}.
// The recorded graph is ordered by a monotonically increasing sequence
// number assigned at creation, so backward traversal in decreasing sequence
// order visits every op after all of its consumers.
// ---------------------------------------------------------------------------

class Tensor;

namespace detail {

struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward reaches this node
    bool requires_grad = false;
    bool needs_grad = false;  // requires_grad, or depends on a node that does
    uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // accumulates node.grad into parents
};

inline uint64_t next_seq() {
    static std::atomic<uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(std::vector<double> data, std::vector<int> shape, bool requires_grad = false) {
        validate_shape(shape);
        if (detail::shape_numel(shape) != data.size())
            throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape");
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->needs_grad = requires_grad;
        n->seq = detail::next_seq();
        return Tensor(std::move(n));
    }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto count = checked_numel(shape);
        return from_data(std::vector<double>(count, 0.0), std::move(shape), requires_grad);
    }

    static Tensor ones(std::vector<int> shape, bool requires_grad = false) {
        auto count = checked_numel(shape);
        return from_data(std::vector<double>(count, 1.0), std::move(shape), requires_grad);
    }

    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false) {
        auto count = checked_numel(shape);
        return from_data(std::vector<double>(count, v), std::move(shape), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from_data({v}, {1}, requires_grad); }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        auto count = checked_numel(shape);
        std::vector<double> d(count);
        for (auto& x : d) x = rng.normal(0.0, stddev);
        return from_data(std::move(d), std::move(shape), requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<int>& shape() const { return node().shape; }
    size_t numel() const { return node().value.size(); }
    int rank() const { return static_cast<int>(node().shape.size()); }
    int rows() const { return require_2d().shape[0]; }
    int cols() const { return require_2d().shape[1]; }

    const std::vector<double>& data() const { return node().value; }
    /// Mutable access to raw values. Only for leaf tensors owned by the
    /// caller (parameter updates, finite-difference probes); never for op
    /// outputs, which other nodes may alias.
    std::vector<double>& mutable_data() { return node().value; }

    bool requires_grad() const { return node().requires_grad; }
    bool has_grad() const { return !node().grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw ContractError("tensor has no gradient (backward not run or not reached)");
        return node().grad;
    }
    void clear_grad() { node().grad.clear(); }

    double item() const {
        if (numel() != 1) throw ContractError("item() requires a single-element tensor");
        return node().value[0];
    }

    double at(int i) const { return node().value[check_flat(i)]; }
    double at(int r, int c) const {
        const auto& nd = require_2d();
        if (r < 0 || r >= nd.shape[0] || c < 0 || c >= nd.shape[1]) throw IndexError("2d access out of range");
        return nd.value[static_cast<size_t>(r) * nd.shape[1] + c];
    }

    /// Detached copy of the values as a fresh constant leaf.
    Tensor detach() const { return from_data(node().value, node().shape, false); }

    uint64_t seq() const { return node().seq; }

    detail::Node& node() const {
        if (!n_) throw ContractError("use of empty tensor handle");
        return *n_;
    }
    const std::shared_ptr<detail::Node>& node_ptr() const { return n_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

    static void validate_shape(const std::vector<int>& shape) {
        if (shape.empty() || shape.size() > 2) throw DimensionError("rank must be 1 or 2");
        for (int d : shape)
            if (d <= 0) throw DimensionError("extents must be positive");
    }
    static size_t checked_numel(const std::vector<int>& shape) {
        validate_shape(shape);
        return detail::shape_numel(shape);
    }
    const detail::Node& require_2d() const {
        const auto& nd = node();
        if (nd.shape.size() != 2) throw DimensionError("expected a rank-2 tensor");
        return nd;
    }
    size_t check_flat(int i) const {
        if (i < 0 || static_cast<size_t>(i) >= numel()) throw IndexError("flat access out of range");
        return static_cast<size_t>(i);
    }

    friend Tensor make_op(std::vector<int>, std::vector<double>, std::vector<Tensor>,
                          std::function<void(detail::Node&)>, const char*);

    std::shared_ptr<detail::Node> n_;
};

// --------------------------------------------------------------------------
// Op recording
// --------------------------------------------------------------------------

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
}

inline Tensor make_op(std::vector<int> shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backprop, const char* name) {
    check_finite(value, name);
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->seq = detail::next_seq();
    for (const auto& t : inputs) {
        n->needs_grad = n->needs_grad || t.node().needs_grad;
        n->parents.push_back(t.node_ptr());
    }
    if (n->needs_grad) n->backprop = std::move(backprop);
    return Tensor(std::move(n));
}

namespace detail {

inline std::vector<double>& ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

inline void accumulate(const std::shared_ptr<Node>& parent, const std::vector<double>& g) {
    if (!parent->needs_grad) return;
    auto& pg = ensure_grad(*parent);
    for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) throw DimensionError(std::string(op) + ": operand shapes differ");
}

}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise and structural ops
// --------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [](detail::Node& n) {
                       detail::accumulate(n.parents[0], n.grad);
                       detail::accumulate(n.parents[1], n.grad);
                   },
                   "add");
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return make_op(a.shape(), std::move(out), {a},
                   [c](detail::Node& n) {
                       std::vector<double> g(n.grad.size());
                       for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * c;
                       detail::accumulate(n.parents[0], g);
                   },
                   "scale");
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [](detail::Node& n) {
                       const auto& av = n.parents[0]->value;
                       const auto& bv = n.parents[1]->value;
                       std::vector<double> g(n.grad.size());
                       for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * bv[i];
                       detail::accumulate(n.parents[0], g);
                       for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * av[i];
                       detail::accumulate(n.parents[1], g);
                   },
                   "mul");
}

/// Broadcast multiply by a single-element tensor (gradients flow to both).
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("mul_scalar: scale must have one element");
    const double sv = s.data()[0];
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sv;
    return make_op(a.shape(), std::move(out), {a, s},
                   [](detail::Node& n) {
                       const auto& av = n.parents[0]->value;
                       const double sv = n.parents[1]->value[0];
                       std::vector<double> ga(n.grad.size());
                       double gs = 0.0;
                       for (size_t i = 0; i < ga.size(); ++i) {
                           ga[i] = n.grad[i] * sv;
                           gs += n.grad[i] * av[i];
                       }
                       detail::accumulate(n.parents[0], ga);
                       detail::accumulate(n.parents[1], {gs});
                   },
                   "mul_scalar");
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    auto saved = out;
    return make_op(a.shape(), std::move(out), {a},
                   [saved = std::move(saved)](detail::Node& n) {
                       std::vector<double> g(n.grad.size());
                       for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * saved[i];
                       detail::accumulate(n.parents[0], g);
                   },
                   "exp");
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    return make_op(a.shape(), std::move(out), {a},
                   [](detail::Node& n) {
                       const auto& av = n.parents[0]->value;
                       std::vector<double> g(n.grad.size());
                       for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] / av[i];
                       detail::accumulate(n.parents[0], g);
                   },
                   "log");
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
    return make_op(a.shape(), std::move(out), {a},
                   [](detail::Node& n) {
                       constexpr double inv_sqrt2pi = 0.3989422804014326779;
                       const auto& av = n.parents[0]->value;
                       std::vector<double> g(n.grad.size());
                       for (size_t i = 0; i < g.size(); ++i) {
                           const double x = av[i];
                           const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
                           const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                           g[i] = n.grad[i] * (cdf + x * pdf);
                       }
                       detail::accumulate(n.parents[0], g);
                   },
                   "gelu");
}

/// Elementwise min(x, cap); subgradient passes through below the cap.
inline Tensor clamp_max(const Tensor& a, double cap) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(av[i], cap);
    return make_op(a.shape(), std::move(out), {a},
                   [cap](detail::Node& n) {
                       const auto& av = n.parents[0]->value;
                       std::vector<double> g(n.grad.size());
                       for (size_t i = 0; i < g.size(); ++i) g[i] = av[i] < cap ? n.grad[i] : 0.0;
                       detail::accumulate(n.parents[0], g);
                   },
                   "clamp_max");
}

/// Add a row vector [d] to every row of a matrix [r x d].
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    const int r = m.rows(), c = m.cols();
    if (v.rank() != 1 || v.shape()[0] != c) throw DimensionError("add_rowvec: vector length must match columns");
    std::vector<double> out(m.numel());
    const auto& mv = m.data();
    const auto& vv = v.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] = mv[static_cast<size_t>(i) * c + j] + vv[j];
    return make_op({r, c}, std::move(out), {m, v},
                   [r, c](detail::Node& n) {
                       detail::accumulate(n.parents[0], n.grad);
                       std::vector<double> gv(static_cast<size_t>(c), 0.0);
                       for (int i = 0; i < r; ++i)
                           for (int j = 0; j < c; ++j) gv[j] += n.grad[static_cast<size_t>(i) * c + j];
                       detail::accumulate(n.parents[1], gv);
                   },
                   "add_rowvec");
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const int m = a.rows(), k = a.cols();
    if (b.rows() != k) throw DimensionError("matmul: inner extents differ (" + std::to_string(k) + " vs " +
                                            std::to_string(b.rows()) + ")");
    const int n = b.cols();
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int i = 0; i < m; ++i) {
        const double* arow = av.data() + static_cast<size_t>(i) * k;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = arow[p];
            const double* brow = bv.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return make_op({m, n}, std::move(out), {a, b},
                   [m, k, n](detail::Node& node) {
                       const auto& av = node.parents[0]->value;
                       const auto& bv = node.parents[1]->value;
                       const auto& g = node.grad;
                       if (node.parents[0]->needs_grad) {
                           // dA = dC * B^T
                           std::vector<double> ga(static_cast<size_t>(m) * k, 0.0);
                           for (int i = 0; i < m; ++i)
                               for (int j = 0; j < n; ++j) {
                                   const double gij = g[static_cast<size_t>(i) * n + j];
                                   const double* brow = bv.data();
                                   for (int p = 0; p < k; ++p)
                                       ga[static_cast<size_t>(i) * k + p] += gij * brow[static_cast<size_t>(p) * n + j];
                               }
                           detail::accumulate(node.parents[0], ga);
                       }
                       if (node.parents[1]->needs_grad) {
                           // dB = A^T * dC
                           std::vector<double> gb(static_cast<size_t>(k) * n, 0.0);
                           for (int p = 0; p < k; ++p)
                               for (int i = 0; i < m; ++i) {
                                   const double aip = av[static_cast<size_t>(i) * k + p];
                                   const double* grow = g.data() + static_cast<size_t>(i) * n;
                                   double* gbrow = gb.data() + static_cast<size_t>(p) * n;
                                   for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                               }
                           detail::accumulate(node.parents[1], gb);
                       }
                   },
                   "matmul");
}

inline Tensor transpose(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
    return make_op({c, r}, std::move(out), {a},
                   [r, c](detail::Node& n) {
                       std::vector<double> g(n.grad.size());
                       for (int j = 0; j < c; ++j)
                           for (int i = 0; i < r; ++i)
                               g[static_cast<size_t>(i) * c + j] = n.grad[static_cast<size_t>(j) * r + i];
                       detail::accumulate(n.parents[0], g);
                   },
                   "transpose");
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape.empty() || shape.size() > 2) throw DimensionError("reshape: rank must be 1 or 2");
    size_t count = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("reshape: extents must be positive");
        count *= static_cast<size_t>(d);
    }
    if (count != a.numel()) throw DimensionError("reshape: element count mismatch");
    return make_op(std::move(shape), a.data(), {a},
                   [](detail::Node& n) { detail::accumulate(n.parents[0], n.grad); }, "reshape");
}

/// Concatenate rank-2 tensors along axis 0 (stack rows) or axis 1 (stack
/// columns). All inputs must agree on the other extent.
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
    const int other = axis == 0 ? parts[0].cols() : parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        if ((axis == 0 ? p.cols() : p.rows()) != other) throw DimensionError("concat: mismatched extents");
        total += axis == 0 ? p.rows() : p.cols();
    }
    const int r = axis == 0 ? total : other;
    const int c = axis == 0 ? other : total;
    std::vector<double> out(static_cast<size_t>(r) * c);
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const auto& pv = p.data();
        if (axis == 0) {
            std::copy(pv.begin(), pv.end(), out.begin() + static_cast<size_t>(off) * c);
            off += p.rows();
        } else {
            const int pc = p.cols();
            for (int i = 0; i < r; ++i)
                std::copy(pv.begin() + static_cast<size_t>(i) * pc, pv.begin() + static_cast<size_t>(i + 1) * pc,
                          out.begin() + static_cast<size_t>(i) * c + off);
            off += pc;
        }
    }
    return make_op({r, c}, std::move(out), parts,
                   [axis, r, c, offsets](detail::Node& n) {
                       for (size_t pi = 0; pi < n.parents.size(); ++pi) {
                           auto& parent = n.parents[pi];
                           if (!parent->needs_grad) continue;
                           const int off = offsets[pi];
                           std::vector<double> g(parent->value.size());
                           if (axis == 0) {
                               std::copy(n.grad.begin() + static_cast<size_t>(off) * c,
                                         n.grad.begin() + static_cast<size_t>(off) * c + g.size(), g.begin());
                           } else {
                               const int pc = static_cast<int>(parent->value.size()) / r;
                               for (int i = 0; i < r; ++i)
                                   std::copy(n.grad.begin() + static_cast<size_t>(i) * c + off,
                                             n.grad.begin() + static_cast<size_t>(i) * c + off + pc,
                                             g.begin() + static_cast<size_t>(i) * pc);
                           }
                           detail::accumulate(parent, g);
                       }
                   },
                   "concat");
}

/// Contiguous range [begin, end) along axis 0 or 1 of a rank-2 tensor.
inline Tensor slice(const Tensor& a, int axis, int begin, int end) {
    const int r = a.rows(), c = a.cols();
    const int extent = axis == 0 ? r : axis == 1 ? c : throw DimensionError("slice: axis must be 0 or 1");
    if (begin < 0 || end > extent || begin >= end) throw IndexError("slice: range out of bounds");
    const int nr = axis == 0 ? end - begin : r;
    const int nc = axis == 0 ? c : end - begin;
    std::vector<double> out(static_cast<size_t>(nr) * nc);
    const auto& av = a.data();
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nc; ++j) {
            const int si = axis == 0 ? i + begin : i;
            const int sj = axis == 0 ? j : j + begin;
            out[static_cast<size_t>(i) * nc + j] = av[static_cast<size_t>(si) * c + sj];
        }
    return make_op({nr, nc}, std::move(out), {a},
                   [axis, begin, r, c, nr, nc](detail::Node& n) {
                       std::vector<double> g(static_cast<size_t>(r) * c, 0.0);
                       for (int i = 0; i < nr; ++i)
                           for (int j = 0; j < nc; ++j) {
                               const int si = axis == 0 ? i + begin : i;
                               const int sj = axis == 0 ? j : j + begin;
                               g[static_cast<size_t>(si) * c + sj] = n.grad[static_cast<size_t>(i) * nc + j];
                           }
                       detail::accumulate(n.parents[0], g);
                   },
                   "slice");
}

/// Gather rows by index (rows may repeat). Backward scatter-adds.
inline Tensor take_rows(const Tensor& a, const std::vector<int>& rows) {
    const int r = a.rows(), c = a.cols();
    if (rows.empty()) throw IndexError("take_rows: empty index list");
    for (int ri : rows)
        if (ri < 0 || ri >= r) throw IndexError("take_rows: row index " + std::to_string(ri) + " out of range");
    std::vector<double> out(rows.size() * static_cast<size_t>(c));
    const auto& av = a.data();
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(av.begin() + static_cast<size_t>(rows[i]) * c, av.begin() + static_cast<size_t>(rows[i] + 1) * c,
                  out.begin() + i * c);
    return make_op({static_cast<int>(rows.size()), c}, std::move(out), {a},
                   [rows, r, c](detail::Node& n) {
                       std::vector<double> g(static_cast<size_t>(r) * c, 0.0);
                       for (size_t i = 0; i < rows.size(); ++i)
                           for (int j = 0; j < c; ++j)
                               g[static_cast<size_t>(rows[i]) * c + j] += n.grad[i * c + j];
                       detail::accumulate(n.parents[0], g);
                   },
                   "take_rows");
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return make_op({1}, {s}, {a},
                   [](detail::Node& n) {
                       std::vector<double> g(n.parents[0]->value.size(), n.grad[0]);
                       detail::accumulate(n.parents[0], g);
                   },
                   "sum");
}

inline Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    const double inv = 1.0 / static_cast<double>(a.numel());
    return make_op({1}, {s * inv}, {a},
                   [inv](detail::Node& n) {
                       std::vector<double> g(n.parents[0]->value.size(), n.grad[0] * inv);
                       detail::accumulate(n.parents[0], g);
                   },
                   "mean");
}

/// Column means over the rows of a matrix [r x d] -> [d].
inline Tensor mean_rows(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(c), 0.0);
    const auto& av = a.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[j] += av[static_cast<size_t>(i) * c + j];
    const double inv = 1.0 / r;
    for (auto& x : out) x *= inv;
    return make_op({c}, std::move(out), {a},
                   [r, c, inv](detail::Node& n) {
                       std::vector<double> g(static_cast<size_t>(r) * c);
                       for (int i = 0; i < r; ++i)
                           for (int j = 0; j < c; ++j) g[static_cast<size_t>(i) * c + j] = n.grad[j] * inv;
                       detail::accumulate(n.parents[0], g);
                   },
                   "mean_rows");
}

/// Column-wise maximum over the rows of a matrix [r x d] -> [d].
/// Gradient routes to the first maximal row per column.
inline Tensor max_rows(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(c));
    std::vector<int> arg(static_cast<size_t>(c), 0);
    const auto& av = a.data();
    for (int j = 0; j < c; ++j) {
        double best = av[j];
        int bi = 0;
        for (int i = 1; i < r; ++i) {
            const double v = av[static_cast<size_t>(i) * c + j];
            if (v > best) {
                best = v;
                bi = i;
            }
        }
        out[j] = best;
        arg[j] = bi;
    }
    return make_op({c}, std::move(out), {a},
                   [arg, r, c](detail::Node& n) {
                       std::vector<double> g(static_cast<size_t>(r) * c, 0.0);
                       for (int j = 0; j < c; ++j) g[static_cast<size_t>(arg[j]) * c + j] = n.grad[j];
                       detail::accumulate(n.parents[0], g);
                   },
                   "max_rows");
}

/// Row-wise softmax of a matrix, stabilized by per-row max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (int i = 0; i < r; ++i) {
        const double* row = av.data() + static_cast<size_t>(i) * c;
        double* orow = out.data() + static_cast<size_t>(i) * c;
        const double mx = *std::max_element(row, row + c);
        double denom = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (int j = 0; j < c; ++j) orow[j] /= denom;
    }
    auto saved = out;
    return make_op({r, c}, std::move(out), {a},
                   [saved = std::move(saved), r, c](detail::Node& n) {
                       std::vector<double> g(n.grad.size());
                       for (int i = 0; i < r; ++i) {
                           const double* y = saved.data() + static_cast<size_t>(i) * c;
                           const double* gy = n.grad.data() + static_cast<size_t>(i) * c;
                           double dot = 0.0;
                           for (int j = 0; j < c; ++j) dot += gy[j] * y[j];
                           for (int j = 0; j < c; ++j) g[static_cast<size_t>(i) * c + j] = (gy[j] - dot) * y[j];
                       }
                       detail::accumulate(n.parents[0], g);
                   },
                   "softmax_rows");
}

/// Mean over rows of -log softmax(logits)[target], max-subtraction stabilized.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    const int n = logits.rows(), classes = logits.cols();
    if (static_cast<int>(targets.size()) != n)
        throw DimensionError("softmax_cross_entropy: target count must equal logit rows");
    for (int t : targets)
        if (t < 0 || t >= classes) throw IndexError("softmax_cross_entropy: target out of range");
    const auto& lv = logits.data();
    std::vector<double> probs(lv.size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = lv.data() + static_cast<size_t>(i) * classes;
        double* prow = probs.data() + static_cast<size_t>(i) * classes;
        const double mx = *std::max_element(row, row + classes);
        double denom = 0.0;
        for (int j = 0; j < classes; ++j) {
            prow[j] = std::exp(row[j] - mx);
            denom += prow[j];
        }
        for (int j = 0; j < classes; ++j) prow[j] /= denom;
        loss -= std::log(prow[targets[i]]);
    }
    loss /= n;
    return make_op({1}, {loss}, {logits},
                   [probs = std::move(probs), targets, n, classes](detail::Node& node) {
                       const double gscale = node.grad[0] / n;
                       std::vector<double> g(probs.size());
                       for (int i = 0; i < n; ++i)
                           for (int j = 0; j < classes; ++j) {
                               const double onehot = j == targets[i] ? 1.0 : 0.0;
                               g[static_cast<size_t>(i) * classes + j] =
                                   gscale * (probs[static_cast<size_t>(i) * classes + j] - onehot);
                           }
                       detail::accumulate(node.parents[0], g);
                   },
                   "softmax_cross_entropy");
}

/// Per-row layer normalization with affine output. Population variance,
/// normalizer sqrt(var + eps).
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    const int r = x.rows(), d = x.cols();
    if (d == 0) throw DimensionError("layernorm: feature dimension must be >= 1");
    if (eps <= 0.0) throw ConfigError("layernorm: eps must be positive");
    if (gain.rank() != 1 || gain.shape()[0] != d || bias.rank() != 1 || bias.shape()[0] != d)
        throw DimensionError("layernorm: gain/bias length must match feature dimension");
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    std::vector<double> out(xv.size());
    std::vector<double> xhat(xv.size());
    std::vector<double> inv_std(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const double* row = xv.data() + static_cast<size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < d; ++j) {
            const double xh = (row[j] - mu) * is;
            xhat[static_cast<size_t>(i) * d + j] = xh;
            out[static_cast<size_t>(i) * d + j] = gv[j] * xh + bv[j];
        }
    }
    return make_op({r, d}, std::move(out), {x, gain, bias},
                   [xhat = std::move(xhat), inv_std = std::move(inv_std), r, d](detail::Node& n) {
                       const auto& gv = n.parents[1]->value;
                       std::vector<double> gx(static_cast<size_t>(r) * d);
                       std::vector<double> ggain(static_cast<size_t>(d), 0.0);
                       std::vector<double> gbias(static_cast<size_t>(d), 0.0);
                       for (int i = 0; i < r; ++i) {
                           const double* gy = n.grad.data() + static_cast<size_t>(i) * d;
                           const double* xh = xhat.data() + static_cast<size_t>(i) * d;
                           double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                           for (int j = 0; j < d; ++j) {
                               const double dxh = gy[j] * gv[j];
                               sum_dxhat += dxh;
                               sum_dxhat_xhat += dxh * xh[j];
                               ggain[j] += gy[j] * xh[j];
                               gbias[j] += gy[j];
                           }
                           const double is = inv_std[i];
                           for (int j = 0; j < d; ++j) {
                               const double dxh = gy[j] * gv[j];
                               gx[static_cast<size_t>(i) * d + j] =
                                   is * (dxh - sum_dxhat / d - xh[j] * sum_dxhat_xhat / d);
                           }
                       }
                       detail::accumulate(n.parents[0], gx);
                       detail::accumulate(n.parents[1], ggain);
                       detail::accumulate(n.parents[2], gbias);
                   },
                   "layernorm");
}

/// Row-wise l2 normalization: y = x / max(|x|, eps), applied per row for
/// rank-2 input or to the whole vector for rank-1. Vectors longer than eps
/// come out exactly unit-norm; shorter ones are scaled linearly.
inline Tensor l2_normalize(const Tensor& x, double eps = 1e-8) {
    const bool vec = x.rank() == 1;
    const int r = vec ? 1 : x.rows();
    const int d = vec ? x.shape()[0] : x.cols();
    const auto& xv = x.data();
    std::vector<double> out(xv.size());
    std::vector<double> norms(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const double* row = xv.data() + static_cast<size_t>(i) * d;
        double sq = 0.0;
        for (int j = 0; j < d; ++j) sq += row[j] * row[j];
        const double nrm = std::sqrt(sq);
        norms[i] = nrm;
        const double inv = 1.0 / std::max(nrm, eps);
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] = row[j] * inv;
    }
    return make_op(x.shape(), std::move(out), {x},
                   [norms = std::move(norms), r, d, eps](detail::Node& n) {
                       const auto& xv = n.parents[0]->value;
                       std::vector<double> g(xv.size());
                       for (int i = 0; i < r; ++i) {
                           const double* row = xv.data() + static_cast<size_t>(i) * d;
                           const double* gy = n.grad.data() + static_cast<size_t>(i) * d;
                           const double nrm = norms[i];
                           if (nrm >= eps) {
                               double dot = 0.0;
                               for (int j = 0; j < d; ++j) dot += gy[j] * row[j];
                               const double inv = 1.0 / nrm;
                               const double corr = dot * inv * inv * inv;
                               for (int j = 0; j < d; ++j)
                                   g[static_cast<size_t>(i) * d + j] = gy[j] * inv - row[j] * corr;
                           } else {
                               for (int j = 0; j < d; ++j) g[static_cast<size_t>(i) * d + j] = gy[j] / eps;
                           }
                       }
                       detail::accumulate(n.parents[0], g);
                   },
                   "l2_normalize");
}

/// Scalar dot product of two same-shape tensors.
inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// --------------------------------------------------------------------------
// Backward
// --------------------------------------------------------------------------

/// Topologically ordered list (by creation sequence) of all nodes reachable
/// from the given root.
inline std::vector<std::shared_ptr<detail::Node>> collect_graph(const Tensor& root) {
    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::shared_ptr<detail::Node>> stack{root.node_ptr()};
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        nodes.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p);
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a->seq > b->seq; });
    return nodes;
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every reachable tensor on the path to a requires_grad leaf.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss");
    auto nodes = collect_graph(loss);
    detail::ensure_grad(loss.node())[0] += 1.0;
    for (auto& n : nodes) {
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
}

inline void zero_grad(std::vector<Tensor>& params) {
    for (auto& p : params) p.clear_grad();
}

// --------------------------------------------------------------------------
// Finite-difference gradient checking
// --------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    size_t checked_coords = 0;
};

/// Central-difference check of d(f)/d(params) against the analytic grads
/// produced by backward(f()). `f` must be a deterministic function of the
/// parameter values. At most `max_coords_per_param` coordinates per tensor
/// are sampled (all, when the tensor is small enough).
template <typename F>
GradCheckResult grad_check(F&& f, std::vector<Tensor> params, double eps = 1e-5,
                           size_t max_coords_per_param = 64, uint64_t sample_seed = 17) {
    for (auto& p : params) p.clear_grad();
    Tensor loss = f();
    if (loss.numel() != 1) throw ContractError("grad_check: f must return a scalar");
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: f returned a non-finite value");
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));

    GradCheckResult result;
    Rng rng(sample_seed);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        std::vector<size_t> coords;
        if (p.numel() <= max_coords_per_param) {
            coords.resize(p.numel());
            std::iota(coords.begin(), coords.end(), size_t{0});
        } else {
            for (size_t k = 0; k < max_coords_per_param; ++k) coords.push_back(rng.uniform_index(p.numel()));
        }
        for (size_t ci : coords) {
            auto& buf = p.mutable_data();
            const double orig = buf[ci];
            buf[ci] = orig + eps;
            const double f_plus = f().item();
            buf[ci] = orig - eps;
            const double f_minus = f().item();
            buf[ci] = orig;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
                throw NumericError("grad_check: perturbed evaluation is non-finite");
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double a = analytic[pi][ci];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            result.max_rel_err = std::max(result.max_rel_err, rel);
            ++result.checked_coords;
        }
    }
    return result;
}

}  // namespace maeclip
