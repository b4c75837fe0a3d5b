#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation.
//
// Every op builds a node holding its value, its parents and a closure that
// pushes the node's gradient into the parents. Graphs are per-forward and
// released with the last Tensor handle that references them.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace rayfusion {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateMaskError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, M, N).noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
}

// c[m x k] += a[m x n] * b[k x n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t k) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, M, K).noalias() += ConstMap(a, M, N) * ConstMap(b, K, N).transpose();
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, K, N).noalias() += ConstMap(a, M, K).transpose() * ConstMap(b, M, N);
}

}  // namespace detail

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(detail::numel(shape), 0.0);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value) {
    std::vector<double> v(detail::numel(shape), value);
    return from(std::move(shape), std::move(v));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (detail::numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(a)];
  }
  std::size_t last() const { return node_->shape.back(); }
  std::size_t rows() const { return numel() / last(); }

  std::span<const double> data() const { return node_->value; }
  /// Writable view of a leaf's values (optimizer updates, initialization).
  std::span<double> mutable_data() { return node_->value; }
  double item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values, detached from any graph.
  Tensor detach() const { return from(shape(), node_->value); }

  /// Reverse-mode accumulation from a scalar. Leaf gradients accumulate
  /// across calls; intermediate gradients are recomputed.
  void backward() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(shape()));
  if (!node_->requires_grad) return;
  // Iterative post-order DFS for a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      detail::Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (auto* n : order)
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  bool rg = false;
  if (grad_enabled)
    for (const auto& t : inputs) rg = rg || t.requires_grad();
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline std::vector<double>& pgrad(Node& self, std::size_t i) {
  return self.parents[i]->ensure_grad();
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// True when b's shape equals a trailing slice of a's shape.
inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] * [k x n], or batched [b x m x k] * [b x k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0);
  if (!((a.rank() == 2 && b.rank() == 2) || batched) || a.dim(-1) != b.dim(-2))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t nb = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  std::vector<double> out(nb * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < nb; ++i)
    detail::gemm_nn(ad + i * m * k, bd + i * k * n, out.data() + i * m * n, m, k, n);
  Shape shape = batched ? Shape{nb, m, n} : Shape{m, n};
  return detail::make_op(std::move(shape), std::move(out), {a, b}, [nb, m, k, n](detail::Node& s) {
    const double* g = s.grad.data();
    const auto& av = s.parents[0]->value;
    const auto& bv = s.parents[1]->value;
    if (detail::wants(s, 0)) {
      auto& ga = detail::pgrad(s, 0);
      for (std::size_t i = 0; i < nb; ++i)
        detail::gemm_nt(g + i * m * n, bv.data() + i * k * n, ga.data() + i * m * k, m, n, k);
    }
    if (detail::wants(s, 1)) {
      auto& gb = detail::pgrad(s, 1);
      for (std::size_t i = 0; i < nb; ++i)
        detail::gemm_tn(av.data() + i * m * k, g + i * m * n, gb.data() + i * k * n, m, k, n);
    }
  });
}

/// x[... x k] * w[k x n] + b[n]; leading dimensions are treated as batch.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.last() != w.dim(0) || b.numel() != w.dim(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " weight " +
                         shape_str(w.shape()) + " bias " + shape_str(b.shape()));
  const std::size_t m = x.rows(), k = w.dim(0), n = w.dim(1);
  std::vector<double> out(m * n);
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) std::copy(bd.begin(), bd.end(), out.begin() + i * n);
  detail::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  Shape shape = x.shape();
  shape.back() = n;
  return detail::make_op(std::move(shape), std::move(out), {x, w, b}, [m, k, n](detail::Node& s) {
    const double* g = s.grad.data();
    if (detail::wants(s, 0))
      detail::gemm_nt(g, s.parents[1]->value.data(), detail::pgrad(s, 0).data(), m, n, k);
    if (detail::wants(s, 1))
      detail::gemm_tn(s.parents[0]->value.data(), g, detail::pgrad(s, 1).data(), m, k, n);
    if (detail::wants(s, 2)) {
      auto& gb = detail::pgrad(s, 2);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  const std::size_t r = x.dim(-2), c = x.dim(-1), nb = x.numel() / (r * c);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xd[b * r * c + i * c + j];
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return detail::make_op(std::move(shape), std::move(out), {x}, [nb, r, c](detail::Node& s) {
    auto& gx = detail::pgrad(s, 0);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += s.grad[b * r * c + j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class Fwd, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd f, Da da, Db db) {
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(std::string(name) + ": cannot combine " + shape_str(a.shape()) + " with " +
                         shape_str(b.shape()));
  const std::size_t n = a.numel(), nbv = b.numel();
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i % nbv]);
  return make_op(a.shape(), std::move(out), {a, b}, [n, nbv, da, db](Node& s) {
    const auto& av = s.parents[0]->value;
    const auto& bv = s.parents[1]->value;
    if (wants(s, 0)) {
      auto& ga = pgrad(s, 0);
      for (std::size_t i = 0; i < n; ++i) ga[i] += s.grad[i] * da(av[i], bv[i % nbv]);
    }
    if (wants(s, 1)) {
      auto& gb = pgrad(s, 1);
      for (std::size_t i = 0; i < n; ++i) gb[i % nbv] += s.grad[i] * db(av[i], bv[i % nbv]);
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd f, Deriv d) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xd[i]);
  return make_op(x.shape(), std::move(out), {x}, [n, d](Node& s) {
    auto& gx = pgrad(s, 0);
    const auto& xv = s.parents[0]->value;
    for (std::size_t i = 0; i < n; ++i) gx[i] += s.grad[i] * d(xv[i], s.value[i]);
  });
}

}  // namespace detail

/// a + b where b's shape is a trailing slice of a's (bias-style broadcast).
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

/// x[... x n] scaled row-wise by s[...] (one factor per last-axis row).
inline Tensor mul_rows(const Tensor& x, const Tensor& s) {
  const std::size_t n = x.last(), m = x.rows();
  if (s.numel() != m)
    throw DimensionError("mul_rows: " + shape_str(x.shape()) + " with " + shape_str(s.shape()));
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  const auto sd = s.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] * sd[i];
  return detail::make_op(x.shape(), std::move(out), {x, s}, [m, n](detail::Node& st) {
    const auto& xv = st.parents[0]->value;
    const auto& sv = st.parents[1]->value;
    if (detail::wants(st, 0)) {
      auto& gx = detail::pgrad(st, 0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += st.grad[i * n + j] * sv[i];
    }
    if (detail::wants(st, 1)) {
      auto& gs = detail::pgrad(st, 1);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += st.grad[i * n + j] * xv[i * n + j];
        gs[i] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (detail::numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_op(std::move(shape), std::move(out), {x}, [](detail::Node& s) {
    auto& gx = detail::pgrad(s, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s.grad[i];
  });
}

/// Concatenation along the last axis; leading dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m || p.rank() != parts.front().rank())
      throw DimensionError("concat: leading dimensions differ (" + shape_str(p.shape()) + " vs " +
                           shape_str(parts.front().shape()) + ")");
    widths.push_back(p.last());
    total += p.last();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pd = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(i * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + off));
    off += widths[k];
  }
  Shape shape = parts.front().shape();
  shape.back() = total;
  return detail::make_op(std::move(shape), std::move(out), parts,
                         [m, total, widths](detail::Node& s) {
                           std::size_t o = 0;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                             if (detail::wants(s, k)) {
                               auto& g = detail::pgrad(s, k);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < widths[k]; ++j)
                                   g[i * widths[k] + j] += s.grad[i * total + o + j];
                             }
                             o += widths[k];
                           }
                         });
}

/// Columns [begin, end) of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.last(), m = x.rows();
  if (begin >= end || end > n) throw DimensionError("slice_last: bad range on " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  const auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xd[i * n + begin + j];
  Shape shape = x.shape();
  shape.back() = w;
  return detail::make_op(std::move(shape), std::move(out), {x}, [m, n, w, begin](detail::Node& s) {
    auto& gx = detail::pgrad(s, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += s.grad[i * w + j];
  });
}

/// Selects rows (first-axis entries of a 2-D tensor) by index.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  if (x.rank() != 2) throw DimensionError("gather_rows needs a matrix");
  const std::size_t n = x.last();
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> out(idx.size() * n);
  const auto xd = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return detail::make_op({idx.size(), n}, std::move(out), {x}, [idx, n](detail::Node& s) {
    auto& gx = detail::pgrad(s, 0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) gx[idx[r] * n + j] += s.grad[r * n + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return detail::make_op({1}, {acc}, {x}, [](detail::Node& s) {
    auto& gx = detail::pgrad(s, 0);
    for (auto& g : gx) g += s.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Mean along one axis; the axis is removed from the shape (kept as 1 when
/// the result would otherwise be rank 0).
inline Tensor mean(const Tensor& x, int axis) {
  const int r = static_cast<int>(x.rank());
  const std::size_t a = static_cast<std::size_t>(axis < 0 ? axis + r : axis);
  if (a >= x.rank()) throw DimensionError("mean: axis out of range");
  const Shape& sh = x.shape();
  const std::size_t len = sh[a];
  const std::size_t inner = detail::numel(Shape(sh.begin() + static_cast<std::ptrdiff_t>(a) + 1, sh.end()));
  const std::size_t outer = x.numel() / (len * inner);
  std::vector<double> out(outer * inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xd[(o * len + l) * inner + i];
  for (auto& v : out) v /= static_cast<double>(len);
  Shape shape;
  for (std::size_t d = 0; d < sh.size(); ++d)
    if (d != a) shape.push_back(sh[d]);
  if (shape.empty()) shape.push_back(1);
  return detail::make_op(std::move(shape), std::move(out), {x}, [outer, len, inner](detail::Node& s) {
    auto& gx = detail::pgrad(s, 0);
    const double f = 1.0 / static_cast<double>(len);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] += s.grad[o * inner + i] * f;
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis`. Entries equal to -inf map to exactly 0; a slice
/// that is entirely -inf raises DegenerateMaskError.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  const std::size_t a = static_cast<std::size_t>(axis < 0 ? axis + r : axis);
  if (a >= x.rank()) throw DimensionError("softmax: axis out of range");
  const Shape& sh = x.shape();
  const std::size_t len = sh[a];
  const std::size_t inner = detail::numel(Shape(sh.begin() + static_cast<std::ptrdiff_t>(a) + 1, sh.end()));
  const std::size_t outer = x.numel() / (len * inner);
  std::vector<double> out(x.numel(), 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      auto at = [&](std::size_t l) { return (o * len + l) * inner + i; };
      double mx = kNegInf;
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xd[at(l)]);
      if (mx == kNegInf) throw DegenerateMaskError("softmax: every entry along the axis is -inf");
      double z = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = xd[at(l)] == kNegInf ? 0.0 : std::exp(xd[at(l)] - mx);
        out[at(l)] = e;
        z += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[at(l)] /= z;
    }
  return detail::make_op(x.shape(), std::move(out), {x}, [outer, len, inner](detail::Node& s) {
    auto& gx = detail::pgrad(s, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        auto at = [&](std::size_t l) { return (o * len + l) * inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += s.value[at(l)] * s.grad[at(l)];
        for (std::size_t l = 0; l < len; ++l) gx[at(l)] += s.value[at(l)] * (s.grad[at(l)] - dot);
      }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization over the last axis followed by gain/bias.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t c = x.last(), m = x.rows();
  if (gain.numel() != c || bias.numel() != c)
    throw DimensionError("layernorm: width " + std::to_string(c) + " vs gain " +
                         shape_str(gain.shape()) + " bias " + shape_str(bias.shape()));
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(m);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gd[j] + bd[j];
    }
  }
  return detail::make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [m, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& s) {
        const auto& gv = s.parents[1]->value;
        if (detail::wants(s, 0)) {
          auto& gx = detail::pgrad(s, 0);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = s.grad[i * c + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * c + j];
            }
            mean_d /= static_cast<double>(c);
            mean_dx /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const double d = s.grad[i * c + j] * gv[j];
              gx[i * c + j] += inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
            }
          }
        }
        if (detail::wants(s, 1)) {
          auto& gg = detail::pgrad(s, 1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += s.grad[i * c + j] * xhat[i * c + j];
        }
        if (detail::wants(s, 2)) {
          auto& gb = detail::pgrad(s, 2);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += s.grad[i * c + j];
        }
      });
}

}  // namespace rayfusion
