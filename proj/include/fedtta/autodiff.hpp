#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedtta {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Graph;

// Dense 64-bit tensor. Data is immutable once constructed; ops always produce
// fresh tensors, which is what makes backward passes read-only over forward
// values. A tensor optionally points at a node of the Graph it was recorded on.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (values.size() != numel(shape_))
      throw TensorError("tensor: " + std::to_string(values.size()) + " values for shape " +
                        shape_string(shape_));
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor zeros(Shape shape) {
    std::vector<double> v(numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(v));
  }
  static Tensor full(Shape shape, double value) {
    std::vector<double> v(numel(shape), value);
    return Tensor(std::move(shape), std::move(v));
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::span<const double> values() const { return {data_->data(), data_->size()}; }
  const double* raw() const { return data_->data(); }

  double value() const {
    if (size() != 1) throw TensorError("value(): tensor " + shape_string(shape_) + " is not scalar");
    return (*data_)[0];
  }
  double at(std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t i, std::size_t j) const { return (*data_)[i * shape_[1] + j]; }

  bool is_scalar() const { return size() == 1 && rank() <= 1; }

  bool attached() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int node() const { return node_; }

  // same data, no graph link
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  friend class Graph;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Nodes are append-only and every node's parents precede
// it, so ascending index order is a topological order. A node's backward
// callback computes parent gradients *through the public ops*, which means a
// backward pass run while recording is enabled lays down new nodes — that is
// the whole second-order mechanism: gradients() with create_graph produces
// gradient tensors that are themselves differentiable.
//
// Graphs are meant to be short-lived (one per training step / adaptation
// step) and confined to a single thread.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

  Tensor leaf(const Tensor& value) {
    Tensor t = value.detached();
    t.graph_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{{}, nullptr});
    return t;
  }

  // for op implementations: attach `value` as the output of a new node
  Tensor record(Tensor value, std::vector<int> parents, BackwardFn backward) {
    value.graph_ = this;
    value.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(parents), std::move(backward)});
    return value;
  }

  bool recording() const { return pause_depth_ == 0; }
  std::size_t node_count() const { return nodes_.size(); }

  class PauseRecording {
   public:
    explicit PauseRecording(Graph& g) : graph_(g) { ++graph_.pause_depth_; }
    ~PauseRecording() { --graph_.pause_depth_; }
    PauseRecording(const PauseRecording&) = delete;
    PauseRecording& operator=(const PauseRecording&) = delete;

   private:
    Graph& graph_;
  };

  // d loss / d wrt[i] for every wrt tensor. `loss` must be a scalar recorded on
  // this graph; every wrt tensor must be attached here and reachable from the
  // loss, otherwise this is an error rather than a silent zero. A wrt tensor
  // that is reachable but receives no signal (e.g. a dead relu region) yields
  // an explicit zero gradient. allow_unreachable relaxes the reachability
  // error to an explicit zero, for callers whose objective legitimately drops
  // a parameter (a disabled loss term, a zero inner rate).
  std::vector<Tensor> gradients(const Tensor& loss, std::span<const Tensor> wrt,
                                bool create_graph, bool allow_unreachable = false);

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  int pause_depth_ = 0;
};

namespace detail {

inline Graph* common_graph(std::initializer_list<const Tensor*> inputs) {
  Graph* g = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->attached()) continue;
    if (g && g != t->graph()) throw TensorError("op: inputs attached to different graphs");
    g = t->graph();
  }
  return g;
}

// record the result if any input is attached and its graph is recording
inline Tensor finish(const char* /*op*/, Tensor result,
                     std::initializer_list<const Tensor*> inputs, Graph::BackwardFn backward) {
  Graph* g = common_graph(inputs);
  if (!g || !g->recording()) return result;
  std::vector<int> parents;
  for (const Tensor* t : inputs) parents.push_back(t->attached() ? t->node() : -1);
  return g->record(std::move(result), std::move(parents), std::move(backward));
}

[[noreturn]] inline void fail_shape(const char* op, const Tensor& a) {
  throw TensorError(std::string(op) + ": bad shape " + shape_string(a.shape()));
}
[[noreturn]] inline void fail_shape(const char* op, const Tensor& a, const Tensor& b) {
  throw TensorError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                    shape_string(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op set
//
// Backward rules are written in terms of these same ops so that any gradient
// tensor produced under create_graph is again differentiable. Masks and other
// piecewise-constant factors enter as detached tensors.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b);
inline Tensor transpose(const Tensor& a);
inline Tensor add(const Tensor& a, const Tensor& b);
inline Tensor subtract(const Tensor& a, const Tensor& b);
inline Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor divide(const Tensor& a, const Tensor& b);
inline Tensor scalar_mul(const Tensor& a, double c);
inline Tensor sum(const Tensor& a);
inline Tensor broadcast_scalar(const Tensor& s, Shape shape);
inline Tensor sum_rows(const Tensor& a);
inline Tensor tile_rows(const Tensor& v, std::size_t m);
inline Tensor row_sum(const Tensor& a);
inline Tensor tile_cols(const Tensor& v, std::size_t n);
inline Tensor reshape(const Tensor& a, Shape shape);
inline Tensor relu(const Tensor& a);
inline Tensor exp(const Tensor& a);

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    detail::fail_shape("matmul", a, b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t i = 0; i < m; ++i) {
    double* po = out.data() + i * n;
    const double* pai = pa + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pai[p];
      const double* pbp = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) po[j] += av * pbp[j];
    }
  }
  return detail::finish("matmul", Tensor({m, n}, std::move(out)), {&a, &b},
                        [a, b](const Tensor& g) -> std::vector<Tensor> {
                          return {matmul(g, transpose(b)), matmul(transpose(a), g)};
                        });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) detail::fail_shape("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const double* pa = a.raw();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
  return detail::finish("transpose", Tensor({n, m}, std::move(out)), {&a},
                        [](const Tensor& g) -> std::vector<Tensor> { return {transpose(g)}; });
}

// same-shape add, or [m,n] + [n] broadcast over the leading axis
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    const double* pa = a.raw();
    const double* pb = b.raw();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return detail::finish("add", Tensor(a.shape(), std::move(out)), {&a, &b},
                          [](const Tensor& g) -> std::vector<Tensor> { return {g, g}; });
  }
  if (a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0]) {
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    const double* pa = a.raw();
    const double* pb = b.raw();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = pa[i * n + j] + pb[j];
    return detail::finish("add", Tensor({m, n}, std::move(out)), {&a, &b},
                          [](const Tensor& g) -> std::vector<Tensor> {
                            return {g, sum_rows(g)};
                          });
  }
  detail::fail_shape("add", a, b);
}

inline Tensor subtract(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::fail_shape("subtract", a, b);
  std::vector<double> out(a.size());
  const double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  return detail::finish("subtract", Tensor(a.shape(), std::move(out)), {&a, &b},
                        [](const Tensor& g) -> std::vector<Tensor> {
                          return {g, scalar_mul(g, -1.0)};
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::fail_shape("mul", a, b);
  std::vector<double> out(a.size());
  const double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  return detail::finish("mul", Tensor(a.shape(), std::move(out)), {&a, &b},
                        [a, b](const Tensor& g) -> std::vector<Tensor> {
                          return {mul(g, b), mul(g, a)};
                        });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::fail_shape("divide", a, b);
  std::vector<double> out(a.size());
  const double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] / pb[i];
  return detail::finish("divide", Tensor(a.shape(), std::move(out)), {&a, &b},
                        [a, b](const Tensor& g) -> std::vector<Tensor> {
                          Tensor da = divide(g, b);
                          return {da, scalar_mul(mul(da, divide(a, b)), -1.0)};
                        });
}

inline Tensor scalar_mul(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const double* pa = a.raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
  return detail::finish("scalar_mul", Tensor(a.shape(), std::move(out)), {&a},
                        [c](const Tensor& g) -> std::vector<Tensor> {
                          return {scalar_mul(g, c)};
                        });
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return detail::finish("sum", Tensor::scalar(total), {&a},
                        [shape = a.shape()](const Tensor& g) -> std::vector<Tensor> {
                          return {broadcast_scalar(g, shape)};
                        });
}

inline Tensor mean(const Tensor& a) { return scalar_mul(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor broadcast_scalar(const Tensor& s, Shape shape) {
  if (s.size() != 1) detail::fail_shape("broadcast_scalar", s);
  std::vector<double> out(numel(shape), s.at(0));
  return detail::finish("broadcast_scalar", Tensor(std::move(shape), std::move(out)), {&s},
                        [](const Tensor& g) -> std::vector<Tensor> { return {sum(g)}; });
}

// [m,n] -> [n], sum over the leading axis
inline Tensor sum_rows(const Tensor& a) {
  if (a.rank() != 2) detail::fail_shape("sum_rows", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(n, 0.0);
  const double* pa = a.raw();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += pa[i * n + j];
  return detail::finish("sum_rows", Tensor({n}, std::move(out)), {&a},
                        [m](const Tensor& g) -> std::vector<Tensor> { return {tile_rows(g, m)}; });
}

// [n] -> [m,n]
inline Tensor tile_rows(const Tensor& v, std::size_t m) {
  if (v.rank() != 1) detail::fail_shape("tile_rows", v);
  const std::size_t n = v.shape()[0];
  std::vector<double> out(m * n);
  const double* pv = v.raw();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = pv[j];
  return detail::finish("tile_rows", Tensor({m, n}, std::move(out)), {&v},
                        [](const Tensor& g) -> std::vector<Tensor> { return {sum_rows(g)}; });
}

// [m,n] -> [m], sum over the last axis
inline Tensor row_sum(const Tensor& a) {
  if (a.rank() != 2) detail::fail_shape("row_sum", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m, 0.0);
  const double* pa = a.raw();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += pa[i * n + j];
    out[i] = acc;
  }
  return detail::finish("row_sum", Tensor({m}, std::move(out)), {&a},
                        [n](const Tensor& g) -> std::vector<Tensor> { return {tile_cols(g, n)}; });
}

// [m] -> [m,n]
inline Tensor tile_cols(const Tensor& v, std::size_t n) {
  if (v.rank() != 1) detail::fail_shape("tile_cols", v);
  const std::size_t m = v.shape()[0];
  std::vector<double> out(m * n);
  const double* pv = v.raw();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = pv[i];
  return detail::finish("tile_cols", Tensor({m, n}, std::move(out)), {&v},
                        [](const Tensor& g) -> std::vector<Tensor> { return {row_sum(g)}; });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw TensorError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return detail::finish("reshape", Tensor(std::move(shape), std::move(out)), {&a},
                        [shape_in = a.shape()](const Tensor& g) -> std::vector<Tensor> {
                          return {reshape(g, shape_in)};
                        });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  std::vector<double> mask(a.size());
  const double* pa = a.raw();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool pos = pa[i] > 0.0;
    out[i] = pos ? pa[i] : 0.0;
    mask[i] = pos ? 1.0 : 0.0;
  }
  Tensor mask_t(a.shape(), std::move(mask));
  return detail::finish("relu", Tensor(a.shape(), std::move(out)), {&a},
                        [mask_t](const Tensor& g) -> std::vector<Tensor> {
                          return {mul(g, mask_t)};
                        });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  const double* pa = a.raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(pa[i]);
  return detail::finish("exp", Tensor(a.shape(), std::move(out)), {&a},
                        [a](const Tensor& g) -> std::vector<Tensor> {
                          // recomputed through the op so the rule stays differentiable
                          return {mul(g, exp(a))};
                        });
}

constexpr double kLogClampEps = 1e-12;

// log(max(a, eps)); gradient is 1/a above the clamp and 0 below it, so
// saturated probabilities do not produce infinities
inline Tensor log_clamped(const Tensor& a) {
  const std::size_t n = a.size();
  std::vector<double> out(n), mask(n), safe(n);
  const double* pa = a.raw();
  for (std::size_t i = 0; i < n; ++i) {
    const bool live = pa[i] > kLogClampEps;
    out[i] = std::log(live ? pa[i] : kLogClampEps);
    mask[i] = live ? 1.0 : 0.0;
    safe[i] = live ? 0.0 : 1.0;
  }
  Tensor mask_t(a.shape(), std::move(mask));
  Tensor fill_t(a.shape(), std::move(safe));
  return detail::finish("log_clamped", Tensor(a.shape(), std::move(out)), {&a},
                        [a, mask_t, fill_t](const Tensor& g) -> std::vector<Tensor> {
                          // denominator: a where live, 1 where clamped
                          Tensor denom = add(mul(a, mask_t), fill_t);
                          return {divide(mul(g, mask_t), denom)};
                        });
}

// sqrt with a guarded gradient: d(sqrt)=0.5/sqrt collapses to 0 at 0, which is
// the subgradient convention the personalization loss relies on when the
// adaptation net outputs exactly zero
inline Tensor sqrt_guarded(const Tensor& a) {
  const std::size_t n = a.size();
  std::vector<double> out(n), half(n), safe(n);
  const double* pa = a.raw();
  for (std::size_t i = 0; i < n; ++i) {
    if (pa[i] < 0.0) throw TensorError("sqrt_guarded: negative input");
    out[i] = std::sqrt(pa[i]);
    const bool live = out[i] > 0.0;
    half[i] = live ? 0.5 : 0.0;
    safe[i] = live ? 0.0 : 1.0;
  }
  Tensor half_t(a.shape(), std::move(half));
  Tensor fill_t(a.shape(), std::move(safe));
  return detail::finish("sqrt_guarded", Tensor(a.shape(), std::move(out)), {&a},
                        [a, half_t, fill_t](const Tensor& g) -> std::vector<Tensor> {
                          Tensor root = sqrt_guarded(a);
                          Tensor denom = add(root, fill_t);
                          return {divide(mul(g, half_t), denom)};
                        });
}

namespace detail {

// per-row max as a detached tensor; subtracting it stabilizes softmax without
// contributing gradient (it is locally constant)
inline Tensor row_max_detached(const Tensor& z) {
  const std::size_t m = z.shape()[0], n = z.shape()[1];
  std::vector<double> out(m);
  const double* p = z.raw();
  for (std::size_t i = 0; i < m; ++i) {
    double best = p[i * n];
    for (std::size_t j = 1; j < n; ++j) best = std::max(best, p[i * n + j]);
    out[i] = best;
  }
  return Tensor({m}, std::move(out));
}

inline void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2 || t.shape()[0] == 0 || t.shape()[1] == 0) fail_shape(op, t);
}

inline void require_probability_rows(const char* op, const Tensor& p) {
  require_matrix(op, p);
  const std::size_t m = p.shape()[0], n = p.shape()[1];
  const double* v = p.raw();
  for (std::size_t i = 0; i < m; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (v[i * n + j] < -1e-12)
        throw std::domain_error(std::string(op) + ": negative probability in row " +
                                std::to_string(i));
      total += v[i * n + j];
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw std::domain_error(std::string(op) + ": row " + std::to_string(i) +
                              " sums to " + std::to_string(total) + ", not 1");
  }
}

}  // namespace detail

// row-wise softmax over the last axis, max-subtraction stabilized
inline Tensor softmax(const Tensor& z) {
  detail::require_matrix("softmax", z);
  const std::size_t n = z.shape()[1];
  Tensor shifted = subtract(z, tile_cols(detail::row_max_detached(z), n));
  Tensor e = exp(shifted);
  return divide(e, tile_cols(row_sum(e), n));
}

inline Tensor log_softmax(const Tensor& z) {
  detail::require_matrix("log_softmax", z);
  const std::size_t n = z.shape()[1];
  Tensor shifted = subtract(z, tile_cols(detail::row_max_detached(z), n));
  // row_sum(exp(shifted)) >= 1 because the max entry contributes exp(0)
  Tensor lse = log_clamped(row_sum(exp(shifted)));
  return subtract(shifted, tile_cols(lse, n));
}

// Euclidean norm of all entries
inline Tensor l2_norm(const Tensor& a) {
  return sqrt_guarded(sum(mul(a, a)));
}

// mean negative log-likelihood of integer labels under the logits
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_matrix("cross_entropy", logits);
  const std::size_t m = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != m)
    throw TensorError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(m) + " rows");
  std::vector<double> onehot(m * c, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw TensorError("cross_entropy: label " + std::to_string(labels[i]) +
                        " out of range for " + std::to_string(c) + " classes");
    onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Tensor picked = mul(log_softmax(logits), Tensor({m, c}, std::move(onehot)));
  return scalar_mul(sum(picked), -1.0 / static_cast<double>(m));
}

// per-row KL(p || q); terms with p <= clamp epsilon contribute zero
inline Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  detail::require_probability_rows("kl_divergence", p);
  detail::require_probability_rows("kl_divergence", q);
  if (p.shape() != q.shape()) detail::fail_shape("kl_divergence", p, q);
  std::vector<double> mask(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) mask[i] = p.at(i) > kLogClampEps ? 1.0 : 0.0;
  Tensor mask_t(p.shape(), std::move(mask));
  Tensor terms = mul(mul(p, mask_t), subtract(log_clamped(p), log_clamped(q)));
  return row_sum(terms);
}

// per-row Shannon entropy (natural log); p log p -> 0 below the clamp epsilon
inline Tensor entropy(const Tensor& p) {
  detail::require_probability_rows("entropy", p);
  std::vector<double> mask(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) mask[i] = p.at(i) > kLogClampEps ? 1.0 : 0.0;
  Tensor mask_t(p.shape(), std::move(mask));
  return scalar_mul(row_sum(mul(mul(p, mask_t), log_clamped(p))), -1.0);
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

inline std::vector<Tensor> Graph::gradients(const Tensor& loss, std::span<const Tensor> wrt,
                                            bool create_graph, bool allow_unreachable) {
  if (!loss.attached() || loss.graph() != this)
    throw TensorError("grad: loss is not attached to this graph");
  if (!loss.is_scalar())
    throw TensorError("grad: loss must be scalar, got " + shape_string(loss.shape()));
  for (const Tensor& t : wrt)
    if (!t.attached() || t.graph() != this)
      throw TensorError("grad: wrt tensor is not attached to the loss graph");

  const int loss_node = loss.node();

  // reachability: which nodes can influence the loss
  std::vector<char> reachable(static_cast<std::size_t>(loss_node) + 1, 0);
  reachable[static_cast<std::size_t>(loss_node)] = 1;
  for (int i = loss_node; i >= 0; --i) {
    if (!reachable[static_cast<std::size_t>(i)]) continue;
    for (int p : nodes_[static_cast<std::size_t>(i)].parents)
      if (p >= 0) reachable[static_cast<std::size_t>(p)] = 1;
  }
  if (!allow_unreachable)
    for (const Tensor& t : wrt)
      if (t.node() > loss_node || !reachable[static_cast<std::size_t>(t.node())])
        throw TensorError("grad: wrt tensor is unreachable from the loss");

  std::optional<PauseRecording> pause;
  if (!create_graph) pause.emplace(*this);

  std::vector<Tensor> acc(static_cast<std::size_t>(loss_node) + 1);
  acc[static_cast<std::size_t>(loss_node)] = Tensor::scalar(1.0);

  // nodes appended by backward callbacks under create_graph land above
  // loss_node and are never revisited by this pass; the callbacks can
  // reallocate nodes_, so the fields are copied out before invoking
  for (int i = loss_node; i >= 0; --i) {
    const Tensor g = acc[static_cast<std::size_t>(i)];
    if (!g.defined()) continue;
    const std::vector<int> parents = nodes_[static_cast<std::size_t>(i)].parents;
    const BackwardFn backward = nodes_[static_cast<std::size_t>(i)].backward;
    if (!backward) continue;
    std::vector<Tensor> parent_grads = backward(g);
    for (std::size_t k = 0; k < parents.size(); ++k) {
      const int p = parents[k];
      if (p < 0) continue;
      Tensor& slot = acc[static_cast<std::size_t>(p)];
      slot = slot.defined() ? add(slot, parent_grads[k]) : parent_grads[k];
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    if (t.node() > loss_node) {
      out.push_back(Tensor::zeros(t.shape()));
      continue;
    }
    Tensor& g = acc[static_cast<std::size_t>(t.node())];
    out.push_back(g.defined() ? g : Tensor::zeros(t.shape()));
  }
  return out;
}

// d loss / d wrt. With create_graph the returned gradients are recorded on the
// same graph and can be differentiated again.
inline std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt,
                                bool create_graph = false) {
  if (!loss.attached()) throw TensorError("grad: loss is not attached to a graph");
  return loss.graph()->gradients(loss, wrt, create_graph);
}

inline Tensor grad_single(const Tensor& loss, const Tensor& wrt, bool create_graph = false) {
  return grad(loss, std::span<const Tensor>(&wrt, 1), create_graph)[0];
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

// central differences (f(p+h e) - f(p-h e)) / 2h, coordinate by coordinate.
// `f` takes the full parameter list (detached tensors) and returns a scalar.
inline std::vector<Tensor> finite_diff_grad(
    const std::function<double(std::span<const Tensor>)>& f, std::span<const Tensor> params,
    double h = 1e-5) {
  if (!(h > 0.0)) throw TensorError("finite_diff_grad: h must be positive");
  std::vector<Tensor> base(params.begin(), params.end());
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t t = 0; t < base.size(); ++t) {
    std::vector<double> g(base[t].size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      std::vector<double> bumped(base[t].values().begin(), base[t].values().end());
      const double saved = bumped[i];
      bumped[i] = saved + h;
      base[t] = Tensor(params[t].shape(), bumped);
      const double up = f(base);
      bumped[i] = saved - h;
      base[t] = Tensor(params[t].shape(), bumped);
      const double down = f(base);
      bumped[i] = saved;
      base[t] = Tensor(params[t].shape(), std::move(bumped));
      if (!std::isfinite(up) || !std::isfinite(down))
        throw TensorError("finite_diff_grad: objective returned a non-finite value");
      g[i] = (up - down) / (2.0 * h);
    }
    out.emplace_back(params[t].shape(), std::move(g));
  }
  return out;
}

}  // namespace fedtta
