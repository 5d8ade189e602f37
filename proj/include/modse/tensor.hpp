#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "modse/errors.hpp"

namespace modse {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  RowMatrix<Scalar> value;
  RowMatrix<Scalar> grad;  // 0x0 until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  // Reads the node's output gradient and accumulates into the captured inputs.
  std::function<void(const RowMatrix<Scalar>&)> backward;

  RowMatrix<Scalar>& ensure_grad() {
    if (grad.size() == 0) grad.setZero(value.rows(), value.cols());
    return grad;
  }
};

// Matrix view of a shape: leading axes collapse into rows, the last axis is columns.
inline std::pair<Index, Index> matrix_dims(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (Index d : shape) {
    if (d < 1) throw DimensionError("tensor shape entries must be >= 1, got " + shape_string(shape));
  }
  const Index cols = shape.back();
  return {shape_size(shape) / cols, cols};
}

}  // namespace detail

/// Dense row-major tensor with an optional accumulated gradient.
///
/// A Tensor is a shared handle: copies refer to the same storage. Values are
/// viewed as a matrix whose columns are the last axis and whose rows are all
/// leading axes flattened, which is the layout every op below works on.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto [rows, cols] = detail::matrix_dims(shape);
    RowMatrix<Scalar> v = RowMatrix<Scalar>::Zero(rows, cols);
    return make_leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor from_values(Shape shape, std::span<const Scalar> values, bool requires_grad = false) {
    auto [rows, cols] = detail::matrix_dims(shape);
    if (static_cast<Index>(values.size()) != rows * cols) {
      throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                           shape_string(shape));
    }
    RowMatrix<Scalar> v(rows, cols);
    std::copy(values.begin(), values.end(), v.data());
    return make_leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false) {
    return from_values(std::move(shape), std::span<const Scalar>(values.begin(), values.size()), requires_grad);
  }

  static Tensor from_matrix(RowMatrix<Scalar> m, bool requires_grad = false) {
    Shape shape{m.rows(), m.cols()};
    detail::matrix_dims(shape);
    return make_leaf(std::move(shape), std::move(m), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    RowMatrix<Scalar> m(1, 1);
    m(0, 0) = v;
    return make_leaf(Shape{1}, std::move(m), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  const RowMatrix<Scalar>& value() const { return node_->value; }
  // In-place edits are for optimizers and finite differences on leaves only.
  RowMatrix<Scalar>& mutable_value() { return node_->value; }
  std::span<const Scalar> values() const { return {node_->value.data(), static_cast<std::size_t>(size())}; }

  Scalar item() const {
    if (size() != 1) throw ArgumentError("item() on tensor of shape " + shape_string(shape()));
    return node_->value(0, 0);
  }

  bool has_grad() const { return node_->grad.size() != 0; }
  // Zero-filled when nothing has been accumulated yet.
  RowMatrix<Scalar> grad() const {
    if (has_grad()) return node_->grad;
    return RowMatrix<Scalar>::Zero(rows(), cols());
  }
  RowMatrix<Scalar>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (has_grad()) node_->grad.setZero();
  }

  const std::shared_ptr<Node>& impl() const { return node_; }

 private:
  static Tensor make_leaf(Shape shape, RowMatrix<Scalar> v, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(v);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  std::shared_ptr<Node> node_;
};

/// Recording tape. Ops append the nodes they create in execution order, so the
/// recording order is already a topological order of the computation.
template <typename Scalar>
class Graph {
 public:
  using Node = detail::Node<Scalar>;

  void record(std::shared_ptr<Node> node) { tape_.push_back(std::move(node)); }
  std::size_t size() const { return tape_.size(); }
  void clear() { tape_.clear(); }
  const std::vector<std::shared_ptr<Node>>& nodes() const { return tape_; }

 private:
  std::vector<std::shared_ptr<Node>> tape_;
};

/// Accumulates d(loss)/d(t) into every requires_grad leaf reachable from loss.
/// Leaf gradients accumulate across calls; intermediate gradients are reset.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss, Graph<Scalar>& graph) {
  if (loss.size() != 1) {
    throw ArgumentError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  for (const auto& node : graph.nodes()) {
    if (!node->is_leaf) node->grad.resize(0, 0);
  }
  const auto& root = loss.impl();
  if (!root->requires_grad) return;
  root->ensure_grad()(0, 0) += Scalar(1);
  const auto& tape = graph.nodes();
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    detail::Node<Scalar>* node = it->get();
    if (node->backward && node->grad.size() != 0) node->backward(node->grad);
  }
}

namespace detail {

template <typename Scalar>
void accumulate(const Tensor<Scalar>& t, const RowMatrix<Scalar>& g) {
  if (!t.requires_grad()) return;
  auto& dst = t.impl()->ensure_grad();
  dst += g;
}

template <typename Scalar>
bool any_requires_grad(std::initializer_list<const Tensor<Scalar>*> inputs) {
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds an op result and, when any input needs gradients, records it on the tape.
template <typename Scalar, typename Backward>
Tensor<Scalar> make_result(Graph<Scalar>& g, Shape shape, RowMatrix<Scalar> value,
                           std::initializer_list<const Tensor<Scalar>*> inputs, Backward&& bw) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  node->requires_grad = any_requires_grad<Scalar>(inputs);
  if (node->requires_grad) {
    node->backward = std::forward<Backward>(bw);
    g.record(node);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
void require_same_shape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  return std::max(x, Scalar(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

/// c(i,j) accumulates a(i,p)*b(p,j) for p = 0, 1, ... in order, the same
/// summation order as the textbook triple loop.
template <typename Scalar>
RowMatrix<Scalar> matmul_values(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b) {
  RowMatrix<Scalar> c = RowMatrix<Scalar>::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index p = 0; p < a.cols(); ++p) {
      c.row(i) += a(i, p) * b.row(p);
    }
  }
  return c;
}

template <typename Scalar>
Tensor<Scalar> matmul(Graph<Scalar>& g, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape().size() > 2 || b.shape().size() > 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  RowMatrix<Scalar> c = matmul_values(a.value(), b.value());
  Shape shape{a.rows(), b.cols()};
  return detail::make_result<Scalar>(g, std::move(shape), std::move(c), {&a, &b},
                                     [a, b](const RowMatrix<Scalar>& gout) {
                                       if (a.requires_grad()) detail::accumulate<Scalar>(a, gout * b.value().transpose());
                                       if (b.requires_grad()) detail::accumulate<Scalar>(b, a.value().transpose() * gout);
                                     });
}

template <typename Scalar>
Tensor<Scalar> add(Graph<Scalar>& g, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("add", a, b);
  return detail::make_result<Scalar>(g, a.shape(), a.value() + b.value(), {&a, &b},
                                     [a, b](const RowMatrix<Scalar>& gout) {
                                       detail::accumulate<Scalar>(a, gout);
                                       detail::accumulate<Scalar>(b, gout);
                                     });
}

template <typename Scalar>
Tensor<Scalar> mul(Graph<Scalar>& g, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("mul", a, b);
  RowMatrix<Scalar> v = a.value().cwiseProduct(b.value());
  return detail::make_result<Scalar>(g, a.shape(), std::move(v), {&a, &b},
                                     [a, b](const RowMatrix<Scalar>& gout) {
                                       if (a.requires_grad()) detail::accumulate<Scalar>(a, gout.cwiseProduct(b.value()));
                                       if (b.requires_grad()) detail::accumulate<Scalar>(b, gout.cwiseProduct(a.value()));
                                     });
}

template <typename Scalar>
Tensor<Scalar> scale(Graph<Scalar>& g, const Tensor<Scalar>& a, Scalar c) {
  return detail::make_result<Scalar>(g, a.shape(), a.value() * c, {&a},
                                     [a, c](const RowMatrix<Scalar>& gout) { detail::accumulate<Scalar>(a, gout * c); });
}

template <typename Scalar>
Tensor<Scalar> sum(Graph<Scalar>& g, const Tensor<Scalar>& a) {
  RowMatrix<Scalar> v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::make_result<Scalar>(g, Shape{1}, std::move(v), {&a}, [a](const RowMatrix<Scalar>& gout) {
    detail::accumulate<Scalar>(a, RowMatrix<Scalar>::Constant(a.rows(), a.cols(), gout(0, 0)));
  });
}

/// Column means over all rows: [n x m] -> [m].
template <typename Scalar>
Tensor<Scalar> mean_rows(Graph<Scalar>& g, const Tensor<Scalar>& a) {
  const Index n = a.rows();
  RowMatrix<Scalar> v = a.value().colwise().sum() / Scalar(n);
  return detail::make_result<Scalar>(g, Shape{a.cols()}, std::move(v), {&a}, [a, n](const RowMatrix<Scalar>& gout) {
    detail::accumulate<Scalar>(a, (gout / Scalar(n)).replicate(n, 1));
  });
}

template <typename Scalar>
Tensor<Scalar> softplus(Graph<Scalar>& g, const Tensor<Scalar>& x) {
  RowMatrix<Scalar> v = x.value().unaryExpr([](Scalar s) { return detail::softplus(s); });
  return detail::make_result<Scalar>(g, x.shape(), std::move(v), {&x}, [x](const RowMatrix<Scalar>& gout) {
    detail::accumulate<Scalar>(
        x, gout.cwiseProduct(x.value().unaryExpr([](Scalar s) { return detail::sigmoid(s); })));
  });
}

template <typename Scalar>
Tensor<Scalar> silu(Graph<Scalar>& g, const Tensor<Scalar>& x) {
  RowMatrix<Scalar> v = x.value().unaryExpr([](Scalar s) { return s * detail::sigmoid(s); });
  return detail::make_result<Scalar>(g, x.shape(), std::move(v), {&x}, [x](const RowMatrix<Scalar>& gout) {
    RowMatrix<Scalar> d = x.value().unaryExpr([](Scalar s) {
      const Scalar sg = detail::sigmoid(s);
      return sg * (Scalar(1) + s * (Scalar(1) - sg));
    });
    detail::accumulate<Scalar>(x, gout.cwiseProduct(d));
  });
}

/// Root-mean-square normalization over the last axis. `gamma` is either a
/// single learnable scalar (shape [1]) or one gain per column.
template <typename Scalar>
Tensor<Scalar> rmsnorm(Graph<Scalar>& g, const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, Scalar eps) {
  const bool scalar_gain = gamma.size() == 1;
  if (!scalar_gain && gamma.size() != x.cols()) {
    throw DimensionError("rmsnorm: gain of shape " + shape_string(gamma.shape()) + " does not fit input " +
                         shape_string(x.shape()));
  }
  const Index n = x.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_rms(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    inv_rms(r) = Scalar(1) / std::sqrt(x.value().row(r).squaredNorm() / Scalar(n) + eps);
  }
  RowMatrix<Scalar> xhat = inv_rms.asDiagonal() * x.value();
  RowMatrix<Scalar> y;
  if (scalar_gain) {
    y = xhat * gamma.item();
  } else {
    y = xhat * gamma.value().reshaped().asDiagonal();
  }
  return detail::make_result<Scalar>(
      g, x.shape(), std::move(y), {&x, &gamma},
      [x, gamma, xhat = std::move(xhat), inv_rms, scalar_gain, n](const RowMatrix<Scalar>& gout) {
        if (gamma.requires_grad()) {
          RowMatrix<Scalar> prod = gout.cwiseProduct(xhat);
          if (scalar_gain) {
            RowMatrix<Scalar> dg(1, 1);
            dg(0, 0) = prod.sum();
            detail::accumulate<Scalar>(gamma, dg);
          } else {
            RowMatrix<Scalar> dg = prod.colwise().sum();
            detail::accumulate<Scalar>(gamma, dg.reshaped(gamma.rows(), gamma.cols()));
          }
        }
        if (x.requires_grad()) {
          RowMatrix<Scalar> dxhat =
              scalar_gain ? RowMatrix<Scalar>(gout * gamma.item())
                          : RowMatrix<Scalar>(gout * gamma.value().reshaped().asDiagonal());
          RowMatrix<Scalar> dx(x.rows(), n);
          for (Index r = 0; r < x.rows(); ++r) {
            const Scalar proj = dxhat.row(r).dot(xhat.row(r)) / Scalar(n);
            dx.row(r) = (dxhat.row(r) - xhat.row(r) * proj) * inv_rms(r);
          }
          detail::accumulate<Scalar>(x, dx);
        }
      });
}

/// Row-wise softmax. Entries equal to -inf are masked and map to exactly 0.
template <typename Scalar>
RowMatrix<Scalar> softmax_values(const RowMatrix<Scalar>& x) {
  RowMatrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    if (m == -std::numeric_limits<Scalar>::infinity()) {
      throw ArgumentError("softmax: empty support (every entry of row " + std::to_string(r) + " is masked)");
    }
    Scalar total = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      const Scalar e = std::exp(x(r, c) - m);
      y(r, c) = e;
      total += e;
    }
    y.row(r) /= total;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> softmax(Graph<Scalar>& g, const Tensor<Scalar>& x) {
  RowMatrix<Scalar> y = softmax_values(x.value());
  RowMatrix<Scalar> saved = y;
  return detail::make_result<Scalar>(g, x.shape(), std::move(y), {&x},
                                     [x, y = std::move(saved)](const RowMatrix<Scalar>& gout) {
                                       RowMatrix<Scalar> dx(y.rows(), y.cols());
                                       for (Index r = 0; r < y.rows(); ++r) {
                                         const Scalar s = gout.row(r).dot(y.row(r));
                                         dx.row(r) = y.row(r).cwiseProduct((gout.row(r).array() - s).matrix());
                                       }
                                       detail::accumulate<Scalar>(x, dx);
                                     });
}

/// Indices of the k largest entries of one row, largest first. Equal values
/// rank the lower index first.
template <typename Scalar, typename Row>
std::vector<Index> topk_indices(const Row& row, Index k) {
  const Index n = row.size();
  if (k < 1 || k > n) {
    throw ArgumentError("top-k: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  }
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&row](Index a, Index b) {
    if (row(a) != row(b)) return row(a) > row(b);
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

/// Keeps the top-k entries of each row and sets the rest to -inf. The
/// selection pattern is a constant for differentiation: gradients reach the
/// retained entries unchanged and nothing else.
template <typename Scalar>
Tensor<Scalar> keep_topk(Graph<Scalar>& g, const Tensor<Scalar>& v, Index k) {
  RowMatrix<Scalar> out = RowMatrix<Scalar>::Constant(v.rows(), v.cols(), -std::numeric_limits<Scalar>::infinity());
  RowMatrix<Scalar> mask = RowMatrix<Scalar>::Zero(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    for (Index c : topk_indices<Scalar>(v.value().row(r), k)) {
      out(r, c) = v.value()(r, c);
      mask(r, c) = Scalar(1);
    }
  }
  return detail::make_result<Scalar>(g, v.shape(), std::move(out), {&v},
                                     [v, mask = std::move(mask)](const RowMatrix<Scalar>& gout) {
                                       detail::accumulate<Scalar>(v, gout.cwiseProduct(mask));
                                     });
}

template <typename Scalar>
Tensor<Scalar> transpose(Graph<Scalar>& g, const Tensor<Scalar>& a) {
  if (a.shape().size() > 2) throw DimensionError("transpose needs a matrix, got " + shape_string(a.shape()));
  RowMatrix<Scalar> v = a.value().transpose();
  return detail::make_result<Scalar>(g, Shape{a.cols(), a.rows()}, std::move(v), {&a},
                                     [a](const RowMatrix<Scalar>& gout) {
                                       detail::accumulate<Scalar>(a, gout.transpose());
                                     });
}

template <typename Scalar>
Tensor<Scalar> reshape(Graph<Scalar>& g, const Tensor<Scalar>& a, Shape shape) {
  auto [rows, cols] = detail::matrix_dims(shape);
  if (rows * cols != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  // Row-major storage is shared by both views, so reshaping only regroups it.
  RowMatrix<Scalar> v = a.value().template reshaped<Eigen::RowMajor>(rows, cols);
  const Index ar = a.rows();
  const Index ac = a.cols();
  return detail::make_result<Scalar>(g, std::move(shape), std::move(v), {&a},
                                     [a, ar, ac](const RowMatrix<Scalar>& gout) {
                                       RowMatrix<Scalar> back = gout.template reshaped<Eigen::RowMajor>(ar, ac);
                                       detail::accumulate<Scalar>(a, back);
                                     });
}

template <typename Scalar>
Tensor<Scalar> gather_rows(Graph<Scalar>& g, const Tensor<Scalar>& a, std::span<const Index> rows) {
  RowMatrix<Scalar> v(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw ArgumentError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                          shape_string(a.shape()));
    }
    v.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return detail::make_result<Scalar>(g, Shape{static_cast<Index>(rows.size()), a.cols()}, std::move(v), {&a},
                                     [a, idx = std::move(idx)](const RowMatrix<Scalar>& gout) {
                                       RowMatrix<Scalar> d = RowMatrix<Scalar>::Zero(a.rows(), a.cols());
                                       for (std::size_t i = 0; i < idx.size(); ++i) {
                                         d.row(idx[i]) += gout.row(static_cast<Index>(i));
                                       }
                                       detail::accumulate<Scalar>(a, d);
                                     });
}

/// Token embedding: rows of `table` selected by ids, with a data error for ids
/// outside the vocabulary.
template <typename Scalar>
Tensor<Scalar> embedding_lookup(Graph<Scalar>& g, const Tensor<Scalar>& table, std::span<const Index> ids) {
  for (Index id : ids) {
    if (id < 0 || id >= table.rows()) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(table.rows()));
    }
  }
  return gather_rows(g, table, ids);
}

/// out = base with src.row(i) added into row rows[i].
template <typename Scalar>
Tensor<Scalar> index_add_rows(Graph<Scalar>& g, const Tensor<Scalar>& base, const Tensor<Scalar>& src,
                              std::span<const Index> rows) {
  if (src.cols() != base.cols() || src.rows() != static_cast<Index>(rows.size())) {
    throw DimensionError("index_add_rows: source " + shape_string(src.shape()) + " does not fit base " +
                         shape_string(base.shape()) + " with " + std::to_string(rows.size()) + " row ids");
  }
  RowMatrix<Scalar> v = base.value();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= base.rows()) throw ArgumentError("index_add_rows: row id out of range");
    v.row(rows[i]) += src.value().row(static_cast<Index>(i));
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return detail::make_result<Scalar>(g, base.shape(), std::move(v), {&base, &src},
                                     [base, src, idx = std::move(idx)](const RowMatrix<Scalar>& gout) {
                                       detail::accumulate<Scalar>(base, gout);
                                       if (src.requires_grad()) {
                                         RowMatrix<Scalar> d(src.rows(), src.cols());
                                         for (std::size_t i = 0; i < idx.size(); ++i) {
                                           d.row(static_cast<Index>(i)) = gout.row(idx[i]);
                                         }
                                         detail::accumulate<Scalar>(src, d);
                                       }
                                     });
}

/// out.row(i) = a.row(i) * w[i], with w holding one weight per row.
template <typename Scalar>
Tensor<Scalar> scale_rows(Graph<Scalar>& g, const Tensor<Scalar>& a, const Tensor<Scalar>& w) {
  if (w.size() != a.rows()) {
    throw DimensionError("scale_rows: " + shape_string(w.shape()) + " weights for " + shape_string(a.shape()));
  }
  const auto wv = w.value().reshaped();
  RowMatrix<Scalar> v = wv.asDiagonal() * a.value();
  return detail::make_result<Scalar>(g, a.shape(), std::move(v), {&a, &w}, [a, w](const RowMatrix<Scalar>& gout) {
    if (a.requires_grad()) detail::accumulate<Scalar>(a, w.value().reshaped().asDiagonal() * gout);
    if (w.requires_grad()) {
      RowMatrix<Scalar> dw(w.rows(), w.cols());
      auto flat = dw.reshaped();
      for (Index i = 0; i < a.rows(); ++i) flat(i) = gout.row(i).dot(a.value().row(i));
      detail::accumulate<Scalar>(w, dw);
    }
  });
}

/// Picks a(rows[i], cols[i]) into a vector of shape [n].
template <typename Scalar>
Tensor<Scalar> gather_elements(Graph<Scalar>& g, const Tensor<Scalar>& a, std::span<const Index> rows,
                               std::span<const Index> cols) {
  if (rows.size() != cols.size() || rows.empty()) {
    throw ArgumentError("gather_elements: need equally many (non-zero) row and column ids");
  }
  const Index n = static_cast<Index>(rows.size());
  RowMatrix<Scalar> v(1, n);
  for (Index i = 0; i < n; ++i) v(0, i) = a.value()(rows[i], cols[i]);
  std::vector<Index> ri(rows.begin(), rows.end());
  std::vector<Index> ci(cols.begin(), cols.end());
  return detail::make_result<Scalar>(g, Shape{n}, std::move(v), {&a},
                                     [a, ri = std::move(ri), ci = std::move(ci)](const RowMatrix<Scalar>& gout) {
                                       RowMatrix<Scalar> d = RowMatrix<Scalar>::Zero(a.rows(), a.cols());
                                       for (std::size_t i = 0; i < ri.size(); ++i) {
                                         d(ri[i], ci[i]) += gout(0, static_cast<Index>(i));
                                       }
                                       detail::accumulate<Scalar>(a, d);
                                     });
}

/// Per-row cross entropy of `logits` against integer targets, without recording.
template <typename Scalar>
std::vector<Scalar> cross_entropy_values(const RowMatrix<Scalar>& logits, std::span<const Index> targets) {
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
  }
  std::vector<Scalar> out(targets.size());
  for (Index r = 0; r < logits.rows(); ++r) {
    const Index t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw DataError("cross_entropy: target " + std::to_string(t) + " out of range");
    const Scalar m = logits.row(r).maxCoeff();
    const Scalar lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out[static_cast<std::size_t>(r)] = lse - logits(r, t);
  }
  return out;
}

/// Mean cross entropy over rows.
template <typename Scalar>
Tensor<Scalar> cross_entropy(Graph<Scalar>& g, const Tensor<Scalar>& logits, std::span<const Index> targets) {
  const auto per_row = cross_entropy_values(logits.value(), targets);
  RowMatrix<Scalar> v(1, 1);
  v(0, 0) = std::accumulate(per_row.begin(), per_row.end(), Scalar(0)) / Scalar(per_row.size());
  std::vector<Index> tg(targets.begin(), targets.end());
  return detail::make_result<Scalar>(g, Shape{1}, std::move(v), {&logits},
                                     [logits, tg = std::move(tg)](const RowMatrix<Scalar>& gout) {
                                       RowMatrix<Scalar> d = softmax_values(logits.value());
                                       for (std::size_t r = 0; r < tg.size(); ++r) d(static_cast<Index>(r), tg[r]) -= 1;
                                       d *= gout(0, 0) / Scalar(tg.size());
                                       detail::accumulate<Scalar>(logits, d);
                                     });
}

/// Rotary position embedding on [batch*seq, heads*head_dim] activations. Within
/// each head, column i pairs with column i + head_dim/2 and the pair is rotated
/// by position * base^(-2i/head_dim).
template <typename Scalar>
Tensor<Scalar> rope(Graph<Scalar>& g, const Tensor<Scalar>& x, Index batch, Index seq, Index heads,
                    Scalar base = Scalar(10000)) {
  if (x.rows() != batch * seq || x.cols() % heads != 0 || (x.cols() / heads) % 2 != 0) {
    throw DimensionError("rope: shape " + shape_string(x.shape()) + " incompatible with batch*seq=" +
                         std::to_string(batch * seq) + ", heads=" + std::to_string(heads));
  }
  const Index head_dim = x.cols() / heads;
  const Index half = head_dim / 2;
  RowMatrix<Scalar> cos_t(seq, half), sin_t(seq, half);
  for (Index t = 0; t < seq; ++t) {
    for (Index i = 0; i < half; ++i) {
      const Scalar freq = std::pow(base, -Scalar(2 * i) / Scalar(head_dim));
      cos_t(t, i) = std::cos(Scalar(t) * freq);
      sin_t(t, i) = std::sin(Scalar(t) * freq);
    }
  }
  auto rotate = [=](const RowMatrix<Scalar>& in, Scalar direction) {
    RowMatrix<Scalar> out(in.rows(), in.cols());
    for (Index r = 0; r < in.rows(); ++r) {
      const Index t = r % seq;
      for (Index h = 0; h < heads; ++h) {
        const Index off = h * head_dim;
        for (Index i = 0; i < half; ++i) {
          const Scalar c = cos_t(t, i);
          const Scalar s = direction * sin_t(t, i);
          const Scalar a = in(r, off + i);
          const Scalar b = in(r, off + half + i);
          out(r, off + i) = a * c - b * s;
          out(r, off + half + i) = a * s + b * c;
        }
      }
    }
    return out;
  };
  RowMatrix<Scalar> v = rotate(x.value(), Scalar(1));
  return detail::make_result<Scalar>(g, x.shape(), std::move(v), {&x}, [x, rotate](const RowMatrix<Scalar>& gout) {
    detail::accumulate<Scalar>(x, rotate(gout, Scalar(-1)));
  });
}

/// Multi-head causal self-attention on [batch*seq, heads*head_dim] projections.
/// Position i attends to positions j <= i of the same sequence.
template <typename Scalar>
Tensor<Scalar> causal_attention(Graph<Scalar>& g, const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                const Tensor<Scalar>& v, Index batch, Index seq, Index heads) {
  detail::require_same_shape("causal_attention", q, k);
  detail::require_same_shape("causal_attention", q, v);
  if (q.rows() != batch * seq || q.cols() % heads != 0) {
    throw DimensionError("causal_attention: shape " + shape_string(q.shape()) + " incompatible with batch*seq=" +
                         std::to_string(batch * seq) + ", heads=" + std::to_string(heads));
  }
  const Index hd = q.cols() / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(hd));
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  // probs[b * heads + h] is the seq x seq attention matrix of that head.
  auto probs = std::make_shared<std::vector<RowMatrix<Scalar>>>(static_cast<std::size_t>(batch * heads));
  RowMatrix<Scalar> out(q.rows(), q.cols());
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = q.value().block(b * seq, h * hd, seq, hd);
      auto kb = k.value().block(b * seq, h * hd, seq, hd);
      auto vb = v.value().block(b * seq, h * hd, seq, hd);
      RowMatrix<Scalar> s = (qb * kb.transpose()) * inv_sqrt;
      for (Index i = 0; i < seq; ++i) {
        for (Index j = i + 1; j < seq; ++j) s(i, j) = neg_inf;
      }
      RowMatrix<Scalar> p = softmax_values(s);
      out.block(b * seq, h * hd, seq, hd) = p * vb;
      (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }
  return detail::make_result<Scalar>(
      g, q.shape(), std::move(out), {&q, &k, &v},
      [q, k, v, probs, batch, seq, heads, hd, inv_sqrt](const RowMatrix<Scalar>& gout) {
        RowMatrix<Scalar> dq = RowMatrix<Scalar>::Zero(q.rows(), q.cols());
        RowMatrix<Scalar> dk = RowMatrix<Scalar>::Zero(q.rows(), q.cols());
        RowMatrix<Scalar> dv = RowMatrix<Scalar>::Zero(q.rows(), q.cols());
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const auto& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
            auto qb = q.value().block(b * seq, h * hd, seq, hd);
            auto kb = k.value().block(b * seq, h * hd, seq, hd);
            auto vb = v.value().block(b * seq, h * hd, seq, hd);
            auto gb = gout.block(b * seq, h * hd, seq, hd);
            dv.block(b * seq, h * hd, seq, hd) = p.transpose() * gb;
            RowMatrix<Scalar> dp = gb * vb.transpose();
            RowMatrix<Scalar> ds(seq, seq);
            for (Index i = 0; i < seq; ++i) {
              const Scalar dot = dp.row(i).dot(p.row(i));
              ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
            }
            ds *= inv_sqrt;
            dq.block(b * seq, h * hd, seq, hd) = ds * kb;
            dk.block(b * seq, h * hd, seq, hd) = ds.transpose() * qb;
          }
        }
        detail::accumulate<Scalar>(q, dq);
        detail::accumulate<Scalar>(k, dk);
        detail::accumulate<Scalar>(v, dv);
      });
}

}  // namespace modse
