#pragma once

#include <functional>
#include <random>
#include <vector>

#include "modse/gradcheck.hpp"
#include "modse/tensor.hpp"

namespace modse::testing {

inline RowMatrix<double> random_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> dist(lo, hi);
  RowMatrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double lo = -1,
                                    double hi = 1) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>::from_values(std::move(shape), std::span<const double>(v), requires_grad);
}

// Textbook i-j-p triple loop.
template <typename Scalar>
RowMatrix<Scalar> naive_matmul(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b) {
  RowMatrix<Scalar> c(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.cols(); ++j) {
      Scalar s = 0;
      for (Index p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  }
  return c;
}

using OpFn = std::function<Tensor<double>(Graph<double>&, const std::vector<Tensor<double>>&)>;

// Worst relative error between backward() and central differences for
// loss = sum(op(inputs) * R) with a fixed random projection R.
inline double op_gradient_error(const OpFn& op, std::vector<Tensor<double>> inputs, std::uint64_t seed,
                                double h = 1e-5) {
  std::mt19937_64 rng(seed);
  Graph<double> probe;
  const auto out_shape = op(probe, inputs).shape();
  const auto proj = random_tensor(out_shape, rng, false);

  auto loss_of = [&](Graph<double>& g) { return sum(g, mul(g, op(g, inputs), proj)); };
  for (auto& t : inputs) t.zero_grad();
  Graph<double> g;
  auto loss = loss_of(g);
  backward(loss, g);

  double worst = 0;
  for (auto& x : inputs) {
    if (!x.requires_grad()) continue;
    auto numeric = finite_diff_grad(
        [&](const Tensor<double>&) {
          Graph<double> g2;
          return loss_of(g2).item();
        },
        x, h);
    worst = std::max(worst, relative_error(x.grad(), numeric.value()));
  }
  return worst;
}

}  // namespace modse::testing
