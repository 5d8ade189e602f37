#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "modse/tensor.hpp"

namespace modse {

/// Central-difference gradient of a scalar function, one coordinate at a time.
/// `x` is perturbed in place and restored before returning.
inline Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                                       double h) {
  if (!(h > 0)) throw ArgumentError("finite_diff_grad: step must be positive");
  RowMatrix<double> out(x.rows(), x.cols());
  auto& v = x.mutable_value();
  for (Index i = 0; i < v.size(); ++i) {
    const double saved = v.data()[i];
    v.data()[i] = saved + h;
    const double up = f(x);
    v.data()[i] = saved - h;
    const double down = f(x);
    v.data()[i] = saved;
    out.data()[i] = (up - down) / (2 * h);
  }
  return Tensor<double>::from_values(x.shape(), std::span<const double>(out.data(), out.size()));
}

/// ||a - b|| / max(||a||, ||b||), with a floor that keeps all-zero pairs at 0.
template <typename Derived1, typename Derived2>
double relative_error(const Eigen::MatrixBase<Derived1>& a, const Eigen::MatrixBase<Derived2>& b) {
  const double diff = (a - b).norm();
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return diff / scale;
}

}  // namespace modse
