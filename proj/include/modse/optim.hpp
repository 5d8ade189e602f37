#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "modse/config.hpp"
#include "modse/tensor.hpp"

namespace modse {

/// Linear warmup lr_init -> lr_peak, cosine decay to lr_min at total_steps,
/// then constant lr_min.
inline double lr_at(long long step, const OptimizerConfig& cfg) {
  if (step < cfg.warmup_steps) {
    return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * static_cast<double>(step) / cfg.warmup_steps;
  }
  if (step >= cfg.total_steps || cfg.total_steps == cfg.warmup_steps) {
    return step == cfg.warmup_steps ? cfg.lr_peak : cfg.lr_min;
  }
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * (1 + std::cos(std::numbers::pi * progress)) / 2;
}

template <typename Scalar>
struct AdamState {
  std::vector<RowMatrix<Scalar>> m, v;
  long long t = 0;
};

template <typename Scalar>
AdamState<Scalar> make_adam_state(const std::vector<Tensor<Scalar>>& params) {
  AdamState<Scalar> s;
  for (const auto& p : params) {
    s.m.push_back(RowMatrix<Scalar>::Zero(p.rows(), p.cols()));
    s.v.push_back(RowMatrix<Scalar>::Zero(p.rows(), p.cols()));
  }
  return s;
}

/// One bias-corrected Adam update with decoupled weight decay lr*wd*theta.
/// Parameters without a gradient are treated as having a zero gradient.
template <typename Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params, AdamState<Scalar>& state, const OptimizerConfig& cfg, double lr) {
  state.t += 1;
  const double bc1 = 1 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const auto b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const auto step = static_cast<Scalar>(lr / bc1);
  const auto inv_bc2 = static_cast<Scalar>(1 / bc2);
  const auto eps = static_cast<Scalar>(cfg.eps);
  const auto decay = static_cast<Scalar>(1 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].mutable_value();
    const RowMatrix<Scalar> g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    theta *= decay;
    theta.array() -= step * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }
}

/// Scales all gradients by max_norm/norm when their joint L2 norm exceeds
/// max_norm. Returns the norm before clipping.
template <typename Scalar>
double clip_global_norm(std::vector<Tensor<Scalar>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (p.has_grad()) sq += p.grad().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto s = static_cast<Scalar>(max_norm / norm);
    for (auto& p : params) {
      if (p.has_grad()) p.mutable_grad() *= s;
    }
  }
  return norm;
}

}  // namespace modse
