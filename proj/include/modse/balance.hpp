#pragma once

#include <vector>

#include "modse/moe.hpp"

namespace modse {

inline constexpr double kDefaultBalanceAlpha = 0.01;

template <typename Scalar>
struct BalanceStats {
  std::vector<double> f;  // fraction of tokens whose argmax expert is i
  std::vector<double> P;  // mean router probability of expert i
  Tensor<Scalar> loss;    // alpha * N * sum_i f_i * P_i
  double alpha = 0;
  Index token_count = 0;

  double value() const { return static_cast<double>(loss.item()); }
};

/// Argmax of each row, lowest index on ties.
template <typename Scalar>
std::vector<Index> row_argmax(const RowMatrix<Scalar>& m) {
  std::vector<Index> out(static_cast<std::size_t>(m.rows()));
  for (Index r = 0; r < m.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) > m(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

/// Auxiliary load-balance loss from a T x N matrix of router probabilities.
/// The routed fractions f are counts and act as constants; gradients reach
/// the probabilities only through P.
template <typename Scalar>
BalanceStats<Scalar> balance_loss(Graph<Scalar>& g, const Tensor<Scalar>& full_probs, double alpha) {
  const Index tokens = full_probs.rows();
  const Index n = full_probs.cols();
  if (tokens == 0) throw EmptyBatchError("balance loss over an empty batch");

  BalanceStats<Scalar> stats;
  stats.alpha = alpha;
  stats.token_count = tokens;
  stats.f.assign(static_cast<std::size_t>(n), 0.0);
  for (Index e : row_argmax(full_probs.value())) stats.f[static_cast<std::size_t>(e)] += 1.0;
  for (auto& v : stats.f) v /= static_cast<double>(tokens);

  auto mean_p = mean_rows(g, full_probs);
  stats.P.assign(mean_p.values().begin(), mean_p.values().end());

  std::vector<Scalar> f_cast(stats.f.begin(), stats.f.end());
  auto f_t = Tensor<Scalar>::from_values({n}, std::span<const Scalar>(f_cast));
  stats.loss = scale(g, sum(g, mul(g, mean_p, f_t)), static_cast<Scalar>(alpha * static_cast<double>(n)));
  return stats;
}

template <typename Scalar>
BalanceStats<Scalar> balance_loss(Graph<Scalar>& g, const GateOutput<Scalar>& gate_out, double alpha) {
  if (gate_out.tokens == 0 || !gate_out.full_probs.defined()) {
    throw EmptyBatchError("balance loss over an empty batch");
  }
  return balance_loss(g, gate_out.full_probs, alpha);
}

}  // namespace modse
