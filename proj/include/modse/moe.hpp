#pragma once

#include <random>
#include <vector>

#include "modse/paired_spec.hpp"
#include "modse/tensor.hpp"

namespace modse {

inline constexpr double kNormEps = 1e-6;
inline constexpr double kInitStd = 0.02;

/// Router weights: clean logits x*w_gate plus rmsnorm(softplus(x*w_noise)) with
/// one learnable gain. Both matrices are d_model x N.
template <typename Scalar>
struct GateParams {
  Tensor<Scalar> w_gate;
  Tensor<Scalar> w_noise;
  Tensor<Scalar> gamma;

  Index d_model() const { return w_gate.rows(); }
  Index experts() const { return w_gate.cols(); }
};

/// Gated-linear FFN expert: (silu(x*w_in) * (x*w_gateproj)) * w_out.
template <typename Scalar>
struct ExpertParams {
  Tensor<Scalar> w_in;
  Tensor<Scalar> w_gateproj;
  Tensor<Scalar> w_out;

  Index d_model() const { return w_in.rows(); }
  Index hidden_size() const { return w_in.cols(); }
};

template <typename Scalar>
struct GateOutput {
  Index tokens = 0;
  Index experts = 0;
  Index k = 0;
  // tokens * k expert ids; rank 0 holds the largest logit.
  std::vector<Index> topk_indices;
  RowMatrix<Scalar> topk_weights;  // tokens x k, aligned with topk_indices
  Tensor<Scalar> logits;           // H(x), tokens x N
  Tensor<Scalar> full_probs;       // softmax over all N logits
  Tensor<Scalar> routing_probs;    // softmax of the top-k masked logits; zero elsewhere

  Index index(Index token, Index rank) const { return topk_indices[static_cast<std::size_t>(token * k + rank)]; }
};

template <typename Scalar, typename Rng>
Tensor<Scalar> normal_tensor(Shape shape, Rng& rng, double stddev = kInitStd) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<Scalar> v(static_cast<std::size_t>(shape_size(shape)));
  for (auto& x : v) x = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>::from_values(std::move(shape), std::span<const Scalar>(v), true);
}

template <typename Scalar, typename Rng>
GateParams<Scalar> init_gate(Index d_model, Index experts, Rng& rng) {
  GateParams<Scalar> p;
  p.w_gate = normal_tensor<Scalar>({d_model, experts}, rng);
  p.w_noise = normal_tensor<Scalar>({d_model, experts}, rng);
  p.gamma = Tensor<Scalar>::scalar(Scalar(1), true);
  return p;
}

template <typename Scalar, typename Rng>
ExpertParams<Scalar> init_expert(Index d_model, Index hidden, Rng& rng) {
  ExpertParams<Scalar> e;
  e.w_in = normal_tensor<Scalar>({d_model, hidden}, rng);
  e.w_gateproj = normal_tensor<Scalar>({d_model, hidden}, rng);
  e.w_out = normal_tensor<Scalar>({hidden, d_model}, rng);
  return e;
}

template <typename Scalar, typename Rng>
std::vector<ExpertParams<Scalar>> init_experts(const PairedExpertSpec& spec, Rng& rng) {
  std::vector<ExpertParams<Scalar>> out;
  out.reserve(spec.expert_sizes.size());
  for (int h : spec.expert_sizes) out.push_back(init_expert<Scalar>(spec.d_model, h, rng));
  return out;
}

template <typename Scalar>
std::int64_t count_parameters(const std::vector<ExpertParams<Scalar>>& experts) {
  std::int64_t total = 0;
  for (const auto& e : experts) total += e.w_in.size() + e.w_gateproj.size() + e.w_out.size();
  return total;
}

/// Noisy top-k router. The noise term is the deterministic
/// rmsnorm(softplus(x*w_noise)) of each token's N-vector.
template <typename Scalar>
GateOutput<Scalar> gate_forward(Graph<Scalar>& g, const GateParams<Scalar>& params, const Tensor<Scalar>& x,
                                Index k) {
  if (params.w_gate.rows() != params.w_noise.rows() || params.w_gate.cols() != params.w_noise.cols()) {
    throw DimensionError("gate: w_gate " + shape_string(params.w_gate.shape()) + " and w_noise " +
                         shape_string(params.w_noise.shape()) + " differ");
  }
  const Index n = params.experts();
  if (k < 1 || k > n) throw ArgumentError("gate: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");

  GateOutput<Scalar> out;
  out.tokens = x.rows();
  out.experts = n;
  out.k = k;
  auto clean = matmul(g, x, params.w_gate);
  auto noise = rmsnorm(g, softplus(g, matmul(g, x, params.w_noise)), params.gamma, Scalar(kNormEps));
  out.logits = add(g, clean, noise);
  out.full_probs = softmax(g, out.logits);
  out.routing_probs = softmax(g, keep_topk(g, out.logits, k));

  out.topk_indices.reserve(static_cast<std::size_t>(x.rows() * k));
  out.topk_weights.resize(x.rows(), k);
  for (Index t = 0; t < x.rows(); ++t) {
    const auto picked = topk_indices<Scalar>(out.logits.value().row(t), k);
    for (Index r = 0; r < k; ++r) {
      out.topk_indices.push_back(picked[static_cast<std::size_t>(r)]);
      out.topk_weights(t, r) = out.routing_probs.value()(t, picked[static_cast<std::size_t>(r)]);
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> expert_forward(Graph<Scalar>& g, const ExpertParams<Scalar>& e, const Tensor<Scalar>& x) {
  auto hidden = mul(g, silu(g, matmul(g, x, e.w_in)), matmul(g, x, e.w_gateproj));
  return matmul(g, hidden, e.w_out);
}

template <typename Scalar>
struct MoeOutput {
  Tensor<Scalar> y;
  GateOutput<Scalar> gate;
};

/// Sparse mixture layer. Each expert runs once on the tokens routed to it
/// (gather, evaluate, weight, scatter-add) and contributions are merged in
/// expert-index order.
template <typename Scalar>
MoeOutput<Scalar> moe_layer_forward(Graph<Scalar>& g, const GateParams<Scalar>& gate,
                                    const std::vector<ExpertParams<Scalar>>& experts, const Tensor<Scalar>& x,
                                    Index k) {
  if (experts.empty()) throw ArgumentError("moe layer needs at least one expert");
  if (static_cast<Index>(experts.size()) != gate.experts()) {
    throw DimensionError("gate routes to " + std::to_string(gate.experts()) + " experts but " +
                         std::to_string(experts.size()) + " are given");
  }
  MoeOutput<Scalar> out;
  out.gate = gate_forward(g, gate, x, k);
  const auto& go = out.gate;

  std::vector<std::vector<Index>> routed(experts.size());
  for (Index t = 0; t < go.tokens; ++t) {
    for (Index r = 0; r < k; ++r) routed[static_cast<std::size_t>(go.index(t, r))].push_back(t);
  }
  Tensor<Scalar> y = Tensor<Scalar>::zeros({x.rows(), x.cols()});
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const auto& rows = routed[e];
    if (rows.empty()) continue;
    std::vector<Index> cols(rows.size(), static_cast<Index>(e));
    auto xe = gather_rows(g, x, rows);
    auto ye = expert_forward(g, experts[e], xe);
    auto w = gather_elements(g, go.routing_probs, rows, cols);
    y = index_add_rows(g, y, scale_rows(g, ye, w), rows);
  }
  out.y = y;
  return out;
}

}  // namespace modse
