#pragma once

#include <string>
#include <utility>
#include <vector>

#include "modse/balance.hpp"
#include "modse/config.hpp"
#include "modse/moe.hpp"
#include "modse/rng.hpp"

namespace modse {

template <typename Scalar>
struct BlockWeights {
  Tensor<Scalar> attn_norm;  // [dim]
  Tensor<Scalar> wq, wk, wv, wo;
  Tensor<Scalar> ffn_norm;   // [dim]
  GateParams<Scalar> gate;
  std::vector<ExpertParams<Scalar>> experts;
};

/// Decoder-only transformer whose FFNs are (diverse-size) expert layers.
template <typename Scalar>
struct ModelWeights {
  Tensor<Scalar> embedding;  // [vocab, dim]
  std::vector<BlockWeights<Scalar>> blocks;
  Tensor<Scalar> final_norm;  // [dim]
  Tensor<Scalar> output;      // [dim, vocab]
};

/// Every trainable tensor with a stable name, in a fixed order shared by the
/// optimizer state and the checkpoint layout.
template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>>> named_parameters(const ModelWeights<Scalar>& w) {
  std::vector<std::pair<std::string, Tensor<Scalar>>> out;
  out.emplace_back("embedding", w.embedding);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "attn_norm", b.attn_norm);
    out.emplace_back(p + "wq", b.wq);
    out.emplace_back(p + "wk", b.wk);
    out.emplace_back(p + "wv", b.wv);
    out.emplace_back(p + "wo", b.wo);
    out.emplace_back(p + "ffn_norm", b.ffn_norm);
    out.emplace_back(p + "gate.w_gate", b.gate.w_gate);
    out.emplace_back(p + "gate.w_noise", b.gate.w_noise);
    out.emplace_back(p + "gate.gamma", b.gate.gamma);
    for (std::size_t e = 0; e < b.experts.size(); ++e) {
      const std::string q = p + "experts." + std::to_string(e) + ".";
      out.emplace_back(q + "w_in", b.experts[e].w_in);
      out.emplace_back(q + "w_gateproj", b.experts[e].w_gateproj);
      out.emplace_back(q + "w_out", b.experts[e].w_out);
    }
  }
  out.emplace_back("final_norm", w.final_norm);
  out.emplace_back("output", w.output);
  return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> parameters(const ModelWeights<Scalar>& w) {
  std::vector<Tensor<Scalar>> out;
  for (auto& [_, t] : named_parameters(w)) out.push_back(t);
  return out;
}

template <typename Scalar>
Tensor<Scalar> ones_param(Index n) {
  std::vector<Scalar> v(static_cast<std::size_t>(n), Scalar(1));
  return Tensor<Scalar>::from_values({n}, std::span<const Scalar>(v), true);
}

/// Seeded initialization from the "init" stream of the run seed.
template <typename Scalar>
ModelWeights<Scalar> init_model(const ModelConfig& cfg) {
  cfg.validate();
  auto rng = SeedStreams(cfg.seed).stream("init");
  const auto spec = cfg.expert_spec();
  const Index d = cfg.dim, v = cfg.vocab_size;
  ModelWeights<Scalar> w;
  w.embedding = normal_tensor<Scalar>({v, d}, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    BlockWeights<Scalar> b;
    b.attn_norm = ones_param<Scalar>(d);
    b.wq = normal_tensor<Scalar>({d, d}, rng);
    b.wk = normal_tensor<Scalar>({d, d}, rng);
    b.wv = normal_tensor<Scalar>({d, d}, rng);
    b.wo = normal_tensor<Scalar>({d, d}, rng);
    b.ffn_norm = ones_param<Scalar>(d);
    b.gate = init_gate<Scalar>(d, cfg.n_experts, rng);
    b.experts = init_experts<Scalar>(spec, rng);
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = ones_param<Scalar>(d);
  w.output = normal_tensor<Scalar>({d, v}, rng);
  return w;
}

template <typename Scalar>
struct ForwardOutput {
  Tensor<Scalar> logits;  // [batch*seq, vocab]
  std::vector<GateOutput<Scalar>> gates;
};

/// tokens holds batch rows of seq ids each, row-major.
template <typename Scalar>
ForwardOutput<Scalar> transformer_forward(Graph<Scalar>& g, const ModelConfig& cfg, const ModelWeights<Scalar>& w,
                                          std::span<const Index> tokens, Index batch, Index seq) {
  if (static_cast<Index>(tokens.size()) != batch * seq) {
    throw DimensionError("transformer: " + std::to_string(tokens.size()) + " tokens for batch " +
                         std::to_string(batch) + " x seq " + std::to_string(seq));
  }
  const Scalar eps = Scalar(kNormEps);
  ForwardOutput<Scalar> out;
  auto x = embedding_lookup(g, w.embedding, tokens);
  for (const auto& b : w.blocks) {
    auto h = rmsnorm(g, x, b.attn_norm, eps);
    auto q = rope(g, matmul(g, h, b.wq), batch, seq, Index(cfg.n_heads));
    auto k = rope(g, matmul(g, h, b.wk), batch, seq, Index(cfg.n_heads));
    auto v = matmul(g, h, b.wv);
    auto a = causal_attention(g, q, k, v, batch, seq, Index(cfg.n_heads));
    x = add(g, x, matmul(g, a, b.wo));
    auto moe = moe_layer_forward(g, b.gate, b.experts, rmsnorm(g, x, b.ffn_norm, eps), Index(cfg.top_k));
    x = add(g, x, moe.y);
    out.gates.push_back(std::move(moe.gate));
  }
  out.logits = matmul(g, rmsnorm(g, x, w.final_norm, eps), w.output);
  return out;
}

template <typename Scalar>
struct LossParts {
  Tensor<Scalar> total;
  Tensor<Scalar> ce;
  std::vector<BalanceStats<Scalar>> balance;  // one per layer
  double balance_sum = 0;
};

/// CE(next token) + alpha * sum over layers of the balance loss.
template <typename Scalar>
LossParts<Scalar> training_loss(Graph<Scalar>& g, const ForwardOutput<Scalar>& fwd, std::span<const Index> targets,
                                double alpha) {
  LossParts<Scalar> parts;
  parts.ce = cross_entropy(g, fwd.logits, targets);
  parts.total = parts.ce;
  for (const auto& gate : fwd.gates) {
    parts.balance.push_back(balance_loss(g, gate, alpha));
    parts.balance_sum += parts.balance.back().value();
    parts.total = add(g, parts.total, parts.balance.back().loss);
  }
  return parts;
}

/// Converts weights between precisions (same layout, fresh leaves).
template <typename To, typename From>
ModelWeights<To> cast_weights(const ModelWeights<From>& w) {
  auto conv = [](const Tensor<From>& t) {
    RowMatrix<To> m = t.value().template cast<To>();
    return Tensor<To>::from_values(t.shape(), std::span<const To>(m.data(), static_cast<std::size_t>(m.size())), true);
  };
  ModelWeights<To> out;
  out.embedding = conv(w.embedding);
  for (const auto& b : w.blocks) {
    BlockWeights<To> nb;
    nb.attn_norm = conv(b.attn_norm);
    nb.wq = conv(b.wq);
    nb.wk = conv(b.wk);
    nb.wv = conv(b.wv);
    nb.wo = conv(b.wo);
    nb.ffn_norm = conv(b.ffn_norm);
    nb.gate = {conv(b.gate.w_gate), conv(b.gate.w_noise), conv(b.gate.gamma)};
    for (const auto& e : b.experts) nb.experts.push_back({conv(e.w_in), conv(e.w_gateproj), conv(e.w_out)});
    out.blocks.push_back(std::move(nb));
  }
  out.final_norm = conv(w.final_norm);
  out.output = conv(w.output);
  return out;
}

}  // namespace modse
