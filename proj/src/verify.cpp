#include "modse/verify.hpp"

#include <functional>
#include <random>

#include "modse/balance.hpp"
#include "modse/gradcheck.hpp"
#include "modse/model.hpp"
#include "modse/moe.hpp"

namespace modse {

namespace {

using T = Tensor<double>;
using LossFn = std::function<T(Graph<double>&)>;

constexpr double kStep = 1e-5;

T random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1, bool grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
  for (auto& x : v) x = dist(rng);
  return T::from_values(std::move(shape), std::span<const double>(v), grad);
}

class Suite {
 public:
  Suite(std::string name, double tol, double fault) : fault_(fault) {
    result_.name = std::move(name);
    result_.tolerance = tol;
  }

  // Compares backward() against central differences for every input.
  void check(const LossFn& loss_of, std::vector<T> inputs) {
    for (auto& t : inputs) t.zero_grad();
    Graph<double> g;
    backward(loss_of(g), g);
    for (auto& x : inputs) {
      const RowMatrix<double> analytic = x.grad() * (1.0 + fault_);
      const auto numeric = finite_diff_grad(
          [&](const T&) {
            Graph<double> g2;
            return loss_of(g2).item();
          },
          x, kStep);
      result_.worst_rel_error = std::max(result_.worst_rel_error, relative_error(analytic, numeric.value()));
      ++result_.checks;
    }
  }

  // loss = sum(op(inputs) * R) for a fixed random projection R.
  void check_op(const std::function<T(Graph<double>&)>& op, std::vector<T> inputs, std::mt19937_64& rng) {
    Graph<double> probe;
    const auto proj = random_tensor(op(probe).shape(), rng, -1, 1, false);
    check([&](Graph<double>& g) { return sum(g, mul(g, op(g), proj)); }, std::move(inputs));
  }

  SuiteResult result() const { return result_; }

 private:
  double fault_;
  SuiteResult result_;
};

struct Dims {
  Index tokens, d, experts, k, hidden, batch, seq, heads;
};

SuiteResult tensor_ops(const Dims& s, std::mt19937_64& rng, double fault) {
  Suite suite("tensor_ops", 1e-4, fault);
  const Index n = s.tokens, d = s.d;
  auto a = random_tensor({n, d}, rng), b = random_tensor({d, s.experts}, rng), c = random_tensor({n, d}, rng);
  suite.check_op([&](Graph<double>& g) { return matmul(g, a, b); }, {a, b}, rng);
  suite.check_op([&](Graph<double>& g) { return add(g, a, c); }, {a, c}, rng);
  suite.check_op([&](Graph<double>& g) { return mul(g, a, c); }, {a, c}, rng);
  suite.check_op([&](Graph<double>& g) { return scale(g, a, 0.7); }, {a}, rng);
  suite.check_op([&](Graph<double>& g) { return softplus(g, scale(g, a, 3.0)); }, {a}, rng);
  suite.check_op([&](Graph<double>& g) { return silu(g, scale(g, a, 3.0)); }, {a}, rng);
  suite.check_op([&](Graph<double>& g) { return mean_rows(g, a); }, {a}, rng);
  suite.check_op([&](Graph<double>& g) { return transpose(g, a); }, {a}, rng);
  suite.check_op([&](Graph<double>& g) { return reshape(g, a, {d, n}); }, {a}, rng);
  auto gamma = random_tensor({1}, rng, 0.5, 1.5);
  auto gain = random_tensor({d}, rng, 0.5, 1.5);
  suite.check_op([&](Graph<double>& g) { return rmsnorm(g, a, gamma, kNormEps); }, {a, gamma}, rng);
  suite.check_op([&](Graph<double>& g) { return rmsnorm(g, a, gain, kNormEps); }, {a, gain}, rng);
  auto logits = random_tensor({n, s.experts}, rng, -3, 3);
  suite.check_op([&](Graph<double>& g) { return softmax(g, logits); }, {logits}, rng);
  suite.check_op([&](Graph<double>& g) { return softmax(g, keep_topk(g, logits, s.k)); }, {logits}, rng);
  std::vector<Index> rows, targets;
  for (Index i = 0; i < n; ++i) {
    rows.push_back((i * 7 + 3) % n);
    targets.push_back((i * 5 + 1) % s.experts);
  }
  suite.check_op([&](Graph<double>& g) { return gather_rows(g, a, rows); }, {a}, rng);
  suite.check_op([&](Graph<double>& g) { return embedding_lookup(g, a, rows); }, {a}, rng);
  suite.check_op([&](Graph<double>& g) { return index_add_rows(g, a, c, rows); }, {a, c}, rng);
  auto w = random_tensor({n}, rng);
  suite.check_op([&](Graph<double>& g) { return scale_rows(g, a, w); }, {a, w}, rng);
  suite.check_op([&](Graph<double>& g) { return gather_elements(g, logits, rows, targets); }, {logits}, rng);
  suite.check([&](Graph<double>& g) { return cross_entropy(g, logits, targets); }, {logits});

  const Index rows_att = s.batch * s.seq;
  auto q = random_tensor({rows_att, d}, rng), k = random_tensor({rows_att, d}, rng),
       v = random_tensor({rows_att, d}, rng);
  suite.check_op([&](Graph<double>& g) { return rope(g, q, s.batch, s.seq, s.heads); }, {q}, rng);
  suite.check_op([&](Graph<double>& g) { return causal_attention(g, q, k, v, s.batch, s.seq, s.heads); }, {q, k, v},
                 rng);
  return suite.result();
}

SuiteResult gate_suite(const Dims& s, std::mt19937_64& rng, double fault) {
  Suite suite("gate", 1e-4, fault);
  auto gate = init_gate<double>(s.d, s.experts, rng);
  gate.w_gate.mutable_value() *= 50.0;
  gate.w_noise.mutable_value() *= 50.0;
  auto x = random_tensor({s.tokens, s.d}, rng);
  const std::vector<T> inputs{x, gate.w_gate, gate.w_noise, gate.gamma};
  suite.check_op([&](Graph<double>& g) { return gate_forward(g, gate, x, s.k).routing_probs; }, inputs, rng);
  suite.check_op([&](Graph<double>& g) { return gate_forward(g, gate, x, s.k).full_probs; }, inputs, rng);
  suite.check_op([&](Graph<double>& g) { return gate_forward(g, gate, x, s.k).logits; }, inputs, rng);
  return suite.result();
}

SuiteResult layer_suite(const Dims& s, std::mt19937_64& rng, double fault) {
  Suite suite("moe_layer", 1e-4, fault);
  auto gate = init_gate<double>(s.d, s.experts, rng);
  gate.w_gate.mutable_value() *= 50.0;
  gate.w_noise.mutable_value() *= 50.0;
  const auto spec = homogeneous_spec(static_cast<int>(s.d), static_cast<int>(s.hidden), static_cast<int>(s.experts));
  std::vector<int> sizes = spec.expert_sizes;
  // Unequal widths within each pair, same total.
  for (std::size_t e = 0; e + 1 < sizes.size(); e += 2) {
    const int delta = static_cast<int>(s.hidden) * static_cast<int>(e % 4 == 0 ? 3 : 1) / 4;
    sizes[e] += delta;
    sizes[e + 1] -= delta;
  }
  auto experts = init_experts<double>(spec_from_sizes(static_cast<int>(s.d), sizes), rng);
  for (auto& e : experts) {
    e.w_in.mutable_value() *= 20.0;
    e.w_gateproj.mutable_value() *= 20.0;
    e.w_out.mutable_value() *= 20.0;
  }
  auto x = random_tensor({s.tokens, s.d}, rng);
  std::vector<T> inputs{x, gate.w_gate, gate.w_noise, gate.gamma};
  for (const auto& e : experts) {
    inputs.push_back(e.w_in);
    inputs.push_back(e.w_gateproj);
    inputs.push_back(e.w_out);
  }
  suite.check_op([&](Graph<double>& g) { return moe_layer_forward(g, gate, experts, x, s.k).y; }, inputs, rng);
  return suite.result();
}

SuiteResult balance_suite(const Dims& s, std::mt19937_64& rng, double fault) {
  Suite suite("balance_loss", 1e-4, fault);
  auto logits = random_tensor({s.tokens, s.experts}, rng, -3, 3);
  suite.check([&](Graph<double>& g) { return balance_loss(g, softmax(g, logits), 0.01).loss; }, {logits});
  auto gate = init_gate<double>(s.d, s.experts, rng);
  gate.w_gate.mutable_value() *= 50.0;
  gate.w_noise.mutable_value() *= 50.0;
  auto x = random_tensor({s.tokens, s.d}, rng);
  suite.check([&](Graph<double>& g) { return balance_loss(g, gate_forward(g, gate, x, s.k), 0.01).loss; },
              {x, gate.w_gate, gate.w_noise, gate.gamma});
  return suite.result();
}

SuiteResult model_suite(GradcheckScale scale, std::uint64_t seed, double fault) {
  Suite suite("micro_model", 1e-3, fault);
  ModelConfig cfg;
  cfg.n_heads = 2;
  cfg.top_k = 2;
  cfg.seed = seed;
  if (scale == GradcheckScale::Micro) {
    cfg.dim = 16;
    cfg.n_layers = 1;
    cfg.n_experts = 4;
    cfg.vocab_size = 11;
    cfg.h_base = 24;
    cfg.expert_ratios = {{2.0, 1.0}, {1.5, 1.5}};
    cfg.seq_len = 4;
    cfg.batch_size = 2;
  } else {
    cfg.dim = 32;
    cfg.n_layers = 2;
    cfg.n_experts = 8;
    cfg.vocab_size = 23;
    cfg.h_base = 48;
    cfg.expert_ratios = {{2.5, 0.5}, {2.0, 1.0}, {1.75, 1.25}, {1.5, 1.5}};
    cfg.seq_len = 6;
    cfg.batch_size = 2;
  }
  cfg.validate();
  auto w = init_model<double>(cfg);
  for (auto& [name, t] : named_parameters(w)) {
    if (name.find("norm") == std::string::npos && name.find("gamma") == std::string::npos) t.mutable_value() *= 10.0;
  }
  const Index n = cfg.batch_size * cfg.seq_len;
  std::vector<Index> inputs, targets;
  for (Index i = 0; i < n; ++i) {
    inputs.push_back((i * 7 + 1) % cfg.vocab_size);
    targets.push_back((i * 3 + 2) % cfg.vocab_size);
  }
  suite.check(
      [&](Graph<double>& g) {
        return training_loss(g, transformer_forward(g, cfg, w, inputs, cfg.batch_size, cfg.seq_len), targets, 0.01)
            .total;
      },
      parameters(w));
  return suite.result();
}

}  // namespace

std::vector<SuiteResult> run_gradcheck_suites(GradcheckScale scale, std::uint64_t seed, double fault) {
  const Dims micro{6, 8, 4, 2, 8, 2, 3, 2};
  const Dims small{16, 16, 8, 2, 16, 2, 6, 4};
  const Dims& s = scale == GradcheckScale::Micro ? micro : small;
  std::mt19937_64 rng(seed);
  return {tensor_ops(s, rng, fault), gate_suite(s, rng, fault), layer_suite(s, rng, fault),
          balance_suite(s, rng, fault), model_suite(scale, seed, fault)};
}

}  // namespace modse
