#include <doctest.h>

#include <cmath>

#include "modse/balance.hpp"
#include "modse/moe.hpp"
#include "test_util.hpp"

using namespace modse;
using modse::testing::random_tensor;

namespace {

using T = Tensor<double>;
using G = Graph<double>;

GateParams<double> random_gate(Index d, Index n, std::mt19937_64& rng) {
  GateParams<double> p;
  p.w_gate = random_tensor({d, n}, rng);
  p.w_noise = random_tensor({d, n}, rng);
  p.gamma = T::scalar(1.3, true);
  return p;
}

ExpertParams<double> random_expert(Index d, Index h, std::mt19937_64& rng) {
  return {random_tensor({d, h}, rng), random_tensor({d, h}, rng), random_tensor({h, d}, rng)};
}

// Step-by-step scalar evaluation of the router for one token.
struct ScalarGate {
  std::vector<double> logits;
  std::vector<Index> picked;
  std::vector<double> weights;
};

ScalarGate scalar_gate(const GateParams<double>& p, const RowMatrix<double>& x, Index t, Index k) {
  const Index d = p.d_model(), n = p.experts();
  std::vector<double> clean(n, 0.0), noise(n, 0.0);
  for (Index i = 0; i < n; ++i) {
    double a = 0, b = 0;
    for (Index j = 0; j < d; ++j) {
      a += x(t, j) * p.w_gate.value()(j, i);
      b += x(t, j) * p.w_noise.value()(j, i);
    }
    clean[i] = a;
    noise[i] = std::log1p(std::exp(b));
  }
  double ms = 0;
  for (double v : noise) ms += v * v;
  const double rms = std::sqrt(ms / n + 1e-6);
  ScalarGate out;
  for (Index i = 0; i < n; ++i) out.logits.push_back(clean[i] + p.gamma.item() * noise[i] / rms);
  std::vector<bool> used(n, false);
  for (Index r = 0; r < k; ++r) {
    Index best = -1;
    for (Index i = 0; i < n; ++i) {
      if (!used[i] && (best < 0 || out.logits[i] > out.logits[best])) best = i;
    }
    used[best] = true;
    out.picked.push_back(best);
  }
  double z = 0;
  for (Index i : out.picked) z += std::exp(out.logits[i] - out.logits[out.picked[0]]);
  for (Index i : out.picked) out.weights.push_back(std::exp(out.logits[i] - out.logits[out.picked[0]]) / z);
  return out;
}

// Scalar loop evaluation of a gated FFN expert.
RowMatrix<double> scalar_expert(const ExpertParams<double>& e, const RowMatrix<double>& x) {
  const Index d = e.d_model(), h = e.hidden_size();
  RowMatrix<double> y = RowMatrix<double>::Zero(x.rows(), d);
  for (Index t = 0; t < x.rows(); ++t) {
    for (Index j = 0; j < h; ++j) {
      double a = 0, b = 0;
      for (Index i = 0; i < d; ++i) {
        a += x(t, i) * e.w_in.value()(i, j);
        b += x(t, i) * e.w_gateproj.value()(i, j);
      }
      const double hid = a / (1 + std::exp(-a)) * b;
      for (Index o = 0; o < d; ++o) y(t, o) += hid * e.w_out.value()(j, o);
    }
  }
  return y;
}

}  // namespace

TEST_CASE("build_paired_spec reproduces the published size tables") {
  const auto ratios = published_ratios();
  auto s300 = build_paired_spec(1536, 3840, ratios);
  const std::vector<int> want300{6912, 768, 6144, 1536, 4608, 3072, 3840, 3840};
  CHECK(s300.expert_sizes == want300);
  auto s700 = build_paired_spec(2048, 5120, ratios);
  const std::vector<int> want700{9216, 1024, 8192, 2048, 6144, 4096, 5120, 5120};
  CHECK(s700.expert_sizes == want700);
  for (const auto& p : s300.pairs) CHECK(p.large + p.small == 2 * 3840);

  const std::vector<SizeRatio> flat(4, SizeRatio{2.5, 2.5});
  auto homog = build_paired_spec(1536, 3840, flat);
  CHECK(homog.homogeneous());
  CHECK(homog.expert_sizes == homogeneous_spec(1536, 3840, 8).expert_sizes);
}

TEST_CASE("build_paired_spec rejects pairs off the size constraint") {
  const std::vector<SizeRatio> bad{{4.5, 0.5}, {4.0, 0.5}};
  CHECK_THROWS_WITH_AS(build_paired_spec(1536, 3840, bad), doctest::Contains("pair 1"), ConstraintError);
  const std::vector<SizeRatio> frac{{2.5001, 2.4999}};
  CHECK_THROWS_AS(build_paired_spec(10, 25, frac), ConstraintError);
  const std::vector<SizeRatio> swapped{{0.5, 4.5}};
  CHECK_THROWS_AS(build_paired_spec(1536, 3840, swapped), ConstraintError);
}

TEST_CASE("parameter parity") {
  auto s300 = build_paired_spec(1536, 3840, published_ratios());
  CHECK(count_parameters(s300) == 3LL * 1536 * 30720);
  CHECK(count_parameters(s300) == count_parameters(homogeneous_spec(1536, 3840, 8)));

  std::mt19937_64 rng(1);
  CHECK(count_parameters(std::vector<ExpertParams<double>>{}) == 0);
  CHECK(count_parameters(std::vector<ExpertParams<double>>{random_expert(4, 6, rng)}) == 72);

  auto toy = build_paired_spec(64, 160, published_ratios());
  auto experts = init_experts<float>(toy, rng);
  auto base = init_experts<float>(homogeneous_spec(64, 160, 8), rng);
  CHECK(count_parameters(experts) == count_parameters(base));
}

TEST_CASE("gate_forward") {
  std::mt19937_64 rng(42);
  const Index d = 4, n = 4;
  auto x = random_tensor({5, d}, rng, false);

  SUBCASE("zero noise weights shift every logit equally") {
    auto p = random_gate(d, n, rng);
    p.w_noise = T::zeros({d, n}, true);
    G g;
    auto out = gate_forward(g, p, x, 2);
    auto clean = matmul(g, x, p.w_gate);
    for (Index t = 0; t < 5; ++t) {
      auto expect = topk_indices<double>(clean.value().row(t), 2);
      CHECK(out.index(t, 0) == expect[0]);
      CHECK(out.index(t, 1) == expect[1]);
      const double shift = out.logits.value()(t, 0) - clean.value()(t, 0);
      for (Index i = 1; i < n; ++i) {
        CHECK(out.logits.value()(t, i) - clean.value()(t, i) == doctest::Approx(shift).epsilon(1e-12));
      }
    }
  }
  SUBCASE("k = N gives the full distribution") {
    auto p = random_gate(d, n, rng);
    G g;
    auto out = gate_forward(g, p, x, n);
    CHECK((out.routing_probs.value() - out.full_probs.value()).cwiseAbs().maxCoeff() <= 1e-15);
    for (Index t = 0; t < 5; ++t) {
      for (Index r = 0; r < n; ++r) {
        CHECK(out.topk_weights(t, r) == out.full_probs.value()(t, out.index(t, r)));
      }
    }
  }
  SUBCASE("matches a scalar re-implementation") {
    auto p = random_gate(d, n, rng);
    G g;
    auto out = gate_forward(g, p, x, 2);
    for (Index t = 0; t < 5; ++t) {
      auto ref = scalar_gate(p, x.value(), t, 2);
      for (Index i = 0; i < n; ++i) CHECK(out.logits.value()(t, i) == doctest::Approx(ref.logits[i]).epsilon(1e-12));
      for (Index r = 0; r < 2; ++r) {
        CHECK(out.index(t, r) == ref.picked[r]);
        CHECK(out.topk_weights(t, r) == doctest::Approx(ref.weights[r]).epsilon(1e-12));
      }
      CHECK(out.full_probs.value().row(t).sum() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("k larger than N") {
    auto p = random_gate(d, n, rng);
    G g;
    CHECK_THROWS_AS(gate_forward(g, p, x, 5), ArgumentError);
  }
}

TEST_CASE("gate invariants over random inputs") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_gate(6, 8, rng);
    auto x = random_tensor({7, 6}, rng, false);
    G g;
    auto out = gate_forward(g, p, x, 2);
    for (Index t = 0; t < 7; ++t) {
      CHECK(out.index(t, 0) != out.index(t, 1));
      CHECK(out.topk_weights.row(t).sum() == doctest::Approx(1.0).epsilon(1e-12));
      Index nonzero = 0;
      for (Index e = 0; e < 8; ++e) nonzero += out.routing_probs.value()(t, e) != 0.0;
      CHECK(nonzero == 2);
    }
    // Shifting a token's logits by a constant leaves selection and weights unchanged.
    RowMatrix<double> shifted = out.logits.value();
    shifted.row(3).array() += 12.5;
    auto masked = keep_topk(g, T::from_matrix(shifted), 2);
    auto probs = softmax(g, masked);
    auto picked = topk_indices<double>(shifted.row(3), 2);
    CHECK(picked[0] == out.index(3, 0));
    CHECK(picked[1] == out.index(3, 1));
    CHECK(probs.value()(3, picked[0]) == doctest::Approx(out.topk_weights(3, 0)).epsilon(1e-12));
  }
}

TEST_CASE("expert_forward") {
  std::mt19937_64 rng(8);
  G g;
  auto x = random_tensor({2, 4}, rng, false);
  ExpertParams<double> zero{T::zeros({4, 6}), T::zeros({4, 6}), T::zeros({6, 4})};
  CHECK(expert_forward(g, zero, x).value().isZero(0));

  auto e = random_expert(4, 6, rng);
  CHECK(expert_forward(g, e, T::zeros({2, 4})).value().isZero(0));
  auto y = expert_forward(g, e, x);
  CHECK((y.value() - scalar_expert(e, x.value())).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("moe_layer_forward") {
  std::mt19937_64 rng(21);
  const Index d = 4;
  auto x = random_tensor({6, d}, rng, false);

  SUBCASE("single forced expert") {
    auto gate = random_gate(d, 4, rng);
    gate.w_gate = T::zeros({d, 4}, true);
    gate.w_noise = T::zeros({d, 4}, true);
    // A constant input column lets w_gate push expert 2's logit to +1000.
    RowMatrix<double> xv = x.value();
    xv.col(0).setOnes();
    auto xc = T::from_matrix(xv);
    gate.w_gate.mutable_value()(0, 2) = 1000;
    std::vector<ExpertParams<double>> experts;
    for (int i = 0; i < 4; ++i) experts.push_back(random_expert(d, 3 + i, rng));
    G g;
    auto out = moe_layer_forward(g, gate, experts, xc, 1);
    auto direct = expert_forward(g, experts[2], xc);
    CHECK((out.y.value() - direct.value()).cwiseAbs().maxCoeff() <= 1e-14);
  }
  SUBCASE("identical experts") {
    auto gate = random_gate(d, 2, rng);
    auto e = random_expert(d, 5, rng);
    std::vector<ExpertParams<double>> experts{e, e};
    G g;
    auto out = moe_layer_forward(g, gate, experts, x, 2);
    auto direct = expert_forward(g, e, x);
    CHECK((out.y.value() - direct.value()).cwiseAbs().maxCoeff() <= 1e-14);
  }
  SUBCASE("dense evaluation oracle") {
    auto gate = random_gate(d, 4, rng);
    std::vector<ExpertParams<double>> experts;
    for (int h : {6, 2, 5, 3}) experts.push_back(random_expert(d, h, rng));
    G g;
    auto out = moe_layer_forward(g, gate, experts, x, 2);
    RowMatrix<double> dense = RowMatrix<double>::Zero(6, d);
    for (Index e = 0; e < 4; ++e) {
      auto all = scalar_expert(experts[e], x.value());
      for (Index t = 0; t < 6; ++t) dense.row(t) += out.gate.routing_probs.value()(t, e) * all.row(t);
    }
    CHECK((out.y.value() - dense).cwiseAbs().maxCoeff() <= 1e-13);
  }
  SUBCASE("gate and experts must agree on N") {
    auto gate = random_gate(d, 4, rng);
    std::vector<ExpertParams<double>> experts{random_expert(d, 2, rng)};
    G g;
    CHECK_THROWS_AS(moe_layer_forward(g, gate, experts, x, 1), DimensionError);
  }
}

TEST_CASE("moe layer gradients match finite differences") {
  std::mt19937_64 rng(314);
  const Index d = 8, n = 4, k = 2, tokens = 3;
  auto gate = random_gate(d, n, rng);
  std::vector<ExpertParams<double>> experts;
  for (int h : {12, 4, 9, 7}) experts.push_back(random_expert(d, h, rng));
  auto x = random_tensor({tokens, d}, rng, true);
  auto proj = random_tensor({tokens, d}, rng, false);

  auto loss_of = [&](G& g) {
    auto out = moe_layer_forward(g, gate, experts, x, k);
    auto bal = balance_loss(g, out.gate, 0.5);
    return add(g, sum(g, mul(g, out.y, proj)), bal.loss);
  };
  G g;
  backward(loss_of(g), g);

  std::vector<T> params{x, gate.w_gate, gate.w_noise, gate.gamma};
  for (auto& e : experts) {
    params.push_back(e.w_in);
    params.push_back(e.w_gateproj);
    params.push_back(e.w_out);
  }
  double worst = 0;
  for (auto& p : params) {
    auto numeric = finite_diff_grad(
        [&](const T&) {
          G g2;
          return loss_of(g2).item();
        },
        p, 1e-5);
    worst = std::max(worst, relative_error(p.grad(), numeric.value()));
  }
  INFO("worst relative error " << worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("homogeneous paired spec and baseline layer are bitwise identical") {
  const std::vector<SizeRatio> flat(4, SizeRatio{2.5, 2.5});
  auto paired = build_paired_spec(16, 40, flat);
  auto base = homogeneous_spec(16, 40, 8);
  std::mt19937_64 r1(99), r2(99);
  auto g1p = init_gate<float>(16, 8, r1);
  auto e1 = init_experts<float>(paired, r1);
  auto g2p = init_gate<float>(16, 8, r2);
  auto e2 = init_experts<float>(base, r2);
  std::mt19937_64 rx(5);
  std::normal_distribution<float> nd;
  RowMatrix<float> xv(10, 16);
  for (Index i = 0; i < xv.size(); ++i) xv.data()[i] = nd(rx);
  auto x = Tensor<float>::from_matrix(xv);
  Graph<float> g;
  auto a = moe_layer_forward(g, g1p, e1, x, 2);
  auto b = moe_layer_forward(g, g2p, e2, x, 2);
  CHECK(a.y.value() == b.y.value());
}
