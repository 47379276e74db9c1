#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mega/autodiff.h"
#include "mega/ema.h"

using namespace mega;
using ag::Graph;
using ag::Var;

namespace {

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

// Builds y = f(params), contracts it with a fixed random R and compares the
// reverse-mode gradient of sum(y * R) with central differences.
ag::FdReport check_primitive(std::vector<std::pair<std::string, Tensor>>& params, const Builder& f,
                             double tol = 1e-6, std::uint64_t seed = 11) {
  Graph g;
  std::vector<Var> vars;
  for (auto& [name, t] : params) vars.push_back(g.param(name, t));
  const Var y = f(g, vars);
  g.forward();
  SeedState rng(seed);
  const Tensor r = rng.normal_tensor(g.value(y).shape(), 1.0);
  const Var loss = ag::reduce_sum(ag::mul(y, g.input(r)));
  g.forward();
  const ag::GradientSet grads = g.backward(loss);
  std::vector<ag::NamedParam> named;
  for (auto& [name, t] : params) named.push_back({name, &t});
  ag::FdOptions o;
  o.tol = tol;
  return ag::finite_diff_check(
      [&] {
        g.forward();
        return g.value(loss)[0];
      },
      named, grads, o);
}

std::vector<std::pair<std::string, Tensor>> randoms(std::initializer_list<std::pair<const char*, Shape>> spec,
                                                    std::uint64_t seed = 3, double scale = 1.0) {
  SeedState rng(seed);
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [n, s] : spec) out.emplace_back(n, rng.normal_tensor(s, scale));
  return out;
}

void expect_pass(const ag::FdReport& r) {
  for (const auto& gr : r.groups) {
    EXPECT_GT(gr.checked, 0u) << gr.name;
    EXPECT_LE(gr.max_rel_err, r.tol) << gr.name << "[" << gr.worst_index << "] analytic " << gr.analytic
                                     << " numeric " << gr.numeric;
  }
}

}  // namespace

TEST(Autodiff, IdentityGraph) {
  Graph g;
  const Var x = g.input(Tensor::vector({1, 2}));
  const Var y = ag::reshape(x, {2});
  g.forward();
  EXPECT_TRUE(g.value(y).identical(Tensor::vector({1, 2})));
}

TEST(Autodiff, SumOfSquaresValueAndGradient) {
  Graph g;
  const Var x = g.input(Tensor::vector({1, 2, 3}), true);
  const Var s = ag::reduce_sum(ag::mul(x, x));
  g.forward();
  EXPECT_EQ(g.value(s)[0], 14.0);
  g.backward(s);
  EXPECT_TRUE(g.grad(x).identical(Tensor::vector({2, 4, 6})));
}

TEST(Autodiff, SumGradientIsOnes) {
  Graph g;
  const Var x = g.input(Tensor::matrix({{1, -2}, {3, 0.5}}), true);
  const Var s = ag::reduce_sum(x);
  g.forward();
  g.backward(s);
  EXPECT_TRUE(g.grad(x).identical(Tensor({2, 2}, 1.0)));
}

TEST(Autodiff, QuadraticFiniteDifference) {
  Tensor theta = Tensor::vector({3.0});
  Graph g;
  const Var p = g.param("theta", theta);
  const Var l = ag::reduce_sum(ag::mul(p, p));
  g.forward();
  const auto grads = g.backward(l);
  EXPECT_NEAR(grads.at("theta")[0], 6.0, 1e-15);
  std::vector<ag::NamedParam> named{{"theta", &theta}};
  ag::FdOptions o;
  o.tol = 1e-9;
  const auto r = ag::finite_diff_check(
      [&] {
        g.forward();
        return g.value(l)[0];
      },
      named, grads, o);
  EXPECT_LE(r.max_rel_err(), 1e-9);
  EXPECT_EQ(theta[0], 3.0);  // restored
}

TEST(Autodiff, BackwardBeforeForwardIsStateError) {
  Graph g;
  const Var x = g.input(Tensor::vector({1.0}), true);
  const Var s = ag::reduce_sum(x);
  EXPECT_THROW(g.backward(s), StateError);
}

TEST(Autodiff, UnboundParameterIsConfigError) {
  Graph g;
  const Var w = g.param("w");
  ag::reduce_sum(w);
  EXPECT_THROW(g.forward(), ConfigError);
  Tensor t = Tensor::vector({2.0});
  g.bind("w", t);
  EXPECT_NO_THROW(g.forward());
}

TEST(Autodiff, ShapeViolationIsDimensionError) {
  Graph g;
  const Var a = g.input(Tensor({2, 3}));
  const Var b = g.input(Tensor({2, 3}));
  ag::matmul(a, b);
  EXPECT_THROW(g.forward(), DimensionError);
}

TEST(Autodiff, EveryTrainableParameterReceivesAGradient) {
  Tensor a = Tensor::vector({1.0}), unused = Tensor::matrix({{1, 2}});
  Graph g;
  const Var pa = g.param("a", a);
  g.param("unused", unused);
  const Var l = ag::reduce_sum(pa);
  g.forward();
  const auto grads = g.backward(l);
  EXPECT_EQ(grads.size(), 2u);
  EXPECT_TRUE(grads.at("unused").identical(Tensor({1, 2})));
  EXPECT_THROW(grads.at("missing"), ConfigError);
}

TEST(AutodiffPrimitive, LinearAlgebra) {
  auto p = randoms({{"a", {4, 5}}, {"b", {5, 3}}});
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::matmul(v[0], v[1]); }));
  auto q = randoms({{"a", {4, 5}}});
  expect_pass(check_primitive(q, [](Graph&, const auto& v) { return ag::transpose(v[0]); }));
}

TEST(AutodiffPrimitive, Elementwise) {
  auto p = randoms({{"a", {3, 4}}, {"b", {3, 4}}});
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::add(v[0], v[1]); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::sub(v[0], v[1]); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::mul(v[0], v[1]); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::affine(v[0], -1.5, 0.25); }));
  auto r = randoms({{"a", {3, 4}}, {"row", {4}}});
  expect_pass(check_primitive(r, [](Graph&, const auto& v) { return ag::add_row(v[0], v[1]); }));
  expect_pass(check_primitive(r, [](Graph&, const auto& v) { return ag::mul_row(v[0], v[1]); }));
}

TEST(AutodiffPrimitive, Activations) {
  auto p = randoms({{"a", {3, 5}}});
  for (Activation k : {Activation::silu, Activation::sigmoid, Activation::relu2})
    expect_pass(check_primitive(p, [k](Graph&, const auto& v) { return ag::activation(k, v[0]); }));
  // Centered on mu: further out the gradient is a Gaussian tail below the
  // difference quotient's roundoff.
  auto lp = randoms({{"a", {3, 5}}}, 3, 0.3);
  for (double& x : lp[0].second.data()) x += LaplaceCoeffs{}.mu;
  expect_pass(check_primitive(lp, [](Graph&, const auto& v) { return ag::laplace(v[0]); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::softmax_rows(v[0]); }, 1e-5));
}

TEST(AutodiffPrimitive, Normalize) {
  auto p = randoms({{"x", {4, 6}}, {"gain", {6}}, {"bias", {6}}});
  expect_pass(check_primitive(
      p, [](Graph&, const auto& v) { return ag::normalize(NormKind::layer, v[0], v[1], v[2]); }, 1e-5));
  auto s = randoms({{"x", {4, 6}}, {"gain", {1}}});
  expect_pass(check_primitive(
      s, [](Graph&, const auto& v) { return ag::normalize(NormKind::scale, v[0], v[1], Var{}); }, 1e-5));
}

TEST(AutodiffPrimitive, Structural) {
  auto p = randoms({{"a", {6, 4}}, {"b", {2, 4}}});
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::reshape(v[0], {3, 8}); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::slice_rows(v[0], 2, 3); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::concat_rows({v[0], v[1], v[0]}); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::mean_rows(v[0]); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::reduce_sum(ag::mul(v[0], v[0])); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::rotary(v[0], 5); }));
  auto e = randoms({{"table", {5, 3}}});
  expect_pass(check_primitive(e, [](Graph&, const auto& v) { return ag::embedding(v[0], {4, 0, 4, 2}); }));
}

TEST(AutodiffPrimitive, DropoutAndCrossEntropy) {
  auto p = randoms({{"a", {5, 4}}});
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::dropout(v[0], 0.3, SeedState(9)); }));
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::cross_entropy(v[0], {0, 3, 1, 1, 2}); }));
}

TEST(AutodiffPrimitive, CausalConv) {
  auto p = randoms({{"x", {37}}, {"k", {37}}});
  expect_pass(check_primitive(p, [](Graph&, const auto& v) { return ag::causal_conv(v[0], v[1]); }));
}

TEST(AutodiffPrimitive, Attention) {
  const std::size_t n = 7;
  for (AttnFn fn : {AttnFn::softmax, AttnFn::relu2, AttnFn::laplace}) {
    for (bool causal : {false, true}) {
      for (std::optional<std::size_t> chunk : {std::optional<std::size_t>{}, std::optional<std::size_t>{3}}) {
        AttnConfig c;
        c.fn = fn;
        c.causal = causal;
        c.chunk = chunk;
        const double tol = fn == AttnFn::softmax ? 1e-5 : 1e-6;
        SCOPED_TRACE(std::string(to_string(fn)) + (causal ? " causal" : "") + (chunk ? " chunked" : ""));
        if (!(causal && fn == AttnFn::softmax)) {
          // Laplace scores are kept near its active range; a causal first row
          // is divided by one valid key and would otherwise sit in the tail.
          auto p = randoms({{"q", {n, 4}}, {"k", {n, 4}}, {"v", {n, 3}}}, 5, fn == AttnFn::laplace ? 0.4 : 1.0);
          expect_pass(check_primitive(
              p, [c](Graph&, const auto& v) { return ag::attention(v[0], v[1], v[2], Var{}, c, 0); }, tol));
          continue;
        }
        // The first query of each causal chunk sees a single key, so its
        // softmax weight is 1 and its gradient is identically zero. Those
        // rows form their own group, checked in absolute terms.
        const std::size_t step = chunk.value_or(n), lone = (n + step - 1) / step;
        auto p = randoms({{"q_lone", {lone, 4}}, {"q", {n - lone, 4}}, {"k", {n, 4}}, {"v", {n, 3}}}, 5);
        const ag::FdReport r = check_primitive(
            p,
            [c, step, n](Graph&, const auto& v) {
              std::vector<Var> rows;
              std::size_t rest = 0;
              for (std::size_t b = 0; b < n; b += step) {
                const std::size_t len = std::min(step, n - b);
                rows.push_back(ag::slice_rows(v[0], b / step, 1));
                if (len > 1) rows.push_back(ag::slice_rows(v[1], rest, len - 1));
                rest += len - 1;
              }
              return ag::attention(ag::concat_rows(rows), v[2], v[3], Var{}, c, 0);
            },
            tol);
        for (const auto& gr : r.groups) {
          if (gr.name == "q_lone") {
            EXPECT_LE(std::abs(gr.analytic), 1e-12);
            EXPECT_LE(std::abs(gr.numeric), 1e-10);
          } else {
            EXPECT_LE(gr.max_rel_err, tol) << gr.name << "[" << gr.worst_index << "]";
          }
        }
      }
    }
  }
}

TEST(AutodiffPrimitive, AttentionWithLearnedBias) {
  SeedState rng(8);
  std::vector<std::pair<std::string, Tensor>> p{{"q", rng.normal_tensor({6, 4}, 1.0)},
                                                {"k", rng.normal_tensor({6, 4}, 1.0)},
                                                {"v", rng.normal_tensor({6, 2}, 1.0)},
                                                {"table", rng.normal_tensor({2 * kRelativeBiasWindow + 1}, 0.5)}};
  AttnConfig c;
  c.bias = BiasKind::learned;
  c.chunk = 4;
  expect_pass(check_primitive(
      p, [c](Graph&, const auto& v) { return ag::attention(v[0], v[1], v[2], v[3], c, 3); }, 1e-5));
}

TEST(AutodiffPrimitive, EmaScanBackpropagationThroughTime) {
  SeedState rng(12);
  const std::size_t n = 16, d = 4, h = 4;
  EmaParams e = EmaParams::init(d, h, rng);
  std::vector<std::pair<std::string, Tensor>> p{{"x", rng.normal_tensor({n, d}, 1.0)}, {"alpha", e.alpha_logit},
                                                {"delta", e.delta_logit}, {"beta", e.beta},
                                                {"eta", e.eta}, {"h0", rng.normal_tensor({d, h}, 1.0)}};
  // Mean-squared output.
  expect_pass(check_primitive(p, [n, d](Graph&, const auto& v) {
    const Var y = ag::ema_scan(v[0], v[1], v[2], v[3], v[4], v[5]);
    return ag::affine(ag::reduce_sum(ag::mul(y, y)), 1.0 / static_cast<double>(n * d));
  }));
}

TEST(Autodiff, GradientOfSumIsSumOfGradients) {
  SeedState rng(21);
  Tensor a = rng.normal_tensor({3, 4}, 1.0), b = rng.normal_tensor({4, 2}, 1.0);
  auto f1 = [](Var x, Var y) { return ag::reduce_sum(ag::activation(Activation::silu, ag::matmul(x, y))); };
  auto f2 = [](Var x, Var y) { return ag::reduce_sum(ag::mul(ag::matmul(x, y), ag::matmul(x, y))); };
  auto grads = [&](int which) {
    Graph g;
    const Var x = g.param("a", a), y = g.param("b", b);
    const Var l = which == 0 ? f1(x, y) : which == 1 ? f2(x, y) : ag::add(f1(x, y), f2(x, y));
    g.forward();
    return g.backward(l);
  };
  const auto g1 = grads(0), g2 = grads(1), g12 = grads(2);
  for (const char* name : {"a", "b"}) {
    Tensor sum = g1.at(name);
    sum += g2.at(name);
    EXPECT_LE(max_abs_diff(sum, g12.at(name)), 1e-12) << name;
  }
}

TEST(Autodiff, BackwardIsBitReproducible) {
  SeedState rng(22);
  Tensor q = rng.normal_tensor({8, 4}, 1.0), v = rng.normal_tensor({8, 4}, 1.0);
  auto run = [&] {
    Graph g;
    const Var pq = g.param("q", q), pv = g.param("v", v);
    AttnConfig c;
    c.fn = AttnFn::laplace;
    const Var l = ag::reduce_sum(ag::attention(pq, pq, pv, Var{}, c, 0));
    g.forward();
    return g.backward(l);
  };
  const auto a = run(), b = run();
  EXPECT_TRUE(a.at("q").identical(b.at("q")));
  EXPECT_TRUE(a.at("v").identical(b.at("v")));
}

TEST(Autodiff, ForwardIsReproducibleOnRerun) {
  SeedState rng(23);
  Tensor w = rng.normal_tensor({4, 4}, 1.0);
  Graph g;
  const Var y = ag::softmax_rows(ag::matmul(g.param("w", w), g.param("w", w)));
  g.forward();
  const Tensor first = g.value(y);
  g.forward();
  EXPECT_TRUE(g.value(y).identical(first));
}

TEST(Autodiff, NonFiniteLossIsNumericalError) {
  Tensor t = Tensor::vector({1.0});
  std::vector<ag::NamedParam> named{{"t", &t}};
  ag::GradientSet gs;
  gs.add("t", Tensor::vector({0.0}));
  EXPECT_THROW(ag::finite_diff_check([&] { return t[0] > 1.0 ? std::nan("") : t[0]; }, named, gs), NumericalError);
}
