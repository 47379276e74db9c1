#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mega/model.h"
#include "mega/train.h"

using namespace mega;

namespace {

// ---- straight-line layer transcription (no library helpers) ------------------

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

double sg(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double sl(double x) { return x * sg(x); }

// act(A·W + b) with act applied by `f`.
template <typename F>
Mat dense(const Mat& a, const Tensor& w, const Tensor& b, F f) {
  Mat out(a.size(), std::vector<double>(w.cols()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < w.rows(); ++k) s += a[i][k] * w(k, j);
      out[i][j] = f(s);
    }
  return out;
}

Mat reference_layer(const MegaLayerParams& p, const Tensor& xt) {
  const Mat x = to_mat(xt);
  const std::size_t n = x.size(), d = x[0].size(), h = p.ema.order();
  // EMA
  Mat xp(n, std::vector<double>(d));
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> hid(h);
    for (std::size_t m = 0; m < h; ++m) hid[m] = p.ema.h0(j, m);
    for (std::size_t t = 0; t < n; ++t) {
      double y = 0.0;
      for (std::size_t m = 0; m < h; ++m) {
        const double a = sg(p.ema.alpha_logit(j, m)), dl = sg(p.ema.delta_logit(j, m));
        hid[m] = a * p.ema.beta(j, m) * x[t][j] + (1.0 - a * dl) * hid[m];
        y += p.ema.eta(j, m) * hid[m];
      }
      xp[t][j] = y;
    }
  }
  const Mat z = dense(xp, p.W_z, p.b_z, sl);
  const std::size_t zw = z[0].size();
  Mat q = z, k = z;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < zw; ++c) {
      q[i][c] = p.kappa_q[c] * z[i][c] + p.mu_q[c];
      k[i][c] = p.kappa_k[c] * z[i][c] + p.mu_k[c];
    }
  const Mat v = dense(x, p.W_v, p.b_v, sl);
  const std::size_t vw = v[0].size();
  Mat o(n, std::vector<double>(vw, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n);
    double mx = -1e300, sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < zw; ++c) acc += q[i][c] * k[j][c];
      s[j] = acc / std::sqrt(static_cast<double>(zw));
      mx = std::max(mx, s[j]);
    }
    for (double& e : s) sum += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < vw; ++c) o[i][c] += s[j] / sum * v[j][c];
  }
  const Mat gamma = dense(xp, p.W_gamma, p.b_gamma, sl);
  const Mat phi = dense(xp, p.W_phi, p.b_phi, sg);
  Mat y(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double s = p.b_h[c];
      for (std::size_t k2 = 0; k2 < d; ++k2) s += xp[i][k2] * p.W_h(k2, c);
      for (std::size_t k2 = 0; k2 < vw; ++k2) s += gamma[i][k2] * o[i][k2] * p.U_h(k2, c);
      y[i][c] = phi[i][c] * sl(s) + (1.0 - phi[i][c]) * x[i][c];
    }
  return y;
}

double gap(const Mat& a, const Tensor& b) {
  double g = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) g = std::max(g, std::abs(a[i][j] - b(i, j)));
  return g;
}

ModelConfig small_cfg() {
  ModelConfig c;
  c.d = 8;
  c.z = 4;
  c.v = 16;
  c.h_ema = 4;
  return c;
}

// Perturbs every tensor so zero-initialized biases and mu are exercised.
template <typename P>
void jitter(P& p, SeedState& rng, double s) {
  p.visit("", [&](const std::string&, Tensor& t, bool) {
    for (double& v : t.data()) v += rng.normal(0.0, s);
  });
}

}  // namespace

TEST(MegaLayer, MatchesStraightLineTranscription) {
  SeedState rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    MegaLayerParams p = MegaLayerParams::init(small_cfg(), rng);
    jitter(p, rng, 0.3);
    const Tensor x = rng.normal_tensor({12, 8}, 1.0);
    EXPECT_LE(gap(reference_layer(p, x), mega_layer_forward(p, x, AttnConfig{}).y), 1e-12);
  }
}

TEST(MegaLayer, HalfGateIsExact) {
  SeedState rng(2);
  MegaLayerParams p = MegaLayerParams::init(small_cfg(), rng);
  p.W_phi.fill(0.0);
  p.b_phi.fill(0.0);
  const Tensor x = rng.normal_tensor({9, 8}, 1.0);
  const MegaLayerResult r = mega_layer_forward(p, x, AttnConfig{});
  for (double v : r.phi.data()) EXPECT_EQ(v, 0.5);
  for (std::size_t i = 0; i < r.y.size(); ++i) EXPECT_EQ(r.y[i], 0.5 * r.h_hat[i] + 0.5 * x[i]);
}

TEST(MegaLayer, SaturatedGatePassesInputThrough) {
  SeedState rng(3);
  MegaLayerParams p = MegaLayerParams::init(small_cfg(), rng);
  p.W_phi.fill(0.0);
  p.b_phi.fill(-40.0);
  const Tensor x = rng.normal_tensor({9, 8}, 1.0);
  EXPECT_LE(max_abs_diff(mega_layer_forward(p, x, AttnConfig{}).y, x), 1e-12);
}

TEST(MegaLayer, OutputBetweenCandidateAndInput) {
  SeedState rng(4);
  for (AttnFn fn : {AttnFn::softmax, AttnFn::relu2, AttnFn::laplace}) {
    MegaLayerParams p = MegaLayerParams::init(small_cfg(), rng);
    jitter(p, rng, 0.5);
    AttnConfig c;
    c.fn = fn;
    const Tensor x = rng.normal_tensor({14, 8}, 2.0);
    const MegaLayerResult r = mega_layer_forward(p, x, c);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_GE(r.y[i], std::min(r.h_hat[i], x[i]) - 1e-15);
      EXPECT_LE(r.y[i], std::max(r.h_hat[i], x[i]) + 1e-15);
    }
  }
}

TEST(MegaLayer, ChunkAtLeastSequenceEqualsFull) {
  SeedState rng(5);
  const MegaLayerParams p = MegaLayerParams::init(small_cfg(), rng);
  const Tensor x = rng.normal_tensor({10, 8}, 1.0);
  for (AttnFn fn : {AttnFn::softmax, AttnFn::relu2, AttnFn::laplace}) {
    AttnConfig full;
    full.fn = fn;
    AttnConfig c = full;
    c.chunk = 10;
    EXPECT_LE(max_abs_diff(mega_layer_forward(p, x, full).y, mega_layer_forward(p, x, c).y), 1e-12);
  }
}

TEST(MegaLayer, ShapeErrors) {
  SeedState rng(6);
  const MegaLayerParams p = MegaLayerParams::init(small_cfg(), rng);
  EXPECT_THROW(mega_layer_forward(p, Tensor({4, 7}), AttnConfig{}), DimensionError);
}

TEST(MegaBlock, PostNormMatchesComposition) {
  SeedState rng(7);
  ModelConfig cfg = small_cfg();
  cfg.pre_norm = false;
  MegaBlockParams b = MegaBlockParams::init(cfg, rng);
  jitter(b, rng, 0.2);
  const Tensor x = rng.normal_tensor({11, 8}, 1.0);
  const Tensor y = normalize(NormKind::layer, mega_layer_forward(b.layer, x, AttnConfig{}).y, b.norm1.gain, &b.norm1.bias);
  Tensor hid = matmul(y, b.ffn.W_1);
  for (std::size_t i = 0; i < hid.rows(); ++i)
    for (std::size_t j = 0; j < hid.cols(); ++j) hid(i, j) = silu(hid(i, j) + b.ffn.b_1[j]);
  Tensor f = matmul(hid, b.ffn.W_2);
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (std::size_t j = 0; j < f.cols(); ++j) f(i, j) += b.ffn.b_2[j] + y(i, j);
  const Tensor want = normalize(NormKind::layer, f, b.norm2.gain, &b.norm2.bias);
  const Tensor got = mega_block_forward(b, x, AttnConfig{});
  EXPECT_EQ(got.shape(), x.shape());
  EXPECT_LE(max_abs_diff(got, want), 1e-12);
}

TEST(MegaBlock, ZeroFfnPostNorm) {
  SeedState rng(8);
  ModelConfig cfg = small_cfg();
  cfg.pre_norm = false;
  MegaBlockParams b = MegaBlockParams::init(cfg, rng);
  b.ffn.W_1.fill(0.0);
  b.ffn.W_2.fill(0.0);
  b.ffn.b_1.fill(0.0);
  b.ffn.b_2.fill(0.0);
  const Tensor x = rng.normal_tensor({7, 8}, 1.0);
  const Tensor y = normalize(NormKind::layer, mega_layer_forward(b.layer, x, AttnConfig{}).y, b.norm1.gain, &b.norm1.bias);
  EXPECT_LE(max_abs_diff(mega_block_forward(b, x, AttnConfig{}), normalize(NormKind::layer, y, b.norm2.gain, &b.norm2.bias)),
            1e-12);
}

TEST(MegaBlock, ShapePreserved) {
  SeedState rng(9);
  for (std::size_t d : {4, 8, 12}) {
    for (std::size_t n : {1, 5, 33}) {
      ModelConfig cfg;
      cfg.d = d;
      cfg.h_ema = 3;
      for (NormKind nk : {NormKind::layer, NormKind::scale}) {
        cfg.norm = nk;
        const MegaBlockParams b = MegaBlockParams::init(cfg, rng);
        const Tensor x = rng.normal_tensor({n, d}, 1.0);
        EXPECT_EQ(mega_block_forward(b, x, cfg.attn()).shape(), x.shape());
      }
    }
  }
}

TEST(Model, CausalLmIgnoresLaterTokens) {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.h_ema = 4;
  cfg.vocab = 10;
  cfg.mode = ModelMode::causal_lm;
  cfg.causal = true;
  cfg.chunk = 6;
  cfg.bias = BiasKind::rotary;
  SeedState rng(10);
  const ModelParams params = ModelParams::init(cfg, rng);
  std::vector<int> toks{1, 4, 2, 9, 0, 3, 3, 7, 5, 8, 2, 6, 1};
  const Tensor a = model_forward(cfg, params, toks, ModelMode::causal_lm);
  for (std::size_t t = 0; t + 1 < toks.size(); ++t) {
    std::vector<int> other = toks;
    other[t + 1] = (other[t + 1] + 3) % 10;
    const Tensor b = model_forward(cfg, params, other, ModelMode::causal_lm);
    for (std::size_t i = 0; i <= t; ++i)
      for (std::size_t c = 0; c < a.cols(); ++c) ASSERT_LE(std::abs(a(i, c) - b(i, c)), 1e-12);
  }
}

TEST(Model, ZeroDepthIsPooledEmbeddingAndHead) {
  ModelConfig cfg;
  cfg.depth = 0;
  cfg.d = 6;
  cfg.vocab = 5;
  cfg.classes = 3;
  SeedState rng(11);
  const ModelParams p = ModelParams::init(cfg, rng);
  const std::vector<int> ids{0, 4, 4, 2};
  const Tensor logits = model_forward(cfg, p, ids, ModelMode::classifier);
  for (std::size_t k = 0; k < 3; ++k) {
    double want = p.head_b[k];
    for (std::size_t j = 0; j < 6; ++j) {
      double pooled = 0.0;
      for (int id : ids) pooled += p.embedding(static_cast<std::size_t>(id), j);
      want += pooled / 4.0 * p.head_w(j, k);
    }
    EXPECT_NEAR(logits[k], want, 1e-14);
  }
}

TEST(Model, SegmentedLmEqualsWholeSequence) {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.d = 8;
  cfg.h_ema = 4;
  cfg.vocab = 9;
  cfg.mode = ModelMode::causal_lm;
  cfg.causal = true;
  cfg.chunk = 4;
  cfg.bias = BiasKind::rotary;
  SeedState rng(12);
  const ModelParams p = ModelParams::init(cfg, rng);
  std::vector<int> toks(16);
  for (int& t : toks) t = static_cast<int>(rng.below(9));
  const Tensor whole = model_forward(cfg, p, toks, ModelMode::causal_lm);
  ModelState st = initial_state(cfg, p);
  std::size_t row = 0;
  for (std::size_t len : {4, 8, 4}) {
    const std::vector<int> seg(toks.begin() + static_cast<std::ptrdiff_t>(row),
                               toks.begin() + static_cast<std::ptrdiff_t>(row + len));
    const Tensor part = model_forward(cfg, p, seg, ModelMode::causal_lm, &st);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t c = 0; c < part.cols(); ++c) EXPECT_NEAR(part(i, c), whole(row + i, c), 1e-10);
    row += len;
  }
}

TEST(Model, ModeMismatchIsConfigError) {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.vocab = 4;
  SeedState rng(13);
  const ModelParams p = ModelParams::init(cfg, rng);
  EXPECT_THROW(model_forward(cfg, p, std::vector<int>{1, 2}, ModelMode::causal_lm), ConfigError);
}

TEST(Model, ClassifierChunkAtLeastSequenceEqualsFull) {
  ModelConfig cfg = small_cfg();
  cfg.vocab = 7;
  cfg.classes = 3;
  SeedState rng(14);
  const ModelParams p = ModelParams::init(cfg, rng);
  const std::vector<int> ids{1, 2, 3, 6, 0, 5, 5, 1, 2};
  const Tensor full = model_forward(cfg, p, ids, ModelMode::classifier);
  for (std::size_t c : {9, 12, 100}) {
    ModelConfig cc = cfg;
    cc.chunk = c;
    EXPECT_LE(max_abs_diff(model_forward(cc, p, ids, ModelMode::classifier), full), 1e-10);
  }
}

TEST(Model, ClassifierCrossEntropyGradients) {
  for (AttnFn fn : {AttnFn::softmax, AttnFn::relu2, AttnFn::laplace}) {
    ModelConfig cfg = small_cfg();
    cfg.depth = 1;
    cfg.attn_fn = fn;
    cfg.bias = BiasKind::rotary;
    cfg.classes = 3;
    SeedState rng(15);
    ModelParams p = ModelParams::init(cfg, rng);
    p.visit([&](const std::string&, Tensor& t, bool) {
      for (double& v : t.data()) v += rng.normal(0.0, 0.4);
    });
    const Tensor x = rng.normal_tensor({16, 8}, 1.0);
    ag::Graph g;
    const ModelVars mv = build_model(g, cfg, p, x, nullptr);
    const ag::Var loss = ag::cross_entropy(mv.logits, {2});
    g.forward();
    const auto grads = g.backward(loss);
    auto named = named_params(p);
    const auto report = ag::finite_diff_check(
        [&] {
          g.forward();
          return g.value(loss)[0];
        },
        named, grads);
    std::size_t layer_groups = 0;
    for (const auto& gr : report.groups) layer_groups += gr.name.find(".layer.") != std::string::npos;
    EXPECT_GE(layer_groups, 15u);
    EXPECT_LE(report.max_rel_err(), 1e-4) << to_string(fn);
  }
}

TEST(ReferenceMha, MatchesPerHeadLoops) {
  SeedState rng(16);
  const ReferenceMhaParams p = ReferenceMhaParams::init(8, rng);
  const Tensor x = rng.normal_tensor({6, 8}, 1.0);
  const MhaResult r = reference_mha(p, x, 2);
  const Mat q = dense(to_mat(x), p.W_q, p.b_q, [](double s) { return s; });
  const Mat k = dense(to_mat(x), p.W_k, p.b_k, [](double s) { return s; });
  const Mat v = dense(to_mat(x), p.W_v, p.b_v, [](double s) { return s; });
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 6; ++i) {
      std::vector<double> s(6);
      double mx = -1e300, sum = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        double acc = 0.0;
        for (std::size_t c = 4 * h; c < 4 * h + 4; ++c) acc += q[i][c] * k[j][c];
        mx = std::max(mx, s[j] = acc / 2.0);
      }
      for (double& e : s) sum += (e = std::exp(e - mx));
      for (std::size_t c = 4 * h; c < 4 * h + 4; ++c) {
        double o = 0.0;
        for (std::size_t j = 0; j < 6; ++j) o += s[j] / sum * v[j][c];
        EXPECT_NEAR(r.output(i, c), o, 1e-12);
      }
    }
  }
  EXPECT_THROW(reference_mha(p, x, 3), ConfigError);
}

TEST(ReferenceMha, SingleHeadAndSingleToken) {
  SeedState rng(17);
  const ReferenceMhaParams p = ReferenceMhaParams::init(8, rng);
  const Tensor x = rng.normal_tensor({5, 8}, 1.0);
  const MhaResult r = reference_mha(p, x, 1);
  EXPECT_LE(max_abs_diff(r.head_weights[0], r.shared_weights), 1e-15);
  EXPECT_LE(max_abs_diff(r.output, matmul(r.shared_weights, r.v)), 1e-12);
  const Tensor x1 = rng.normal_tensor({1, 8}, 1.0);
  const MhaResult r1 = reference_mha(p, x1, 4);
  EXPECT_LE(max_abs_diff(r1.output, r1.v), 1e-15);
}

TEST(GatedAttentionIdentity, Examples) {
  SeedState rng(18);
  for (std::size_t heads : {1, 2, 4}) {
    ReferenceMhaParams p = ReferenceMhaParams::init(8, rng);
    const Tensor x = rng.normal_tensor({8, 8}, 1.0);
    const Theorem1Report r = theorem1_check(x, p, heads);
    EXPECT_LE(r.max_gap, heads == 1 ? 1e-15 : 1e-8);
    EXPECT_LE(r.excluded.size(), 2u);
    EXPECT_EQ(r.coordinates, 64u);
    for (double& w : p.W_v.data()) w *= 10.0;
    for (double& b : p.b_v.data()) b *= 10.0;
    EXPECT_LE(theorem1_check(x, p, heads).max_gap, 1e-8);
  }
}
