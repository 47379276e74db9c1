#include "mega/model.h"

#include <algorithm>
#include <cmath>

namespace mega {

Pooling parse_pooling(std::string_view name) {
  if (name == "mean") return Pooling::mean;
  if (name == "last") return Pooling::last;
  throw ConfigError("unknown pooling '" + std::string(name) + "' (expected mean or last)");
}

std::string_view to_string(Pooling p) { return p == Pooling::mean ? "mean" : "last"; }

ModelMode parse_model_mode(std::string_view name) {
  if (name == "classifier") return ModelMode::classifier;
  if (name == "causal_lm") return ModelMode::causal_lm;
  throw ConfigError("unknown model mode '" + std::string(name) + "' (expected classifier or causal_lm)");
}

std::string_view to_string(ModelMode m) { return m == ModelMode::classifier ? "classifier" : "causal_lm"; }

std::size_t ModelConfig::z_dim() const {
  if (z) return z;
  const std::size_t q = (d + 3) / 4;
  return std::max<std::size_t>(2, q + (q % 2));
}

AttnConfig ModelConfig::attn() const {
  AttnConfig c;
  c.fn = attn_fn;
  c.causal = causal;
  c.chunk = chunk;
  c.bias = bias;
  c.dropout = dropout;
  return c;
}

void ModelConfig::validate() const {
  if (d == 0) throw ConfigError("model.d must be positive");
  if (bias == BiasKind::rotary && z_dim() % 2 != 0) {
    throw ConfigError("rotary bias needs an even z, got " + std::to_string(z_dim()));
  }
  attn().validate();
  if (mode == ModelMode::causal_lm) {
    if (!causal) throw ConfigError("causal_lm mode requires causal attention");
    if (vocab == 0) throw ConfigError("causal_lm mode requires a token vocabulary");
  } else if (classes < 2) {
    throw ConfigError("classifier needs at least 2 classes");
  }
  if (tie_embeddings && (mode != ModelMode::causal_lm || vocab == 0)) {
    throw ConfigError("tie_embeddings applies to causal_lm with a vocabulary");
  }
}

// ---- init -----------------------------------------------------------------------

namespace {

Tensor dense(std::size_t in, std::size_t out, SeedState& rng) {
  return rng.normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
}

Tensor offsets(std::size_t n, SeedState& rng) {
  Tensor t = rng.normal_tensor({n}, 0.02);
  for (double& v : t.data()) v += 1.0;
  return t;
}

}  // namespace

MegaLayerParams MegaLayerParams::init(const ModelConfig& cfg, SeedState& rng) {
  const std::size_t d = cfg.d, z = cfg.z_dim(), v = cfg.v_dim();
  MegaLayerParams p;
  p.W_z = dense(d, z, rng);
  p.b_z = Tensor({z});
  p.kappa_q = offsets(z, rng);
  p.mu_q = Tensor({z});
  p.kappa_k = offsets(z, rng);
  p.mu_k = Tensor({z});
  p.W_v = dense(d, v, rng);
  p.b_v = Tensor({v});
  p.W_gamma = dense(d, v, rng);
  p.b_gamma = Tensor({v});
  p.W_phi = dense(d, d, rng);
  p.b_phi = Tensor({d});
  p.W_h = dense(d, d, rng);
  p.U_h = dense(v, d, rng);
  p.b_h = Tensor({d});
  if (cfg.h_ema > 0) p.ema = EmaParams::init(d, cfg.h_ema, rng);
  if (cfg.bias == BiasKind::learned) p.rel_bias = Tensor({2 * static_cast<std::size_t>(kRelativeBiasWindow) + 1});
  return p;
}

void MegaLayerParams::validate() const {
  const std::size_t d = W_z.rows(), z = W_z.cols(), v = W_v.cols();
  auto expect = [](const Tensor& t, Shape shape, const char* name) {
    if (t.shape() != shape) {
      throw DimensionError(std::string("mega layer parameter ") + name + " has shape " + to_string(t.shape()) +
                           ", expected " + to_string(shape));
    }
  };
  expect(W_z, {d, z}, "W_z");
  expect(b_z, {z}, "b_z");
  expect(kappa_q, {z}, "kappa_q");
  expect(mu_q, {z}, "mu_q");
  expect(kappa_k, {z}, "kappa_k");
  expect(mu_k, {z}, "mu_k");
  expect(W_v, {d, v}, "W_v");
  expect(b_v, {v}, "b_v");
  expect(W_gamma, {d, v}, "W_gamma");
  expect(b_gamma, {v}, "b_gamma");
  expect(W_phi, {d, d}, "W_phi");
  expect(b_phi, {d}, "b_phi");
  expect(W_h, {d, d}, "W_h");
  expect(U_h, {v, d}, "U_h");
  expect(b_h, {d}, "b_h");
  if (has_ema()) {
    ema.validate();
    if (ema.dim() != d) throw DimensionError("EMA width " + std::to_string(ema.dim()) + " != d " + std::to_string(d));
  }
}

FfnParams FfnParams::init(std::size_t d, std::size_t hidden, SeedState& rng) {
  FfnParams f;
  f.W_1 = dense(d, hidden, rng);
  f.b_1 = Tensor({hidden});
  f.W_2 = dense(hidden, d, rng);
  f.b_2 = Tensor({d});
  return f;
}

NormParams NormParams::init(NormKind kind, std::size_t d) {
  NormParams n;
  if (kind == NormKind::layer) {
    n.gain = Tensor({d}, 1.0);
    n.bias = Tensor({d});
  } else {
    n.gain = Tensor({1}, std::sqrt(static_cast<double>(d)));
  }
  return n;
}

MegaBlockParams MegaBlockParams::init(const ModelConfig& cfg, SeedState& rng) {
  MegaBlockParams b;
  b.layer = MegaLayerParams::init(cfg, rng);
  b.ffn = FfnParams::init(cfg.d, cfg.ffn_dim(), rng);
  b.norm1 = NormParams::init(cfg.norm, cfg.d);
  b.norm2 = NormParams::init(cfg.norm, cfg.d);
  b.norm_kind = cfg.norm;
  b.pre_norm = cfg.pre_norm;
  return b;
}

ModelParams ModelParams::init(const ModelConfig& cfg, SeedState& rng) {
  cfg.validate();
  ModelParams m;
  if (cfg.vocab > 0) m.embedding = rng.normal_tensor({cfg.vocab, cfg.d}, 1.0);
  for (std::size_t i = 0; i < cfg.depth; ++i) m.blocks.push_back(MegaBlockParams::init(cfg, rng));
  if (cfg.pre_norm && cfg.depth > 0) m.final_norm = NormParams::init(cfg.norm, cfg.d);
  const std::size_t out = cfg.mode == ModelMode::causal_lm ? cfg.vocab : cfg.classes;
  if (!cfg.tie_embeddings) m.head_w = dense(cfg.d, out, rng);
  m.head_b = Tensor({out});
  return m;
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t, bool) { n += t.size(); });
  return n;
}

// ---- graph builders --------------------------------------------------------------

LayerVars build_mega_layer(ag::Graph& g, const std::string& prefix, const MegaLayerParams& p, ag::Var x,
                           ag::Var residual, const AttnConfig& config, const LayerState* state,
                           std::optional<SeedState> dropout_seed) {
  using namespace ag;
  auto P = [&](const char* name, const Tensor& t) { return g.param(prefix + name, t, true); };
  auto dense = [&](Var in, const char* w, const Tensor& wt, const char* b, const Tensor& bt) {
    return add_row(matmul(in, P(w, wt)), P(b, bt));
  };
  const std::int64_t offset = state ? state->position : 0;

  LayerVars lv;
  lv.x_prime = x;
  if (p.has_ema()) {
    Var h_init;
    if (state) {
      if (!state->ema_hidden.same_shape(p.ema.h0)) {
        throw DimensionError("layer state EMA shape " + to_string(state->ema_hidden.shape()) + " != " +
                             to_string(p.ema.h0.shape()));
      }
      h_init = g.input(state->ema_hidden);
    } else {
      h_init = g.param(prefix + "ema.h0", p.ema.h0, p.ema.h0_trainable);
    }
    lv.x_prime = ema_scan(x, P("ema.alpha_logit", p.ema.alpha_logit), P("ema.delta_logit", p.ema.delta_logit),
                          P("ema.beta", p.ema.beta), P("ema.eta", p.ema.eta), h_init);
    lv.ema_final = lv.x_prime;
  }
  const Var xp = lv.x_prime;
  lv.z = silu(dense(xp, "W_z", p.W_z, "b_z", p.b_z));
  lv.q = add_row(mul_row(lv.z, P("kappa_q", p.kappa_q)), P("mu_q", p.mu_q));
  lv.k = add_row(mul_row(lv.z, P("kappa_k", p.kappa_k)), P("mu_k", p.mu_k));
  if (config.bias == BiasKind::rotary) {
    lv.q = rotary(lv.q, offset);
    lv.k = rotary(lv.k, offset);
  }
  lv.v = silu(dense(x, "W_v", p.W_v, "b_v", p.b_v));
  Var table;
  if (config.bias == BiasKind::learned) {
    if (p.rel_bias.empty()) throw ConfigError("learned relative bias configured but the layer has no bias table");
    table = P("rel_bias", p.rel_bias);
  }
  AttnConfig ac = config;
  if (!dropout_seed) ac.dropout = 0.0;
  lv.o = attention(lv.q, lv.k, lv.v, table, ac, offset, dropout_seed);
  lv.gamma = silu(dense(xp, "W_gamma", p.W_gamma, "b_gamma", p.b_gamma));
  lv.phi = sigmoid(dense(xp, "W_phi", p.W_phi, "b_phi", p.b_phi));
  lv.h_hat = silu(add_row(add(matmul(xp, P("W_h", p.W_h)), matmul(mul(lv.gamma, lv.o), P("U_h", p.U_h))),
                          P("b_h", p.b_h)));
  const Var res = residual.valid() ? residual : x;
  lv.y = add(mul(lv.phi, lv.h_hat), mul(affine(lv.phi, -1.0, 1.0), res));
  return lv;
}

namespace {

ag::Var norm_vars(ag::Graph& g, const std::string& prefix, NormKind kind, const NormParams& n, ag::Var x) {
  ag::Var bias;
  if (kind == NormKind::layer) bias = g.param(prefix + "bias", n.bias, true);
  return ag::normalize(kind, x, g.param(prefix + "gain", n.gain, true), bias);
}

ag::Var ffn_vars(ag::Graph& g, const std::string& prefix, const FfnParams& f, ag::Var x, double rate,
                 SeedState* rng) {
  using namespace ag;
  Var h = silu(add_row(matmul(x, g.param(prefix + "W_1", f.W_1)), g.param(prefix + "b_1", f.b_1)));
  if (rng && rate > 0.0) h = dropout(h, rate, rng->fork(rng->next_u64()));
  return add_row(matmul(h, g.param(prefix + "W_2", f.W_2)), g.param(prefix + "b_2", f.b_2));
}

}  // namespace

BlockVars build_mega_block(ag::Graph& g, const std::string& prefix, const MegaBlockParams& b, ag::Var x,
                           const AttnConfig& config, const LayerState* state, double ffn_dropout,
                           SeedState* dropout_rng) {
  using namespace ag;
  std::optional<SeedState> attn_seed;
  if (dropout_rng && config.dropout > 0.0) attn_seed = dropout_rng->fork(dropout_rng->next_u64());
  BlockVars bv;
  if (b.pre_norm) {
    const Var xn = norm_vars(g, prefix + "norm1.", b.norm_kind, b.norm1, x);
    bv.layer = build_mega_layer(g, prefix + "layer.", b.layer, xn, x, config, state, attn_seed);
    const Var y = bv.layer.y;
    const Var yn = norm_vars(g, prefix + "norm2.", b.norm_kind, b.norm2, y);
    bv.y = add(y, ffn_vars(g, prefix + "ffn.", b.ffn, yn, ffn_dropout, dropout_rng));
  } else {
    bv.layer = build_mega_layer(g, prefix + "layer.", b.layer, x, Var{}, config, state, attn_seed);
    const Var y = norm_vars(g, prefix + "norm1.", b.norm_kind, b.norm1, bv.layer.y);
    const Var f = ffn_vars(g, prefix + "ffn.", b.ffn, y, ffn_dropout, dropout_rng);
    bv.y = norm_vars(g, prefix + "norm2.", b.norm_kind, b.norm2, add(f, y));
  }
  return bv;
}

ModelVars build_model(ag::Graph& g, const ModelConfig& cfg, const ModelParams& params, const ModelInput& input,
                      const ModelState* state, SeedState* dropout_rng) {
  using namespace ag;
  cfg.validate();
  if (params.blocks.size() != cfg.depth) {
    throw ConfigError("model has " + std::to_string(params.blocks.size()) + " blocks, config says " +
                      std::to_string(cfg.depth));
  }
  if (state && state->layers.size() != cfg.depth) {
    throw ConfigError("model state has " + std::to_string(state->layers.size()) + " layers, expected " +
                      std::to_string(cfg.depth));
  }
  ModelVars mv;
  Var x;
  if (const auto* ids = std::get_if<std::vector<int>>(&input)) {
    if (cfg.vocab == 0 || params.embedding.empty()) throw ConfigError("token input needs a vocabulary");
    if (ids->empty()) throw DimensionError("empty token sequence");
    x = embedding(g.param("embedding", params.embedding), *ids);
    mv.n = ids->size();
  } else {
    const Tensor& feats = std::get<Tensor>(input);
    if (cfg.mode == ModelMode::causal_lm) throw ConfigError("causal_lm mode takes token ids");
    if (feats.rank() != 2 || feats.cols() != cfg.d) {
      throw DimensionError("feature input " + to_string(feats.shape()) + " must be n×" + std::to_string(cfg.d));
    }
    x = g.input(feats);
    mv.n = feats.rows();
  }
  const AttnConfig ac = cfg.attn();
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const LayerState* ls = state ? &state->layers[i] : nullptr;
    BlockVars bv = build_mega_block(g, "block" + std::to_string(i) + ".", params.blocks[i], x, ac, ls, cfg.dropout,
                                    dropout_rng);
    x = bv.y;
    mv.ema_finals.push_back(bv.layer.ema_final);
  }
  if (cfg.pre_norm && cfg.depth > 0) x = norm_vars(g, "final_norm.", cfg.norm, params.final_norm, x);
  if (cfg.mode == ModelMode::classifier) {
    const Var pooled = cfg.pool == Pooling::mean ? mean_rows(x) : slice_rows(x, mv.n - 1, 1);
    mv.logits = add_row(matmul(pooled, g.param("head.w", params.head_w)), g.param("head.b", params.head_b));
  } else {
    const Var w = cfg.tie_embeddings ? transpose(g.param("embedding", params.embedding))
                                     : g.param("head.w", params.head_w);
    mv.logits = add_row(matmul(x, w), g.param("head.b", params.head_b));
  }
  return mv;
}

// ---- plain evaluation ------------------------------------------------------------

MegaLayerResult mega_layer_forward(const MegaLayerParams& params, const Tensor& x, const AttnConfig& config,
                                   const std::optional<LayerState>& state) {
  params.validate();
  if (x.rank() != 2 || x.cols() != params.dim()) {
    throw DimensionError("layer input " + to_string(x.shape()) + " must be n×" + std::to_string(params.dim()));
  }
  ag::Graph g;
  const LayerVars lv =
      build_mega_layer(g, "", params, g.input(x), ag::Var{}, config, state ? &*state : nullptr, std::nullopt);
  g.forward();
  MegaLayerResult r;
  r.y = g.value(lv.y);
  r.x_prime = g.value(lv.x_prime);
  r.z = g.value(lv.z);
  r.q = g.value(lv.q);
  r.k = g.value(lv.k);
  r.v = g.value(lv.v);
  r.o = g.value(lv.o);
  r.gamma = g.value(lv.gamma);
  r.phi = g.value(lv.phi);
  r.h_hat = g.value(lv.h_hat);
  r.state.position = (state ? state->position : 0) + static_cast<std::int64_t>(x.rows());
  if (lv.ema_final.valid()) r.state.ema_hidden = *g.aux(lv.ema_final);
  return r;
}

Tensor mega_block_forward(const MegaBlockParams& block, const Tensor& x, const AttnConfig& config) {
  block.layer.validate();
  if (x.rank() != 2 || x.cols() != block.layer.dim()) {
    throw DimensionError("block input " + to_string(x.shape()) + " must be n×" + std::to_string(block.layer.dim()));
  }
  ag::Graph g;
  const BlockVars bv = build_mega_block(g, "", block, g.input(x), config, nullptr);
  g.forward();
  return g.value(bv.y);
}

Tensor model_forward(const ModelConfig& cfg, const ModelParams& params, const ModelInput& input, ModelMode mode,
                     ModelState* state) {
  if (mode != cfg.mode) {
    throw ConfigError("model configured as " + std::string(to_string(cfg.mode)) + " but run as " +
                      std::string(to_string(mode)));
  }
  ag::Graph g;
  const ModelVars mv = build_model(g, cfg, params, input, state);
  g.forward();
  if (state) {
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      LayerState& ls = state->layers[i];
      if (mv.ema_finals[i].valid()) ls.ema_hidden = *g.aux(mv.ema_finals[i]);
      ls.position += static_cast<std::int64_t>(mv.n);
    }
  }
  return g.value(mv.logits);
}

ModelState initial_state(const ModelConfig& cfg, const ModelParams& params) {
  ModelState s;
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    LayerState ls;
    if (params.blocks[i].layer.has_ema()) ls.ema_hidden = params.blocks[i].layer.ema.h0;
    s.layers.push_back(ls);
  }
  return s;
}

// ---- reference multi-head attention -----------------------------------------------

ReferenceMhaParams ReferenceMhaParams::init(std::size_t d, SeedState& rng) {
  ReferenceMhaParams p;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  p.W_q = rng.normal_tensor({d, d}, sd);
  p.b_q = rng.normal_tensor({d}, 0.1);
  p.W_k = rng.normal_tensor({d, d}, sd);
  p.b_k = rng.normal_tensor({d}, 0.1);
  p.W_v = rng.normal_tensor({d, d}, sd);
  p.b_v = rng.normal_tensor({d}, 0.1);
  return p;
}

namespace {

Tensor affine_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b[j];
  return y;
}

// softmax(a[:, cols] b[:, cols]^T * scale) over rows.
Tensor softmax_scores(const Tensor& a, const Tensor& b, std::size_t c0, std::size_t width, double scale) {
  const std::size_t n = a.rows();
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = c0; c < c0 + width; ++c) s += a(i, c) * b(j, c);
      w(i, j) = s * scale;
      mx = std::max(mx, w(i, j));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += (w(i, j) = std::exp(w(i, j) - mx));
    for (std::size_t j = 0; j < n; ++j) w(i, j) /= sum;
  }
  return w;
}

}  // namespace

MhaResult reference_mha(const ReferenceMhaParams& params, const Tensor& x, std::size_t heads) {
  const std::size_t d = params.W_q.rows();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("head count " + std::to_string(heads) + " must divide d = " + std::to_string(d));
  }
  if (x.rank() != 2 || x.cols() != d) throw DimensionError("input " + to_string(x.shape()) + " must be n×" + std::to_string(d));
  const Tensor q = affine_rows(x, params.W_q, params.b_q);
  const Tensor k = affine_rows(x, params.W_k, params.b_k);
  MhaResult r;
  r.v = affine_rows(x, params.W_v, params.b_v);
  const std::size_t n = x.rows(), dh = d / heads;
  r.output = Tensor({n, d});
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor a = softmax_scores(q, k, h * dh, dh, 1.0 / std::sqrt(static_cast<double>(dh)));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a(i, j) * r.v(j, c);
        r.output(i, c) = s;
      }
    r.head_weights.push_back(std::move(a));
  }
  r.shared_weights = softmax_scores(q, k, 0, d, 1.0 / std::sqrt(static_cast<double>(d)));
  return r;
}

Theorem1Report theorem1_check(const Tensor& x, const ReferenceMhaParams& params, std::size_t heads,
                              double guard_eps) {
  if (!(guard_eps > 0.0)) throw ConfigError("guard_eps must be positive");
  const MhaResult mha = reference_mha(params, x, heads);
  const std::size_t n = x.rows(), d = x.cols(), dh = d / heads;
  Theorem1Report rep;
  rep.coordinates = n * d;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      const Tensor& ah = mha.head_weights[c / dh];
      double num = 0.0, den = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        num += ah(i, j) * mha.v(j, c);
        den += mha.shared_weights(i, j) * mha.v(j, c);
      }
      if (std::abs(den) <= guard_eps) {
        rep.excluded.emplace_back(i, c);
        continue;
      }
      const double gamma = num / den;
      const double shga = den * gamma;
      rep.max_gap = std::max(rep.max_gap, std::abs(shga - mha.output(i, c)));
    }
  }
  return rep;
}

}  // namespace mega
