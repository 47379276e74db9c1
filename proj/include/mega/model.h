#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mega/attention.h"
#include "mega/autodiff.h"
#include "mega/ema.h"
#include "mega/numerics.h"
#include "mega/rng.h"
#include "mega/tensor.h"

namespace mega {

enum class Pooling { mean, last };
Pooling parse_pooling(std::string_view name);
std::string_view to_string(Pooling p);

enum class ModelMode { classifier, causal_lm };
ModelMode parse_model_mode(std::string_view name);
std::string_view to_string(ModelMode m);

struct ModelConfig {
  std::size_t depth = 2;
  std::size_t d = 64;
  std::size_t z = 0;      // 0: d/4 rounded up to even
  std::size_t v = 0;      // 0: 2d
  std::size_t d_ffn = 0;  // 0: 2d
  std::size_t h_ema = 16;  // 0 removes the EMA sub-layer (X' = X)
  std::optional<std::size_t> chunk;  // nullopt: full attention
  AttnFn attn_fn = AttnFn::softmax;
  BiasKind bias = BiasKind::none;
  NormKind norm = NormKind::layer;
  bool pre_norm = true;
  bool causal = false;
  double dropout = 0.0;  // attention weights and FFN hidden
  Pooling pool = Pooling::mean;
  ModelMode mode = ModelMode::classifier;
  std::size_t vocab = 0;  // 0: inputs are real-valued n×d features
  std::size_t classes = 2;
  bool tie_embeddings = false;

  std::size_t z_dim() const;
  std::size_t v_dim() const { return v ? v : 2 * d; }
  std::size_t ffn_dim() const { return d_ffn ? d_ffn : 2 * d; }
  AttnConfig attn() const;
  void validate() const;
};

// Parameter structs expose visit(prefix, fn) with fn(name, tensor, trainable).

struct MegaLayerParams {
  Tensor W_z, b_z;
  Tensor kappa_q, mu_q, kappa_k, mu_k;
  Tensor W_v, b_v;
  Tensor W_gamma, b_gamma;
  Tensor W_phi, b_phi;
  Tensor W_h, U_h, b_h;
  EmaParams ema;   // empty when the EMA sub-layer is removed
  Tensor rel_bias; // learned relative-position table, empty unless configured

  bool has_ema() const { return !ema.alpha_logit.empty(); }
  std::size_t dim() const { return W_z.rows(); }

  static MegaLayerParams init(const ModelConfig& cfg, SeedState& rng);
  void validate() const;

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    visit_fields(*this, prefix, fn);
  }
  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) const {
    visit_fields(*this, prefix, fn);
  }

 private:
  template <typename Self, typename Fn>
  static void visit_fields(Self& s, const std::string& p, Fn& fn) {
    fn(p + "W_z", s.W_z, true);
    fn(p + "b_z", s.b_z, true);
    fn(p + "kappa_q", s.kappa_q, true);
    fn(p + "mu_q", s.mu_q, true);
    fn(p + "kappa_k", s.kappa_k, true);
    fn(p + "mu_k", s.mu_k, true);
    fn(p + "W_v", s.W_v, true);
    fn(p + "b_v", s.b_v, true);
    fn(p + "W_gamma", s.W_gamma, true);
    fn(p + "b_gamma", s.b_gamma, true);
    fn(p + "W_phi", s.W_phi, true);
    fn(p + "b_phi", s.b_phi, true);
    fn(p + "W_h", s.W_h, true);
    fn(p + "U_h", s.U_h, true);
    fn(p + "b_h", s.b_h, true);
    if (s.has_ema()) s.ema.visit(p + "ema.", fn);
    if (!s.rel_bias.empty()) fn(p + "rel_bias", s.rel_bias, true);
  }
};

struct FfnParams {
  Tensor W_1, b_1, W_2, b_2;

  static FfnParams init(std::size_t d, std::size_t hidden, SeedState& rng);

  template <typename Fn>
  void visit(const std::string& p, Fn&& fn) {
    visit_fields(*this, p, fn);
  }
  template <typename Fn>
  void visit(const std::string& p, Fn&& fn) const {
    visit_fields(*this, p, fn);
  }

 private:
  template <typename Self, typename Fn>
  static void visit_fields(Self& s, const std::string& p, Fn& fn) {
    fn(p + "W_1", s.W_1, true);
    fn(p + "b_1", s.b_1, true);
    fn(p + "W_2", s.W_2, true);
    fn(p + "b_2", s.b_2, true);
  }
};

// Layer norm has a d-wide gain and bias; scale norm a single gain and no bias.
struct NormParams {
  Tensor gain, bias;

  static NormParams init(NormKind kind, std::size_t d);

  template <typename Fn>
  void visit(const std::string& p, Fn&& fn) {
    visit_fields(*this, p, fn);
  }
  template <typename Fn>
  void visit(const std::string& p, Fn&& fn) const {
    visit_fields(*this, p, fn);
  }

 private:
  template <typename Self, typename Fn>
  static void visit_fields(Self& s, const std::string& p, Fn& fn) {
    fn(p + "gain", s.gain, true);
    if (!s.bias.empty()) fn(p + "bias", s.bias, true);
  }
};

struct MegaBlockParams {
  MegaLayerParams layer;
  FfnParams ffn;
  NormParams norm1, norm2;
  NormKind norm_kind = NormKind::layer;
  bool pre_norm = true;

  static MegaBlockParams init(const ModelConfig& cfg, SeedState& rng);

  template <typename Fn>
  void visit(const std::string& p, Fn&& fn) {
    visit_fields(*this, p, fn);
  }
  template <typename Fn>
  void visit(const std::string& p, Fn&& fn) const {
    visit_fields(*this, p, fn);
  }

 private:
  template <typename Self, typename Fn>
  static void visit_fields(Self& s, const std::string& p, Fn& fn) {
    s.layer.visit(p + "layer.", fn);
    s.ffn.visit(p + "ffn.", fn);
    s.norm1.visit(p + "norm1.", fn);
    s.norm2.visit(p + "norm2.", fn);
  }
};

struct ModelParams {
  Tensor embedding;  // vocab×d, empty for real-valued inputs
  std::vector<MegaBlockParams> blocks;
  NormParams final_norm;  // used with pre-norm only
  Tensor head_w, head_b;  // head_w empty when tied to the embedding

  static ModelParams init(const ModelConfig& cfg, SeedState& rng);

  template <typename Fn>
  void visit(Fn&& fn) {
    visit_fields(*this, fn);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    visit_fields(*this, fn);
  }

  std::size_t count() const;

 private:
  template <typename Self, typename Fn>
  static void visit_fields(Self& s, Fn& fn) {
    if (!s.embedding.empty()) fn(std::string("embedding"), s.embedding, true);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) s.blocks[i].visit("block" + std::to_string(i) + ".", fn);
    if (!s.final_norm.gain.empty()) s.final_norm.visit("final_norm.", fn);
    if (!s.head_w.empty()) fn(std::string("head.w"), s.head_w, true);
    fn(std::string("head.b"), s.head_b, true);
  }
};

struct LayerState {
  Tensor ema_hidden;  // d×h_ema, empty without EMA
  std::int64_t position = 0;
};

// ---- graph builders ---------------------------------------------------------

struct LayerVars {
  ag::Var x_prime, z, q, k, v, o, gamma, phi, h_hat, y;
  ag::Var ema_final;  // invalid without EMA
};

// Declares the layer's parameters under `prefix` and wires the layer.
// `residual` (invalid: use x) is the input of the gated residual path.
// `dropout_seed` enables attention-weight dropout.
LayerVars build_mega_layer(ag::Graph& g, const std::string& prefix, const MegaLayerParams& params, ag::Var x,
                           ag::Var residual, const AttnConfig& config, const LayerState* state,
                           std::optional<SeedState> dropout_seed = std::nullopt);

struct BlockVars {
  LayerVars layer;
  ag::Var y;
};

BlockVars build_mega_block(ag::Graph& g, const std::string& prefix, const MegaBlockParams& block, ag::Var x,
                           const AttnConfig& config, const LayerState* state, double ffn_dropout = 0.0,
                           SeedState* dropout_rng = nullptr);

using ModelInput = std::variant<std::vector<int>, Tensor>;

struct ModelState {
  std::vector<LayerState> layers;
};

struct ModelVars {
  ag::Var logits;  // classifier: 1×classes; causal LM: n×vocab
  std::vector<ag::Var> ema_finals;
  std::size_t n = 0;
};

// dropout_rng non-null means training mode.
ModelVars build_model(ag::Graph& g, const ModelConfig& cfg, const ModelParams& params, const ModelInput& input,
                      const ModelState* state, SeedState* dropout_rng = nullptr);

// ---- plain evaluation -------------------------------------------------------

struct MegaLayerResult {
  Tensor y;
  LayerState state;
  // Intermediates, for inspection.
  Tensor x_prime, z, q, k, v, o, gamma, phi, h_hat;
};

MegaLayerResult mega_layer_forward(const MegaLayerParams& params, const Tensor& x, const AttnConfig& config,
                                   const std::optional<LayerState>& state = std::nullopt);

Tensor mega_block_forward(const MegaBlockParams& block, const Tensor& x, const AttnConfig& config);

// Updates *state (when given) so a following segment continues the sequence.
Tensor model_forward(const ModelConfig& cfg, const ModelParams& params, const ModelInput& input, ModelMode mode,
                     ModelState* state = nullptr);

ModelState initial_state(const ModelConfig& cfg, const ModelParams& params);

// ---- reference multi-head attention ------------------------------------------

struct ReferenceMhaParams {
  Tensor W_q, b_q, W_k, b_k, W_v, b_v;

  static ReferenceMhaParams init(std::size_t d, SeedState& rng);
};

struct MhaResult {
  Tensor output;                     // n×d
  std::vector<Tensor> head_weights;  // h of n×n
  Tensor shared_weights;             // n×n from the unsplit Q, K
  Tensor v;                          // n×d
};

MhaResult reference_mha(const ReferenceMhaParams& params, const Tensor& x, std::size_t heads);

struct Theorem1Report {
  double max_gap = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> excluded;  // (row, column)
  std::size_t coordinates = 0;
};

Theorem1Report theorem1_check(const Tensor& x, const ReferenceMhaParams& params, std::size_t heads,
                              double guard_eps = 1e-8);

}  // namespace mega
