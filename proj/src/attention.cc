#include "mega/attention.h"

#include <string>

#include "mega/numerics.h"

namespace mega {

AttnFn parse_attn_fn(std::string_view name) {
  if (name == "softmax") return AttnFn::softmax;
  if (name == "relu2") return AttnFn::relu2;
  if (name == "laplace") return AttnFn::laplace;
  throw ConfigError("unknown attention function '" + std::string(name) + "'");
}

std::string_view to_string(AttnFn fn) {
  switch (fn) {
    case AttnFn::softmax: return "softmax";
    case AttnFn::relu2: return "relu2";
    case AttnFn::laplace: return "laplace";
  }
  return "?";
}

BiasKind parse_bias_kind(std::string_view name) {
  if (name == "none") return BiasKind::none;
  if (name == "rotary") return BiasKind::rotary;
  if (name == "learned" || name == "learned_additive") return BiasKind::learned;
  throw ConfigError("unknown bias kind '" + std::string(name) + "'");
}

std::string_view to_string(BiasKind kind) {
  switch (kind) {
    case BiasKind::none: return "none";
    case BiasKind::rotary: return "rotary";
    case BiasKind::learned: return "learned_additive";
  }
  return "?";
}

void AttnConfig::validate() const {
  if (chunk && *chunk == 0) throw ConfigError("chunk size must be >= 1 or \"full\"");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("attention dropout must lie in [0, 1)");
}

double laplace(double x, const LaplaceCoeffs& c) {
  return 0.5 * (1.0 + erf((x - c.mu) / (c.sigma * std::numbers::sqrt2)));
}

double laplace_grad(double x, const LaplaceCoeffs& c) {
  const double u = (x - c.mu) / c.sigma;
  return std::exp(-0.5 * u * u) / (c.sigma * std::sqrt(2.0 * std::numbers::pi));
}

AttnMask::AttnMask(std::size_t n_q, std::size_t n_k, bool valid)
    : n_q_(n_q), n_k_(n_k), bits_(n_q * n_k, valid ? 1 : 0), counts_(n_q, valid ? n_k : 0) {}

AttnMask AttnMask::causal(std::size_t n) {
  AttnMask m(n, n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

void AttnMask::set(std::size_t i, std::size_t j, bool valid) {
  std::uint8_t& b = bits_[i * n_k_ + j];
  if ((b != 0) == valid) return;
  b = valid ? 1 : 0;
  if (valid) {
    ++counts_[i];
  } else {
    --counts_[i];
  }
}

namespace detail {

void throw_empty_row(std::size_t row) {
  throw MaskingError("attention row " + std::to_string(row) + " has no valid keys");
}

}  // namespace detail

Tensor attention_weights(const Tensor& scores, const AttnConfig& config, const AttnMask& mask, std::size_t qk_width,
                         const Tensor* bias) {
  const std::size_t lq = scores.rows(), lk = scores.cols();
  if (mask.n_q() != lq || mask.n_k() != lk) {
    throw DimensionError("attention mask is " + std::to_string(mask.n_q()) + "x" + std::to_string(mask.n_k()) +
                         " but scores are " + to_string(scores.shape()));
  }
  if (bias && !bias->same_shape(scores)) {
    throw DimensionError("attention bias " + to_string(bias->shape()) + " does not match scores " +
                         to_string(scores.shape()));
  }
  Tensor w = scores;
  detail::scores_to_weights<double>(w.data().data(), lq, lk, config.fn, qk_width, false, mask.bits(),
                                    bias ? bias->data().data() : nullptr, nullptr, nullptr);
  return w;
}

Tensor rotary_embed(const Tensor& z, std::span<const std::int64_t> positions) {
  const std::size_t n = z.rows(), width = z.cols();
  if (width % 2 != 0) throw ConfigError("rotary embedding needs an even width, got " + std::to_string(width));
  if (positions.size() != n) {
    throw DimensionError("rotary embedding: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(n) + " rows");
  }
  Tensor out(z.shape());
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < width / 2; ++i) {
      const double theta = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(width));
      const double ang = static_cast<double>(positions[t]) * theta;
      const double c = std::cos(ang), s = std::sin(ang);
      const double a = z(t, 2 * i), b = z(t, 2 * i + 1);
      out(t, 2 * i) = a * c - b * s;
      out(t, 2 * i + 1) = a * s + b * c;
    }
  }
  return out;
}

Tensor relative_bias_block(const Tensor& table, std::int64_t q_begin, std::size_t n_q, std::int64_t k_begin,
                           std::size_t n_k) {
  const std::int64_t w = kRelativeBiasWindow;
  if (table.size() != static_cast<std::size_t>(2 * w + 1)) {
    throw DimensionError("relative bias table must have " + std::to_string(2 * w + 1) + " entries, got " +
                         std::to_string(table.size()));
  }
  Tensor b({n_q, n_k});
  for (std::size_t i = 0; i < n_q; ++i) {
    for (std::size_t j = 0; j < n_k; ++j) {
      const std::int64_t off = std::clamp<std::int64_t>(
          (k_begin + static_cast<std::int64_t>(j)) - (q_begin + static_cast<std::int64_t>(i)), -w, w);
      b(i, j) = table[static_cast<std::size_t>(off + w)];
    }
  }
  return b;
}

namespace {

void require_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError("attention shapes incompatible: Q " + to_string(q.shape()) + ", K " + to_string(k.shape()) +
                         ", V " + to_string(v.shape()));
  }
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t len) {
  Tensor out({len, t.cols()});
  std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(begin * t.cols()), len * t.cols(), out.data().begin());
  return out;
}

std::size_t bias_bin(std::int64_t q_pos, std::int64_t k_pos) {
  const std::int64_t w = kRelativeBiasWindow;
  return static_cast<std::size_t>(std::clamp<std::int64_t>(k_pos - q_pos, -w, w) + w);
}

}  // namespace

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& config, const Tensor* bias,
                      const AttnMask& mask) {
  require_qkv(q, k, v);
  const Tensor scores = matmul_nt(q, k);
  const Tensor w = attention_weights(scores, config, mask, q.cols(), bias);
  return matmul(w, v);
}

Tensor chunked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& config,
                         const BiasGenerator& bias, std::span<const std::uint8_t> key_valid) {
  config.validate();
  require_qkv(q, k, v);
  const std::size_t n = q.rows();
  if (k.rows() != n) throw DimensionError("chunked attention needs equal query and key lengths");
  if (!key_valid.empty() && key_valid.size() != n) throw DimensionError("key validity length mismatch");
  const std::size_t c = config.chunk_for(n);
  Tensor out({n, v.cols()});
  for (std::size_t b = 0; b < n; b += c) {
    const std::size_t len = std::min(c, n - b);
    AttnMask mask = config.causal ? AttnMask::causal(len) : AttnMask::full(len, len);
    if (!key_valid.empty()) {
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < len; ++j)
          if (!key_valid[b + j]) mask.set(i, j, false);
    }
    std::optional<Tensor> block;
    if (bias) block = bias(static_cast<std::int64_t>(b), len, static_cast<std::int64_t>(b), len);
    const Tensor o = attention_core(slice_rows(q, b, len), slice_rows(k, b, len), slice_rows(v, b, len), config,
                                    block ? &*block : nullptr, mask);
    std::copy(o.data().begin(), o.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * v.cols()));
  }
  return out;
}

Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& config,
                         const Tensor* bias_table, std::int64_t position_offset, AttentionTape* tape,
                         SeedState* dropout_rng) {
  config.validate();
  require_qkv(q, k, v);
  const std::size_t n = q.rows(), z = q.cols(), vw = v.cols();
  if (k.rows() != n) throw DimensionError("attention_forward needs equal query and key lengths");
  const std::size_t c = config.chunk_for(n);
  const bool drop = dropout_rng != nullptr && config.dropout > 0.0;
  Tensor out({n, vw});
  if (tape) tape->chunks.clear();
  for (std::size_t b = 0; b < n; b += c) {
    const std::size_t len = std::min(c, n - b);
    Tensor s({len, len});
    const double* qb = q.data().data() + b * z;
    const double* kb = k.data().data() + b * z;
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < z; ++e) acc += qb[i * z + e] * kb[j * z + e];
        s(i, j) = acc;
      }
    }
    std::optional<Tensor> bias;
    if (bias_table) {
      const std::int64_t pos = position_offset + static_cast<std::int64_t>(b);
      bias = relative_bias_block(*bias_table, pos, len, pos, len);
    }
    AttentionTape::Chunk ch;
    ch.begin = b;
    ch.len = len;
    if (tape) {
      ch.pre = Tensor({len, len});
      ch.inv_tau.resize(len);
    }
    detail::scores_to_weights<double>(s.data().data(), len, len, config.fn, z, config.causal, nullptr,
                                      bias ? bias->data().data() : nullptr, tape ? ch.pre.data().data() : nullptr,
                                      tape ? ch.inv_tau.data() : nullptr);
    if (tape) ch.weights = s;
    if (drop) {
      const double scale = 1.0 / (1.0 - config.dropout);
      if (tape) ch.keep = Tensor({len, len});
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double m = dropout_rng->bernoulli(config.dropout) ? 0.0 : scale;
        if (tape) ch.keep[i] = m;
        s[i] *= m;
      }
    }
    detail::weights_times_values<double>(s.data().data(), v.data().data() + b * vw, out.data().data() + b * vw, len,
                                         len, vw);
    if (tape) tape->chunks.push_back(std::move(ch));
  }
  return out;
}

AttentionGrads attention_backward(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& config,
                                  const Tensor* bias_table, std::int64_t position_offset, const AttentionTape& tape,
                                  const Tensor& grad_out) {
  const std::size_t z = q.cols(), vw = v.cols();
  AttentionGrads g{Tensor(q.shape()), Tensor(k.shape()), Tensor(v.shape()),
                   bias_table ? Tensor(bias_table->shape()) : Tensor()};
  for (const auto& ch : tape.chunks) {
    const std::size_t b = ch.begin, len = ch.len;
    const double* go = grad_out.data().data() + b * vw;
    const double* vb = v.data().data() + b * vw;
    const bool dropped = !ch.keep.empty();
    Tensor gw({len, len});
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < vw; ++e) acc += go[i * vw + e] * vb[j * vw + e];
        gw(i, j) = dropped ? acc * ch.keep(i, j) : acc;
      }
    }
    double* gv = g.v.data().data() + b * vw;
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        const double w = dropped ? ch.weights(i, j) * ch.keep(i, j) : ch.weights(i, j);
        if (w == 0.0) continue;
        for (std::size_t e = 0; e < vw; ++e) gv[j * vw + e] += w * go[i * vw + e];
      }
    }
    const Tensor& w_pre = ch.weights;
    Tensor dpre({len, len});
    for (std::size_t i = 0; i < len; ++i) {
      if (config.fn == AttnFn::softmax) {
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += gw(i, j) * w_pre(i, j);
        for (std::size_t j = 0; j < len; ++j) dpre(i, j) = w_pre(i, j) * (gw(i, j) - dot);
      } else {
        for (std::size_t j = 0; j < len; ++j) {
          if (config.causal && j > i) continue;
          const double p = ch.pre(i, j);
          dpre(i, j) = gw(i, j) * (config.fn == AttnFn::relu2 ? activation_grad(Activation::relu2, p) : laplace_grad(p));
        }
      }
    }
    const double* qb = q.data().data() + b * z;
    const double* kb = k.data().data() + b * z;
    double* gq = g.q.data().data() + b * z;
    double* gk = g.k.data().data() + b * z;
    for (std::size_t i = 0; i < len; ++i) {
      const double it = ch.inv_tau[i];
      for (std::size_t j = 0; j < len; ++j) {
        const double dp = dpre(i, j);
        if (dp == 0.0) continue;
        const double ds = dp * it;
        for (std::size_t e = 0; e < z; ++e) {
          gq[i * z + e] += ds * kb[j * z + e];
          gk[j * z + e] += ds * qb[i * z + e];
        }
        if (bias_table) {
          const std::int64_t pos = position_offset + static_cast<std::int64_t>(b);
          g.bias_table[bias_bin(pos + static_cast<std::int64_t>(i), pos + static_cast<std::int64_t>(j))] += dp;
        }
      }
    }
  }
  return g;
}

}  // namespace mega
