#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "mega/rng.h"
#include "mega/tensor.h"

namespace mega {

enum class AttnFn { softmax, relu2, laplace };
enum class BiasKind { none, rotary, learned };

AttnFn parse_attn_fn(std::string_view name);
std::string_view to_string(AttnFn fn);
BiasKind parse_bias_kind(std::string_view name);
std::string_view to_string(BiasKind kind);

struct AttnConfig {
  AttnFn fn = AttnFn::softmax;
  bool causal = false;
  std::optional<std::size_t> chunk;  // nullopt: attend over the whole sequence
  BiasKind bias = BiasKind::none;
  double dropout = 0.0;

  void validate() const;
  // Chunk length actually used for a sequence of length n.
  std::size_t chunk_for(std::size_t n) const { return chunk && *chunk < n ? *chunk : n; }
};

struct LaplaceCoeffs {
  double mu = std::sqrt(0.5);
  double sigma = std::sqrt(1.0 / (4.0 * std::numbers::pi));
};

double laplace(double x, const LaplaceCoeffs& coeffs = {});
double laplace_grad(double x, const LaplaceCoeffs& coeffs = {});

// Per-(query, key) validity with cached per-query valid counts.
class AttnMask {
 public:
  AttnMask(std::size_t n_q, std::size_t n_k, bool valid = true);
  static AttnMask full(std::size_t n_q, std::size_t n_k) { return AttnMask(n_q, n_k, true); }
  // Lower-triangular: query i sees keys j <= i.
  static AttnMask causal(std::size_t n);

  std::size_t n_q() const { return n_q_; }
  std::size_t n_k() const { return n_k_; }
  bool valid(std::size_t i, std::size_t j) const { return bits_[i * n_k_ + j] != 0; }
  std::size_t valid_count(std::size_t i) const { return counts_[i]; }
  void set(std::size_t i, std::size_t j, bool valid);
  const std::uint8_t* bits() const { return bits_.data(); }

 private:
  std::size_t n_q_, n_k_;
  std::vector<std::uint8_t> bits_;
  std::vector<std::size_t> counts_;
};

// f(scores * inv_tau + bias) restricted to valid keys; masked entries are 0.
// inv_tau is 1/sqrt(qk_width) for softmax and 1/valid_count(row) otherwise.
Tensor attention_weights(const Tensor& scores, const AttnConfig& config, const AttnMask& mask, std::size_t qk_width,
                         const Tensor* bias = nullptr);

// Rotates consecutive coordinate pairs (2i, 2i+1) of row t by
// positions[t] * 10000^(-2i/z).
Tensor rotary_embed(const Tensor& z, std::span<const std::int64_t> positions);

inline constexpr std::int64_t kRelativeBiasWindow = 128;

// Bias block for a learned additive relative bias: entry (i, j) is
// table[clip(k_pos_j - q_pos_i, ±window) + window]. table has 2*window+1 entries.
Tensor relative_bias_block(const Tensor& table, std::int64_t q_begin, std::size_t n_q, std::int64_t k_begin,
                           std::size_t n_k);

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& config,
                      const Tensor* bias, const AttnMask& mask);

// Produces the bias block for query positions [q_begin, q_begin+n_q) against
// key positions [k_begin, k_begin+n_k).
using BiasGenerator = std::function<Tensor(std::int64_t q_begin, std::size_t n_q, std::int64_t k_begin,
                                           std::size_t n_k)>;

// Attention applied independently inside chunks of config.chunk positions.
// A short final chunk behaves as a padded chunk whose padding is masked out.
// key_valid, when non-empty, marks padded keys across the whole sequence.
Tensor chunked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& config,
                         const BiasGenerator& bias = nullptr, std::span<const std::uint8_t> key_valid = {});

// ---- training path ----------------------------------------------------------

struct AttentionTape {
  struct Chunk {
    std::size_t begin = 0;
    std::size_t len = 0;
    Tensor pre;      // scores * inv_tau + bias
    Tensor weights;  // f(pre), masked, before dropout
    Tensor keep;     // dropout multipliers; empty when dropout is off
    std::vector<double> inv_tau;
  };
  std::vector<Chunk> chunks;
};

// Chunked attention that records what the backward pass needs. bias_table is
// the learned relative-bias table (or null); position_offset is the absolute
// position of row 0. dropout_rng enables dropout on the attention weights.
Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& config,
                         const Tensor* bias_table, std::int64_t position_offset, AttentionTape* tape,
                         SeedState* dropout_rng);

struct AttentionGrads {
  Tensor q, k, v, bias_table;
};

AttentionGrads attention_backward(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& config,
                                  const Tensor* bias_table, std::int64_t position_offset, const AttentionTape& tape,
                                  const Tensor& grad_out);

namespace detail {

void throw_empty_row(std::size_t row);

// In place: s (lq×lk raw scores) becomes attention weights. valid may be null
// (all valid) and causal adds j <= i. Throws MaskingError on an empty row.
template <typename T>
void scores_to_weights(T* s, std::size_t lq, std::size_t lk, AttnFn fn, std::size_t qk_width, bool causal,
                       const std::uint8_t* valid, const T* bias, T* pre_out, double* inv_tau_out) {
  const LaplaceCoeffs lc;
  const T lap_scale = static_cast<T>(1.0 / (lc.sigma * std::numbers::sqrt2));
  const T lap_mu = static_cast<T>(lc.mu);
  auto ok = [&](std::size_t i, std::size_t j) {
    return (!causal || j <= i) && (valid == nullptr || valid[i * lk + j] != 0);
  };
  for (std::size_t i = 0; i < lq; ++i) {
    T* row = s + i * lk;
    std::size_t count = 0;
    for (std::size_t j = 0; j < lk; ++j) count += ok(i, j) ? 1 : 0;
    if (count == 0) throw_empty_row(i);
    const double inv_tau = fn == AttnFn::softmax ? 1.0 / std::sqrt(static_cast<double>(qk_width))
                                                 : 1.0 / static_cast<double>(count);
    if (inv_tau_out) inv_tau_out[i] = inv_tau;
    const T it = static_cast<T>(inv_tau);
    for (std::size_t j = 0; j < lk; ++j) {
      row[j] = row[j] * it + (bias ? bias[i * lk + j] : T(0));
      if (pre_out) pre_out[i * lk + j] = row[j];
    }
    if (fn == AttnFn::softmax) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < lk; ++j)
        if (ok(i, j)) mx = std::max(mx, row[j]);
      T sum = 0;
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] = ok(i, j) ? std::exp(row[j] - mx) : T(0);
        sum += row[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < lk; ++j) row[j] *= inv;
    } else if (fn == AttnFn::relu2) {
      for (std::size_t j = 0; j < lk; ++j) row[j] = ok(i, j) && row[j] > 0 ? row[j] * row[j] : T(0);
    } else {
      for (std::size_t j = 0; j < lk; ++j)
        row[j] = ok(i, j) ? T(0.5) * (T(1) + std::erf((row[j] - lap_mu) * lap_scale)) : T(0);
    }
  }
}

// out (lq×vw) = w (lq×lk) · v (lk×vw), overwriting out.
template <typename T>
void weights_times_values(const T* w, const T* v, T* out, std::size_t lq, std::size_t lk, std::size_t vw) {
  for (std::size_t i = 0; i < lq; ++i) {
    T* __restrict oi = out + i * vw;
    for (std::size_t c = 0; c < vw; ++c) oi[c] = 0;
    for (std::size_t j = 0; j < lk; ++j) {
      const T wij = w[i * lk + j];
      if (wij == T(0)) continue;
      const T* __restrict vj = v + j * vw;
      for (std::size_t c = 0; c < vw; ++c) oi[c] += wij * vj[c];
    }
  }
}

// Bias-free chunked attention on raw row-major buffers, used for benchmarks
// at either precision. chunk >= n means full attention.
template <typename T>
void chunked_attention_raw(const T* q, const T* k, const T* v, T* out, std::size_t n, std::size_t z, std::size_t vw,
                           std::size_t chunk, AttnFn fn, bool causal) {
  const std::size_t c = std::min(chunk, n);
  std::vector<T> s(c * c);
  for (std::size_t b = 0; b < n; b += c) {
    const std::size_t len = std::min(c, n - b);
    for (std::size_t i = 0; i < len; ++i) {
      const T* qi = q + (b + i) * z;
      for (std::size_t j = 0; j < len; ++j) {
        const T* kj = k + (b + j) * z;
        T acc = 0;
        for (std::size_t e = 0; e < z; ++e) acc += qi[e] * kj[e];
        s[i * len + j] = acc;
      }
    }
    scores_to_weights<T>(s.data(), len, len, fn, z, causal, nullptr, nullptr, nullptr, nullptr);
    weights_times_values<T>(s.data(), v + b * vw, out + b * vw, len, len, vw);
  }
}

}  // namespace detail

}  // namespace mega
