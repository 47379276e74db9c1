#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "mega/tensor.h"

namespace mega {

// ---- linear algebra ---------------------------------------------------------

// C = A·B for A m×k, B k×p. Rank-1 operands are treated as a single row.
Tensor matmul(const Tensor& a, const Tensor& b);
// C = Aᵀ·B for A k×m, B k×p.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
// C = A·Bᵀ for A m×k, B p×k.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// c += a·b (no allocation); c must already have shape m×p.
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c);
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c);
void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& c);

Tensor transpose(const Tensor& a);

// ---- activations ------------------------------------------------------------

enum class Activation { silu, sigmoid, relu2 };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation kind);

double sigmoid(double x);
double silu(double x);
double relu2(double x);
double activation(Activation kind, double x);
double activation_grad(Activation kind, double x);
Tensor activation(Activation kind, const Tensor& x);

// Error function; |error| <= 1e-12 on |x| <= 6, saturating to ±1 beyond.
double erf(double x);

// ---- convolution ------------------------------------------------------------

// Causal linear convolution via zero-padded FFT of power-of-two length >= 2n-1.
std::vector<double> fft_causal_conv(std::span<const double> x, std::span<const double> kernel);
std::vector<double> naive_causal_conv(std::span<const double> x, std::span<const double> kernel);

// ---- normalization ----------------------------------------------------------

enum class NormKind { layer, scale };

NormKind parse_norm_kind(std::string_view name);
std::string_view to_string(NormKind kind);

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kScaleNormEps = 1e-8;

// Row-wise normalization of x (rows of width d).
//   layer: (x - mean) / sqrt(var + 1e-5) * gain + bias, gain/bias width d.
//   scale: gain * x / max(||x||_2, 1e-8), gain a single scalar, bias unused.
Tensor normalize(NormKind kind, const Tensor& x, const Tensor& gain, const Tensor* bias);

struct NormGrads {
  Tensor x;
  Tensor gain;
  Tensor bias;  // empty for scale-norm
};

NormGrads normalize_backward(NormKind kind, const Tensor& x, const Tensor& gain, const Tensor& grad_out);

}  // namespace mega
