#include "mega/numerics.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "mega/fft.h"

namespace mega {

namespace {

void require_matmul(const Tensor& a, std::size_t a_inner, const Tensor& b, std::size_t b_inner, const char* op) {
  if (a.rank() > 2 || b.rank() > 2 || a_inner != b_inner) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
}

void require_out(const Tensor& c, std::size_t m, std::size_t p, const char* op) {
  if (c.rows() != m || c.cols() != p || c.size() != m * p) {
    throw DimensionError(std::string(op) + ": output has shape " + to_string(c.shape()) + ", expected [" +
                         std::to_string(m) + "x" + std::to_string(p) + "]");
  }
}

// c[i,:] += a[i,k] * b[k,:]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict ci = c + i * p;
    const double* ai = a + i * k;
    for (std::size_t s = 0; s < k; ++s) {
      const double av = ai[s];
      if (av == 0.0) continue;
      const double* __restrict bs = b + s * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * bs[j];
    }
  }
}

// c[i,:] += a[s,i] * b[s,:] with a k×m
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t s = 0; s < k; ++s) {
    const double* as = a + s * m;
    const double* __restrict bs = b + s * p;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = as[i];
      if (av == 0.0) continue;
      double* __restrict ci = c + i * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * bs[j];
    }
  }
}

}  // namespace

void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  require_matmul(a, a.cols(), b, b.rows(), "matmul");
  require_out(c, a.rows(), b.cols(), "matmul");
  gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  require_matmul(a, a.rows(), b, b.rows(), "matmul_tn");
  require_out(c, a.cols(), b.cols(), "matmul_tn");
  gemm_tn(a.data().data(), b.data().data(), c.data().data(), a.cols(), a.rows(), b.cols());
}

void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  require_matmul(a, a.cols(), b, b.cols(), "matmul_nt");
  require_out(c, a.rows(), b.rows(), "matmul_nt");
  const Tensor bt = transpose(b);
  gemm_nn(a.data().data(), bt.data().data(), c.data().data(), a.rows(), a.cols(), bt.cols());
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matmul(a, a.cols(), b, b.rows(), "matmul");
  Tensor c({a.rows(), b.cols()});
  matmul_acc(a, b, c);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matmul(a, a.rows(), b, b.rows(), "matmul_tn");
  Tensor c({a.cols(), b.cols()});
  matmul_tn_acc(a, b, c);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matmul(a, a.cols(), b, b.cols(), "matmul_nt");
  Tensor c({a.rows(), b.rows()});
  matmul_nt_acc(a, b, c);
  return c;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a[i * n + j];
  return t;
}

Activation parse_activation(std::string_view name) {
  if (name == "silu") return Activation::silu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "relu2") return Activation::relu2;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation kind) {
  switch (kind) {
    case Activation::silu: return "silu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu2: return "relu2";
  }
  return "?";
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

double relu2(double x) { return x > 0.0 ? x * x : 0.0; }

double activation(Activation kind, double x) {
  switch (kind) {
    case Activation::silu: return silu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::relu2: return relu2(x);
  }
  throw ConfigError("unknown activation kind");
}

double activation_grad(Activation kind, double x) {
  switch (kind) {
    case Activation::silu: {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::sigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::relu2: return x > 0.0 ? 2.0 * x : 0.0;
  }
  throw ConfigError("unknown activation kind");
}

Tensor activation(Activation kind, const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = activation(kind, x[i]);
  return y;
}

double erf(double x) { return std::erf(x); }

std::vector<double> fft_causal_conv(std::span<const double> x, std::span<const double> kernel) {
  if (x.size() != kernel.size() || x.empty()) {
    throw DimensionError("fft_causal_conv: signal length " + std::to_string(x.size()) + " vs kernel length " +
                         std::to_string(kernel.size()));
  }
  return detail::causal_conv_fft<double>(x, kernel);
}

std::vector<double> naive_causal_conv(std::span<const double> x, std::span<const double> kernel) {
  if (x.size() != kernel.size()) {
    throw DimensionError("naive_causal_conv: signal length " + std::to_string(x.size()) + " vs kernel length " +
                         std::to_string(kernel.size()));
  }
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t s = 0; s <= t; ++s) y[t] += kernel[s] * x[t - s];
  return y;
}

NormKind parse_norm_kind(std::string_view name) {
  if (name == "layer") return NormKind::layer;
  if (name == "scale") return NormKind::scale;
  throw ConfigError("unknown normalization kind '" + std::string(name) + "'");
}

std::string_view to_string(NormKind kind) { return kind == NormKind::layer ? "layer" : "scale"; }

namespace {

void require_norm_params(NormKind kind, std::size_t d, const Tensor& gain, const Tensor* bias) {
  if (kind == NormKind::layer) {
    if (gain.size() != d || (bias && bias->size() != d)) {
      throw DimensionError("layer-norm gain/bias must have width " + std::to_string(d) + ", got " +
                           to_string(gain.shape()) + (bias ? " / " + to_string(bias->shape()) : ""));
    }
  } else if (gain.size() != 1) {
    throw DimensionError("scale-norm takes a single scalar gain, got " + to_string(gain.shape()));
  }
}

}  // namespace

Tensor normalize(NormKind kind, const Tensor& x, const Tensor& gain, const Tensor* bias) {
  const std::size_t rows = x.rows(), d = x.cols();
  require_norm_params(kind, d, gain, bias);
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = x.row(r);
    auto yr = y.row(r);
    if (kind == NormKind::layer) {
      double mean = 0.0;
      for (double v : xr) mean += v;
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (double v : xr) var += (v - mean) * (v - mean);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      for (std::size_t j = 0; j < d; ++j) {
        yr[j] = (xr[j] - mean) * inv * gain[j] + (bias ? (*bias)[j] : 0.0);
      }
    } else {
      double ss = 0.0;
      for (double v : xr) ss += v * v;
      const double denom = std::max(std::sqrt(ss), kScaleNormEps);
      for (std::size_t j = 0; j < d; ++j) yr[j] = gain[0] * xr[j] / denom;
    }
  }
  return y;
}

NormGrads normalize_backward(NormKind kind, const Tensor& x, const Tensor& gain, const Tensor& grad_out) {
  const std::size_t rows = x.rows(), d = x.cols();
  require_norm_params(kind, d, gain, nullptr);
  NormGrads g{Tensor(x.shape()), Tensor(gain.shape()), kind == NormKind::layer ? Tensor(gain.shape()) : Tensor()};
  const double dn = static_cast<double>(d);
  std::vector<double> xhat(d), gxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = x.row(r);
    auto gy = grad_out.row(r);
    auto gx = g.x.row(r);
    if (kind == NormKind::layer) {
      double mean = 0.0;
      for (double v : xr) mean += v;
      mean /= dn;
      double var = 0.0;
      for (double v : xr) var += (v - mean) * (v - mean);
      var /= dn;
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (xr[j] - mean) * inv;
        gxhat[j] = gy[j] * gain[j];
        g.gain[j] += gy[j] * xhat[j];
        g.bias[j] += gy[j];
        m1 += gxhat[j];
        m2 += gxhat[j] * xhat[j];
      }
      m1 /= dn;
      m2 /= dn;
      for (std::size_t j = 0; j < d; ++j) gx[j] = inv * (gxhat[j] - m1 - xhat[j] * m2);
    } else {
      double ss = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        ss += xr[j] * xr[j];
        dot += gy[j] * xr[j];
      }
      const double nrm = std::sqrt(ss);
      if (nrm > kScaleNormEps) {
        g.gain[0] += dot / nrm;
        for (std::size_t j = 0; j < d; ++j) gx[j] = gain[0] / nrm * (gy[j] - xr[j] * dot / ss);
      } else {
        g.gain[0] += dot / kScaleNormEps;
        for (std::size_t j = 0; j < d; ++j) gx[j] = gain[0] * gy[j] / kScaleNormEps;
      }
    }
  }
  return g;
}

}  // namespace mega
