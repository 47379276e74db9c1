#pragma once

#include <optional>
#include <string>

#include "mega/rng.h"
#include "mega/tensor.h"

namespace mega {

// Multi-dimensional damped EMA parameters, all d×h. alpha and delta are held
// as logits; the effective coefficients are sigmoid(logit) in (0, 1).
struct EmaParams {
  Tensor alpha_logit;
  Tensor delta_logit;
  Tensor beta;
  Tensor eta;
  Tensor h0;
  bool h0_trainable = false;

  std::size_t dim() const { return alpha_logit.rows(); }
  std::size_t order() const { return alpha_logit.cols(); }

  // alpha, delta ~ uniform in [0.1, 0.9] (through the logit), beta and eta
  // ~ N(0, 1/h), h0 = 0.
  static EmaParams init(std::size_t d, std::size_t h, SeedState& rng);

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
  static void visit_fields(Self& self, const std::string& prefix, Fn& fn) {
    fn(prefix + "alpha_logit", self.alpha_logit, true);
    fn(prefix + "delta_logit", self.delta_logit, true);
    fn(prefix + "beta", self.beta, true);
    fn(prefix + "eta", self.eta, true);
    fn(prefix + "h0", self.h0, self.h0_trainable);
  }
};

// Per-coordinate effective coefficients derived from EmaParams.
struct EmaCoeffs {
  Tensor alpha;  // sigmoid(alpha_logit)
  Tensor delta;  // sigmoid(delta_logit)
  Tensor decay;  // 1 - alpha * delta

  static EmaCoeffs from(const EmaParams& p);
};

// Classic EMA: y_t = alpha*x_t + (1-alpha)*y_{t-1}, y_{-1} = y0.
Tensor classic_ema(const Tensor& alpha, const Tensor& x, const std::optional<Tensor>& y0 = std::nullopt);

struct EmaScanResult {
  Tensor y;        // n×d
  Tensor h_final;  // d×h
};

// Recurrent scan. h_init defaults to params.h0.
EmaScanResult ema_scan(const EmaParams& params, const Tensor& x, const std::optional<Tensor>& h_init = std::nullopt);

struct EmaKernel {
  Tensor kernel;     // d×n, kernel(j, t) = eta_j . (decay_j^t * alpha_j * beta_j)
  Tensor phi_decay;  // d×h
  // residual_coeff(j, t) = eta_j . (decay_j^{t+1} * h_j), the contribution of
  // the initial state h (h_init if given, else params.h0).
  Tensor residual_coeff;
};

EmaKernel ema_kernel(const EmaParams& params, std::size_t n, const std::optional<Tensor>& h_init = std::nullopt);

// Convolutional forward path: y = K * x + initial-state tail.
Tensor ema_fft_forward(const EmaParams& params, const Tensor& x, const std::optional<Tensor>& h_init = std::nullopt);

// ---- differentiation through the scan ---------------------------------------

// Forward scan that also records every hidden state (n×d×h, row-major by
// time) for backpropagation through time.
struct EmaTrajectory {
  EmaCoeffs coeffs;
  Tensor h_init;                // d×h
  std::vector<double> hidden;  // n*d*h
  Tensor y;
  Tensor h_final;
};

EmaTrajectory ema_scan_recorded(const EmaParams& params, const Tensor& x, const Tensor& h_init);

struct EmaGrads {
  Tensor x;
  Tensor alpha_logit;
  Tensor delta_logit;
  Tensor beta;
  Tensor eta;
  Tensor h_init;
};

EmaGrads ema_scan_backward(const EmaParams& params, const Tensor& x, const EmaTrajectory& traj, const Tensor& grad_y);

namespace detail {

// Scan kernel on raw spans for an arbitrary scalar type, used by benchmarks.
template <typename T>
void ema_scan_raw(std::size_t n, std::size_t d, std::size_t h, const T* x, const T* alpha, const T* decay,
                  const T* beta, const T* eta, T* state, T* y) {
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      const T xv = x[t * d + j];
      T acc = 0;
      T* hj = state + j * h;
      const std::size_t o = j * h;
      for (std::size_t k = 0; k < h; ++k) {
        hj[k] = alpha[o + k] * (beta[o + k] * xv) + decay[o + k] * hj[k];
        acc += eta[o + k] * hj[k];
      }
      y[t * d + j] = acc;
    }
  }
}

}  // namespace detail

}  // namespace mega
