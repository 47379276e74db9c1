#include "mega/ema.h"

#include <cmath>

#include "mega/numerics.h"

namespace mega {

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

void require_width(const EmaParams& p, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != p.dim()) {
    throw DimensionError("EMA input must be n×" + std::to_string(p.dim()) + ", got " + to_string(x.shape()));
  }
}

Tensor resolve_init(const EmaParams& p, const std::optional<Tensor>& h_init) {
  if (!h_init) return p.h0;
  if (h_init->shape() != p.h0.shape()) {
    throw DimensionError("EMA initial state must be " + to_string(p.h0.shape()) + ", got " +
                         to_string(h_init->shape()));
  }
  return *h_init;
}

}  // namespace

EmaParams EmaParams::init(std::size_t d, std::size_t h, SeedState& rng) {
  EmaParams p;
  p.alpha_logit = Tensor({d, h});
  p.delta_logit = Tensor({d, h});
  for (double& v : p.alpha_logit.data()) v = logit(rng.uniform(0.1, 0.9));
  for (double& v : p.delta_logit.data()) v = logit(rng.uniform(0.1, 0.9));
  const double sd = 1.0 / std::sqrt(static_cast<double>(h));
  p.beta = rng.normal_tensor({d, h}, sd);
  p.eta = rng.normal_tensor({d, h}, sd);
  p.h0 = Tensor({d, h});
  return p;
}

void EmaParams::validate() const {
  const Shape s = alpha_logit.shape();
  if (s.size() != 2 || delta_logit.shape() != s || beta.shape() != s || eta.shape() != s || h0.shape() != s) {
    throw DimensionError("EmaParams fields must share one d×h shape; alpha_logit is " + to_string(s));
  }
}

EmaCoeffs EmaCoeffs::from(const EmaParams& p) {
  p.validate();
  EmaCoeffs c{Tensor(p.alpha_logit.shape()), Tensor(p.alpha_logit.shape()), Tensor(p.alpha_logit.shape())};
  for (std::size_t i = 0; i < c.alpha.size(); ++i) {
    c.alpha[i] = sigmoid(p.alpha_logit[i]);
    c.delta[i] = sigmoid(p.delta_logit[i]);
    c.decay[i] = 1.0 - c.alpha[i] * c.delta[i];
  }
  return c;
}

Tensor classic_ema(const Tensor& alpha, const Tensor& x, const std::optional<Tensor>& y0) {
  const std::size_t d = alpha.size();
  if (x.rank() != 2 || x.cols() != d) {
    throw DimensionError("classic_ema input must be n×" + std::to_string(d) + ", got " + to_string(x.shape()));
  }
  for (double a : alpha.data()) {
    if (!(a > 0.0 && a < 1.0)) throw DomainError("classic_ema requires alpha in (0,1), got " + std::to_string(a));
  }
  std::vector<double> prev(d, 0.0);
  if (y0) {
    if (y0->size() != d) throw DimensionError("classic_ema y0 must have width " + std::to_string(d));
    prev.assign(y0->data().begin(), y0->data().end());
  }
  Tensor y(x.shape());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      prev[j] = alpha[j] * x(t, j) + (1.0 - alpha[j]) * prev[j];
      y(t, j) = prev[j];
    }
  }
  return y;
}

EmaScanResult ema_scan(const EmaParams& params, const Tensor& x, const std::optional<Tensor>& h_init) {
  require_width(params, x);
  const EmaCoeffs c = EmaCoeffs::from(params);
  EmaScanResult r{Tensor(x.shape()), resolve_init(params, h_init)};
  detail::ema_scan_raw<double>(x.rows(), params.dim(), params.order(), x.data().data(), c.alpha.data().data(),
                               c.decay.data().data(), params.beta.data().data(), params.eta.data().data(),
                               r.h_final.data().data(), r.y.data().data());
  return r;
}

EmaKernel ema_kernel(const EmaParams& params, std::size_t n, const std::optional<Tensor>& h_init) {
  if (n == 0) throw DimensionError("ema_kernel requires n >= 1");
  const EmaCoeffs c = EmaCoeffs::from(params);
  const std::size_t d = params.dim(), h = params.order();
  EmaKernel k{Tensor({d, n}), c.decay, Tensor({d, n})};
  const Tensor init = resolve_init(params, h_init);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t s = 0; s < h; ++s) {
      const std::size_t o = j * h + s;
      const double log_decay = std::log(c.decay[o]);
      const double weight = params.eta[o] * c.alpha[o] * params.beta[o];
      const double tail = params.eta[o] * init[o];
      for (std::size_t t = 0; t < n; ++t) {
        // t = 0 uses no power at all so the leading tap is exact.
        const double p = t == 0 ? 1.0 : std::exp(static_cast<double>(t) * log_decay);
        k.kernel(j, t) += weight * p;
        if (tail != 0.0) k.residual_coeff(j, t) += tail * std::exp(static_cast<double>(t + 1) * log_decay);
      }
    }
  }
  return k;
}

Tensor ema_fft_forward(const EmaParams& params, const Tensor& x, const std::optional<Tensor>& h_init) {
  require_width(params, x);
  const std::size_t n = x.rows(), d = params.dim();
  const EmaKernel k = ema_kernel(params, n, h_init);
  Tensor y(x.shape());
  std::vector<double> col(n);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t t = 0; t < n; ++t) col[t] = x(t, j);
    const std::vector<double> conv = fft_causal_conv(col, k.kernel.row(j));
    for (std::size_t t = 0; t < n; ++t) y(t, j) = conv[t] + k.residual_coeff(j, t);
  }
  return y;
}

EmaTrajectory ema_scan_recorded(const EmaParams& params, const Tensor& x, const Tensor& h_init) {
  require_width(params, x);
  const std::size_t n = x.rows(), d = params.dim(), h = params.order();
  if (h_init.shape() != params.h0.shape()) {
    throw DimensionError("EMA initial state must be " + to_string(params.h0.shape()) + ", got " +
                         to_string(h_init.shape()));
  }
  EmaTrajectory tr{EmaCoeffs::from(params), h_init, std::vector<double>(n * d * h), Tensor(x.shape()), h_init};
  const double* alpha = tr.coeffs.alpha.data().data();
  const double* decay = tr.coeffs.decay.data().data();
  const double* beta = params.beta.data().data();
  const double* eta = params.eta.data().data();
  double* state = tr.h_final.data().data();
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      const double xv = x(t, j);
      double acc = 0.0;
      double* hj = state + j * h;
      double* rec = tr.hidden.data() + (t * d + j) * h;
      const std::size_t o = j * h;
      for (std::size_t k = 0; k < h; ++k) {
        hj[k] = alpha[o + k] * (beta[o + k] * xv) + decay[o + k] * hj[k];
        acc += eta[o + k] * hj[k];
        rec[k] = hj[k];
      }
      tr.y(t, j) = acc;
    }
  }
  return tr;
}

EmaGrads ema_scan_backward(const EmaParams& params, const Tensor& x, const EmaTrajectory& tr, const Tensor& grad_y) {
  const std::size_t n = x.rows(), d = params.dim(), h = params.order();
  if (grad_y.shape() != x.shape()) throw DimensionError("ema_scan_backward: gradient shape mismatch");
  const Shape ps = params.alpha_logit.shape();
  EmaGrads g{Tensor(x.shape()), Tensor(ps), Tensor(ps), Tensor(ps), Tensor(ps), Tensor(ps)};
  const Tensor& alpha = tr.coeffs.alpha;
  const Tensor& delta = tr.coeffs.delta;
  const Tensor& decay = tr.coeffs.decay;
  // Accumulated d(loss)/d(alpha), d(loss)/d(decay) before the logit chain rule.
  std::vector<double> g_alpha(d * h, 0.0), g_decay(d * h, 0.0), carry(d * h, 0.0);
  for (std::size_t t = n; t-- > 0;) {
    for (std::size_t j = 0; j < d; ++j) {
      const double gy = grad_y(t, j);
      const double xv = x(t, j);
      const double* ht = tr.hidden.data() + (t * d + j) * h;
      const double* hprev = t > 0 ? tr.hidden.data() + ((t - 1) * d + j) * h : tr.h_init.data().data() + j * h;
      double gx = 0.0;
      for (std::size_t k = 0; k < h; ++k) {
        const std::size_t o = j * h + k;
        const double gh = params.eta[o] * gy + carry[o];
        g.eta[o] += gy * ht[k];
        gx += gh * alpha[o] * params.beta[o];
        g.beta[o] += gh * alpha[o] * xv;
        g_alpha[o] += gh * params.beta[o] * xv;
        g_decay[o] += gh * hprev[k];
        carry[o] = decay[o] * gh;
      }
      g.x(t, j) = gx;
    }
  }
  for (std::size_t o = 0; o < d * h; ++o) {
    g.h_init[o] = carry[o];
    const double ga = g_alpha[o] - delta[o] * g_decay[o];
    const double gd = -alpha[o] * g_decay[o];
    g.alpha_logit[o] = ga * alpha[o] * (1.0 - alpha[o]);
    g.delta_logit[o] = gd * delta[o] * (1.0 - delta[o]);
  }
  return g;
}

}  // namespace mega
