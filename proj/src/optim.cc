#include "mega/optim.h"

#include <cmath>

namespace mega {

void AdamConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
}

void adam_step(std::span<const ag::NamedParam> params, const ag::GradientSet& grads, OptimState& state) {
  state.hp.validate();
  for (const auto& p : params) {
    if (!grads.contains(p.name)) continue;
    const Tensor& g = grads.at(p.name);
    if (!g.same_shape(*p.value)) {
      throw DimensionError("gradient for '" + p.name + "' has shape " + to_string(g.shape()) + ", parameter is " +
                           to_string(p.value->shape()));
    }
    for (double x : g.data())
      if (!std::isfinite(x)) throw NumericalError("non-finite gradient in parameter group '" + p.name + "'");
  }
  ++state.step;
  const AdamConfig& hp = state.hp;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hp.beta1, t);
  const double c2 = 1.0 - std::pow(hp.beta2, t);
  for (const auto& p : params) {
    if (!grads.contains(p.name)) continue;
    const Tensor& g = grads.at(p.name);
    Tensor& w = *p.value;
    auto [mit, m_new] = state.m.try_emplace(p.name, w.shape());
    auto [vit, v_new] = state.v.try_emplace(p.name, w.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= hp.lr * (mhat / (std::sqrt(vhat) + hp.eps) + hp.weight_decay * w[i]);
    }
  }
}

double clip_global_norm(ag::GradientSet& grads, double max_norm) {
  const double norm = grads.global_norm();
  if (max_norm > 0.0 && norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

}  // namespace mega
