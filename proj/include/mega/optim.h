#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "mega/autodiff.h"
#include "mega/tensor.h"

namespace mega {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

struct OptimState {
  AdamConfig hp;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> m, v;
};

// AdamW: bias-corrected Adam plus weight decay applied directly to the
// weights (not through the gradient). Parameters without a gradient entry
// are left alone.
void adam_step(std::span<const ag::NamedParam> params, const ag::GradientSet& grads, OptimState& state);

// Rescales grads so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_global_norm(ag::GradientSet& grads, double max_norm);

}  // namespace mega
