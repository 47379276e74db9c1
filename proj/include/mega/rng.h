#pragma once

#include <cstdint>

#include "mega/tensor.h"

namespace mega {

// Counter-based generator: the k-th draw is a pure function of (seed, k), so
// sequences are identical across runs and platforms. Distributions are
// implemented here rather than taken from <random>, whose distribution
// algorithms are implementation-defined.
class SeedState {
 public:
  explicit SeedState(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  bool bernoulli(double p) { return uniform() < p; }

  Tensor normal_tensor(Shape shape, double stddev);
  Tensor uniform_tensor(Shape shape, double lo, double hi);

  // Independent stream derived from this state's seed and a tag.
  SeedState fork(std::uint64_t tag) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace mega
