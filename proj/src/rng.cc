#include "mega/rng.h"

#include <cmath>
#include <numbers>

namespace mega {

std::uint64_t mix64(std::uint64_t x) {
  // SplitMix64 finalizer.
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t SeedState::next_u64() {
  const std::uint64_t k = counter_++;
  return mix64(seed_ ^ mix64(k));
}

double SeedState::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeedState::normal(double mean, double stddev) {
  // Box-Muller, one value per two uniforms.
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t SeedState::below(std::uint64_t bound) {
  if (bound == 0) throw DomainError("SeedState::below requires a positive bound");
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(bound)) % bound;
}

Tensor SeedState::normal_tensor(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = normal(0.0, stddev);
  return t;
}

Tensor SeedState::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(lo, hi);
  return t;
}

SeedState SeedState::fork(std::uint64_t tag) const { return SeedState(mix64(seed_ ^ mix64(tag + 0x632BE59BD9B4E019ULL))); }

}  // namespace mega
