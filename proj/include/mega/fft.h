#pragma once

#include <complex>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

namespace mega::detail {

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// In-place iterative radix-2 transform; a.size() must be a power of two.
// Twiddles are evaluated directly per index rather than by recurrence.
template <typename T>
void fft_inplace(std::vector<std::complex<T>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  std::vector<std::complex<T>> tw(n / 2 + 1);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t k = 0; k < tw.size(); ++k) {
    const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    tw[k] = std::complex<T>(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const std::complex<T> u = a[i + k];
        const std::complex<T> v = a[i + k + half] * tw[k * stride];
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
  if (inverse) {
    const T scale = T(1) / static_cast<T>(n);
    for (auto& v : a) v *= scale;
  }
}

// y_t = sum_{s<=t} kernel_s * x_{t-s}, truncated to x.size().
template <typename T>
std::vector<T> causal_conv_fft(std::span<const T> x, std::span<const T> kernel) {
  const std::size_t n = x.size();
  const std::size_t m = next_pow2(2 * n - 1);
  std::vector<std::complex<T>> fx(m), fk(m);
  for (std::size_t i = 0; i < n; ++i) {
    fx[i] = x[i];
    fk[i] = kernel[i];
  }
  fft_inplace(fx, false);
  fft_inplace(fk, false);
  for (std::size_t i = 0; i < m; ++i) fx[i] *= fk[i];
  fft_inplace(fx, true);
  std::vector<T> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = fx[i].real();
  return y;
}

}  // namespace mega::detail
