#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "mega/numerics.h"
#include "mega/rng.h"

using namespace mega;

namespace {

// Extended-precision erf oracle: Maclaurin series for small |x|, continued
// fraction for erfc beyond.
long double erf_oracle(long double x) {
  const long double pi = 3.141592653589793238462643383279502884L;
  const long double ax = std::fabs(x);
  long double r;
  if (ax < 2.5L) {
    long double term = ax, sum = ax;
    for (int k = 1; k < 200; ++k) {
      term *= -ax * ax / k;
      const long double add = term / (2 * k + 1);
      sum += add;
      if (std::fabs(add) < 1e-30L) break;
    }
    r = 2.0L / std::sqrt(pi) * sum;
  } else {
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/2/(x + 1/(x + 3/2/(x + ...))))
    long double f = ax;
    for (int k = 200; k >= 1; --k) f = ax + (k / 2.0L) / f;
    r = 1.0L - std::exp(-ax * ax) / std::sqrt(pi) / f;
  }
  return x < 0 ? -r : r;
}

Tensor triple_loop(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Matmul, IdentityZeroAndHandCase) {
  const Tensor b = Tensor::matrix({{3, 4}, {5, 6}});
  EXPECT_TRUE(matmul(Tensor::matrix({{1, 0}, {0, 1}}), b).identical(b));
  const Tensor z = matmul(Tensor({2, 3}), Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  EXPECT_TRUE(z.identical(Tensor({2, 2})));
  EXPECT_TRUE(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5, 6}, {7, 8}}))
                  .identical(Tensor::matrix({{19, 22}, {43, 50}})));
}

TEST(Matmul, MatchesTripleLoopAndTransposedVariants) {
  SeedState rng(1);
  const Tensor a = rng.normal_tensor({5, 7}, 1.0), b = rng.normal_tensor({7, 3}, 1.0);
  const Tensor ref = triple_loop(a, b);
  EXPECT_LE(max_abs_diff(matmul(a, b), ref), 1e-13);
  EXPECT_LE(max_abs_diff(matmul_tn(transpose(a), b), ref), 1e-13);
  EXPECT_LE(max_abs_diff(matmul_nt(a, transpose(b)), ref), 1e-13);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("3"), std::string::npos);
  }
}

TEST(Activation, Examples) {
  EXPECT_EQ(silu(0.0), 0.0);
  EXPECT_EQ(relu2(-3.0), 0.0);
  EXPECT_NEAR(silu(1.0), 0.7310585786300049, 1e-15);
  EXPECT_EQ(relu2(2.0), 4.0);
  EXPECT_THROW(parse_activation("gelu"), ConfigError);
}

TEST(Activation, SiluAndSigmoidMonotoneOnGrid) {
  double ps = -1e300, pg = -1e300;
  for (int i = 0; i <= 4000; ++i) {
    const double x = -20.0 + i * 0.01;
    EXPECT_GE(sigmoid(x), pg);
    pg = sigmoid(x);
    if (x >= -1.2784645) {  // silu is monotone from its minimum onward
      EXPECT_GE(silu(x), ps);
      ps = silu(x);
    }
  }
}

TEST(Erf, Examples) {
  EXPECT_EQ(mega::erf(0.0), 0.0);
  EXPECT_NEAR(mega::erf(1.0), 0.8427007929497149, 1e-15);
  SeedState rng(3);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(-6.0, 6.0);
    EXPECT_EQ(mega::erf(-x), -mega::erf(x));
  }
  EXPECT_EQ(mega::erf(7.0), 1.0);
  EXPECT_EQ(mega::erf(-9.0), -1.0);
}

TEST(Erf, AgreesWithExtendedPrecisionOracle) {
  double worst = 0.0;
  for (int i = 0; i <= 24000; ++i) {
    const double x = -6.0 + i * 0.0005;
    worst = std::max(worst, std::abs(mega::erf(x) - static_cast<double>(erf_oracle(x))));
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(FftConv, DeltaAndShiftKernels) {
  const std::vector<double> x{2.0, -3.0, 5.0};
  EXPECT_EQ(fft_causal_conv(x, std::vector<double>{1, 0, 0}), x);
  const auto y = fft_causal_conv(x, std::vector<double>{0, 1, 0});
  EXPECT_NEAR(y[0], 0.0, 1e-15);
  EXPECT_NEAR(y[1], 2.0, 1e-15);
  EXPECT_NEAR(y[2], -3.0, 1e-15);
}

TEST(FftConv, MatchesDoubleLoop) {
  SeedState rng(4);
  for (std::size_t n : {1, 2, 3, 64, 257, 1000}) {
    std::vector<double> x(n), k(n);
    for (auto& v : x) v = rng.normal();
    for (auto& v : k) v = rng.normal();
    std::vector<double> ref(n, 0.0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t s = 0; s <= t; ++s) ref[t] += k[s] * x[t - s];
    const auto y = fft_causal_conv(x, k);
    for (std::size_t t = 0; t < n; ++t) EXPECT_NEAR(y[t], ref[t], 1e-10) << "n=" << n << " t=" << t;
  }
  EXPECT_THROW(fft_causal_conv(std::vector<double>(3), std::vector<double>(4)), DimensionError);
}

TEST(Normalize, Examples) {
  const Tensor one({3}, 1.0), zero({3});
  const Tensor c = normalize(NormKind::layer, Tensor::matrix({{4, 4, 4}}), one, &zero);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  const Tensor l = normalize(NormKind::layer, Tensor::matrix({{1, 2, 3}}), one, &zero);
  const double s = 1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
  EXPECT_NEAR(l[0], -s, 1e-12);
  EXPECT_NEAR(l[1], 0.0, 1e-15);
  EXPECT_NEAR(l[2], s, 1e-12);
  EXPECT_NEAR(l[2], 1.22474, 1e-4);

  const Tensor sn = normalize(NormKind::scale, Tensor::matrix({{3, -4, 12}}), Tensor::vector({-2.5}), nullptr);
  double norm = 0.0;
  for (double v : sn.data()) norm += v * v;
  EXPECT_NEAR(std::sqrt(norm), 2.5, 1e-14);
  EXPECT_THROW(parse_norm_kind("batch"), ConfigError);
}

TEST(Normalize, LayerNormRowStatistics) {
  SeedState rng(5);
  const std::size_t d = 32;
  const Tensor x = rng.normal_tensor({20, d}, 10.0);  // variance well above the epsilon
  const Tensor one({d}, 1.0), zero({d});
  const Tensor y = normalize(NormKind::layer, x, one, &zero);
  for (std::size_t i = 0; i < 20; ++i) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += y(i, j);
    m /= d;
    for (std::size_t j = 0; j < d; ++j) v += (y(i, j) - m) * (y(i, j) - m);
    v /= d;
    EXPECT_LE(std::abs(m), 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(Determinism, RngAndOps) {
  SeedState a(42, 7), b(42, 7);
  const Tensor ta = a.normal_tensor({4, 4}, 1.0), tb = b.normal_tensor({4, 4}, 1.0);
  EXPECT_TRUE(ta.identical(tb));
  EXPECT_TRUE(matmul(ta, tb).identical(matmul(ta, tb)));
  std::vector<double> x(100, 1.5), k(100, 0.25);
  EXPECT_EQ(fft_causal_conv(x, k), fft_causal_conv(x, k));
}
