#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mega/attention.h"
#include "mega/numerics.h"

using namespace mega;

namespace {

Tensor slice(const Tensor& t, std::size_t begin, std::size_t len) {
  Tensor out({len, t.cols()});
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) out(i, c) = t(begin + i, c);
  return out;
}

// Scalar reference for softmax attention without bias or mask.
Tensor softmax_attention_loops(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t n = q.rows(), m = k.rows(), z = q.cols();
  Tensor o({n, v.cols()});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(m);
    double mx = -1e300, sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < z; ++c) acc += q(i, c) * k(j, c);
      s[j] = acc / std::sqrt(static_cast<double>(z));
      mx = std::max(mx, s[j]);
    }
    for (double& x : s) sum += (x = std::exp(x - mx));
    for (std::size_t c = 0; c < v.cols(); ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += s[j] / sum * v(j, c);
      o(i, c) = acc;
    }
  }
  return o;
}

}  // namespace

TEST(Laplace, Examples) {
  const LaplaceCoeffs c;
  EXPECT_EQ(laplace(c.mu), 0.5);
  // Arguments ±1.772454 after centering and scaling; erf evaluated in
  // extended precision gives these values.
  EXPECT_NEAR(laplace(std::sqrt(2.0)), 0.9939055589075986, 1e-12);
  EXPECT_NEAR(laplace(0.0), 0.006094441092401426, 1e-12);
  EXPECT_LE(std::abs(c.mu * c.mu - 0.5), 1e-15);
  EXPECT_LE(std::abs(4.0 * std::numbers::pi * c.sigma * c.sigma - 1.0), 1e-15);
}

TEST(Laplace, MonotoneAndBounded) {
  double prev = -1.0;
  for (int i = 0; i <= 10000; ++i) {
    const double y = laplace(-6.0 + 12.0 * i / 10000.0);
    EXPECT_GE(y, prev);
    EXPECT_GE(y, 0.0);
    EXPECT_LE(y, 1.0);
    prev = y;
  }
}

TEST(AttentionWeights, SoftmaxExamples) {
  AttnConfig c;
  const Tensor w = attention_weights(Tensor({1, 5}, 3.0), c, AttnMask::full(1, 5), 4);
  for (double v : w.data()) EXPECT_NEAR(v, 0.2, 1e-15);

  SeedState rng(1);
  const Tensor s = rng.normal_tensor({6, 6}, 3.0);
  const Tensor wc = attention_weights(s, c, AttnMask::causal(6), 4);
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_GE(wc(i, j), 0.0);
      if (j > i) EXPECT_EQ(wc(i, j), 0.0);
      sum += wc(i, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(AttentionWeights, LaplaceAndRelu2AgainstScalarOracle) {
  SeedState rng(2);
  const Tensor s = rng.normal_tensor({5, 7}, 4.0);
  AttnMask mask(5, 7);
  mask.set(0, 3, false);
  mask.set(2, 0, false);
  mask.set(2, 6, false);
  for (AttnFn fn : {AttnFn::laplace, AttnFn::relu2}) {
    AttnConfig c;
    c.fn = fn;
    const Tensor w = attention_weights(s, c, mask, 4);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(mask.valid_count(i), i == 0 ? 6u : i == 2 ? 5u : 7u);
      for (std::size_t j = 0; j < 7; ++j) {
        if (!mask.valid(i, j)) {
          EXPECT_EQ(w(i, j), 0.0);
          continue;
        }
        const double x = s(i, j) / static_cast<double>(mask.valid_count(i));
        const double want = fn == AttnFn::laplace ? laplace(x) : (x > 0 ? x * x : 0.0);
        EXPECT_NEAR(w(i, j), want, 1e-15);
        EXPECT_GE(w(i, j), 0.0);
        if (fn == AttnFn::laplace) EXPECT_LE(w(i, j), 1.0);
      }
    }
  }
}

TEST(AttentionWeights, EmptyRowIsMaskingError) {
  AttnMask mask(2, 3);
  for (std::size_t j = 0; j < 3; ++j) mask.set(1, j, false);
  EXPECT_THROW(attention_weights(Tensor({2, 3}), AttnConfig{}, mask, 4), MaskingError);
}

TEST(Rotary, Properties) {
  SeedState rng(3);
  const Tensor q = rng.normal_tensor({1, 8}, 1.0), k = rng.normal_tensor({1, 8}, 1.0);
  const std::int64_t zero = 0;
  EXPECT_TRUE(rotary_embed(q, std::span(&zero, 1)).identical(q));
  auto dot = [&](std::int64_t tq, std::int64_t tk) {
    const Tensor a = rotary_embed(q, std::span(&tq, 1)), b = rotary_embed(k, std::span(&tk, 1));
    double s = 0.0;
    for (std::size_t i = 0; i < 8; ++i) s += a[i] * b[i];
    return s;
  };
  for (std::int64_t shift : {1, 7, 100, 5000}) {
    EXPECT_NEAR(dot(3, 11), dot(3 + shift, 11 + shift), 1e-10);
    EXPECT_NEAR(dot(20, 2), dot(20 + shift, 2 + shift), 1e-10);
  }
  const std::vector<std::int64_t> pos{0, 5, 17, 300}, neg{0, -5, -17, -300};
  const Tensor x = rng.normal_tensor({4, 8}, 1.0);
  EXPECT_LE(max_abs_diff(rotary_embed(rotary_embed(x, pos), neg), x), 1e-12);
  EXPECT_THROW(rotary_embed(Tensor({2, 5}), std::vector<std::int64_t>{0, 1}), ConfigError);
}

TEST(AttentionCore, Examples) {
  SeedState rng(4);
  const Tensor q = rng.normal_tensor({3, 4}, 1.0), k1 = rng.normal_tensor({1, 4}, 1.0),
               v1 = rng.normal_tensor({1, 2}, 1.0);
  const Tensor o1 = attention_core(q, k1, v1, AttnConfig{}, nullptr, AttnMask::full(3, 1));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(o1(i, c), v1(0, c));

  const Tensor k = rng.normal_tensor({5, 4}, 1.0);
  Tensor eye({5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye(i, i) = 1.0;
  for (AttnFn fn : {AttnFn::softmax, AttnFn::relu2, AttnFn::laplace}) {
    AttnConfig c;
    c.fn = fn;
    const Tensor o = attention_core(q, k, eye, c, nullptr, AttnMask::full(3, 5));
    const Tensor w = attention_weights(matmul_nt(q, k), c, AttnMask::full(3, 5), 4);
    EXPECT_LE(max_abs_diff(o, w), 1e-15);
  }

  const Tensor q8 = rng.normal_tensor({8, 4}, 1.0), k8 = rng.normal_tensor({8, 4}, 1.0),
               v8 = rng.normal_tensor({8, 4}, 1.0);
  EXPECT_LE(max_abs_diff(attention_core(q8, k8, v8, AttnConfig{}, nullptr, AttnMask::full(8, 8)),
                         softmax_attention_loops(q8, k8, v8)),
            1e-12);
}

TEST(ChunkedAttention, Examples) {
  SeedState rng(5);
  const Tensor q = rng.normal_tensor({10, 4}, 1.0), k = rng.normal_tensor({10, 4}, 1.0),
               v = rng.normal_tensor({10, 3}, 1.0);
  for (AttnFn fn : {AttnFn::softmax, AttnFn::relu2, AttnFn::laplace}) {
    for (bool causal : {false, true}) {
      AttnConfig full;
      full.fn = fn;
      full.causal = causal;
      const AttnMask m = causal ? AttnMask::causal(10) : AttnMask::full(10, 10);
      const Tensor ref = attention_core(q, k, v, full, nullptr, m);
      EXPECT_LE(max_abs_diff(chunked_attention(q, k, v, full), ref), 1e-12);
      for (std::size_t c : {10, 16}) {
        AttnConfig big = full;
        big.chunk = c;
        EXPECT_LE(max_abs_diff(chunked_attention(q, k, v, big), ref), 1e-12);
      }

      AttnConfig c4 = full;
      c4.chunk = 4;
      const Tensor o = chunked_attention(q, k, v, c4);
      ASSERT_EQ(o.rows(), 10u);
      for (std::size_t b = 0; b < 10; b += 4) {
        const std::size_t len = std::min<std::size_t>(4, 10 - b);
        const AttnMask sm = causal ? AttnMask::causal(len) : AttnMask::full(len, len);
        const Tensor part = attention_core(slice(q, b, len), slice(k, b, len), slice(v, b, len), full, nullptr, sm);
        EXPECT_LE(max_abs_diff(slice(o, b, len), part), 1e-12);
      }
    }
  }
  AttnConfig one;
  one.chunk = 1;
  EXPECT_LE(max_abs_diff(chunked_attention(q, k, v, one), v), 1e-15);
}

TEST(ChunkedAttention, CausalOutputIgnoresLaterPositions) {
  SeedState rng(6);
  for (AttnFn fn : {AttnFn::softmax, AttnFn::relu2, AttnFn::laplace}) {
    AttnConfig c;
    c.fn = fn;
    c.causal = true;
    c.chunk = 5;
    Tensor q = rng.normal_tensor({12, 4}, 1.0), k = rng.normal_tensor({12, 4}, 1.0), v = rng.normal_tensor({12, 3}, 1.0);
    const Tensor before = chunked_attention(q, k, v, c);
    const std::size_t t = 6;
    for (std::size_t i = t + 1; i < 12; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        q(i, j) += 3.0;
        k(i, j) -= 2.0;
      }
    for (std::size_t i = t + 1; i < 12; ++i) v(i, 0) = 100.0;
    const Tensor after = chunked_attention(q, k, v, c);
    for (std::size_t i = 0; i <= t; ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(before(i, j), after(i, j));
  }
}

TEST(RelativeBias, ClippedOffsetsIndexTheTable) {
  Tensor table({2 * kRelativeBiasWindow + 1});
  for (std::size_t i = 0; i < table.size(); ++i) table[i] = static_cast<double>(i);
  const Tensor b = relative_bias_block(table, 0, 2, 200, 2);
  EXPECT_EQ(b(0, 0), static_cast<double>(2 * kRelativeBiasWindow));  // offset 200 clipped to +128
  const Tensor c = relative_bias_block(table, 10, 1, 7, 1);
  EXPECT_EQ(c(0, 0), static_cast<double>(kRelativeBiasWindow - 3));
}

TEST(AttnConfig, ParsingErrors) {
  EXPECT_THROW(parse_attn_fn("relu"), ConfigError);
  EXPECT_THROW(parse_bias_kind("alibi"), ConfigError);
  EXPECT_EQ(parse_attn_fn("laplace"), AttnFn::laplace);
}
