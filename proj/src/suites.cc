#include "mega/suites.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <new>
#include <numbers>

#include "mega/ema.h"
#include "mega/fft.h"
#include "mega/model.h"
#include "mega/rng.h"

namespace mega {

// ---- gradient check -----------------------------------------------------------

ag::FdReport block_gradcheck(const GradcheckOptions& o) {
  ModelConfig cfg;
  cfg.d = o.d;
  cfg.z = o.z;
  cfg.v = o.v;
  cfg.h_ema = o.h_ema;
  cfg.chunk = o.chunk;
  cfg.attn_fn = o.fn;
  cfg.bias = o.bias;
  cfg.norm = o.norm;
  cfg.pre_norm = o.pre_norm;
  cfg.causal = o.causal;
  cfg.validate();

  SeedState rng(o.seed);
  MegaBlockParams block = MegaBlockParams::init(cfg, rng);
  // Move every group away from its structured initial value so no gradient
  // is trivially zero.
  block.visit("", [&](const std::string&, Tensor& t, bool) {
    for (double& v : t.data()) v += rng.normal(0.0, o.spread);
  });
  if (block.layer.has_ema()) block.layer.ema.h0_trainable = true;

  const Tensor x = rng.normal_tensor({o.n, o.d}, 1.0);
  const Tensor r = rng.normal_tensor({o.n, o.d}, 1.0);
  ag::Graph g;
  const ag::Var y = build_mega_block(g, "", block, g.input(x), cfg.attn(), nullptr).y;
  const ag::Var loss = ag::reduce_sum(ag::mul(y, g.input(r)));
  g.forward();
  const ag::GradientSet grads = g.backward(loss);

  std::vector<ag::NamedParam> params;
  block.visit("", [&](const std::string& name, Tensor& t, bool trainable) {
    if (trainable) params.push_back({name, &t});
  });
  auto f = [&] {
    g.forward();
    return g.value(loss)[0];
  };
  ag::FdOptions fd = o.fd;
  fd.seed = mix64(o.seed ^ 0xfdULL);
  return ag::finite_diff_check(f, params, grads, fd);
}

// ---- EMA equivalence -------------------------------------------------------------

EmaEquivResult ema_equivalence(std::size_t n, std::size_t d, std::size_t h, std::uint64_t seed, std::size_t trials) {
  EmaEquivResult r;
  SeedState rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    EmaParams p = EmaParams::init(d, h, rng);
    const Tensor h_init = rng.normal_tensor({d, h}, 1.0);
    const Tensor x = rng.normal_tensor({n, d}, 1.0);
    const Tensor a = ema_scan(p, x, h_init).y;
    const Tensor b = ema_fft_forward(p, x, h_init);
    r.max_abs_gap = std::max(r.max_abs_gap, max_abs_diff(a, b));
    ++r.trials;
  }
  return r;
}

// ---- single-head gated attention versus multi-head ------------------------

Theorem1Summary theorem1_trials(std::size_t trials, const std::vector<std::size_t>& heads, std::size_t n,
                                std::size_t d, std::uint64_t seed, double guard_eps) {
  Theorem1Summary s;
  SeedState rng(seed);
  for (std::size_t h : heads) {
    for (std::size_t t = 0; t < trials; ++t) {
      const ReferenceMhaParams p = ReferenceMhaParams::init(d, rng);
      const Tensor x = rng.normal_tensor({n, d}, 1.0);
      const Theorem1Report rep = theorem1_check(x, p, h, guard_eps);
      s.max_gap = std::max(s.max_gap, rep.max_gap);
      s.excluded += rep.excluded.size();
      s.coordinates += rep.coordinates;
      ++s.trials;
    }
  }
  return s;
}

// ---- laplace ------------------------------------------------------------------------

long double erf_reference(long double x) {
  const long double ax = std::fabs(x);
  const long double two_over_sqrt_pi = 2.0L / std::sqrt(std::numbers::pi_v<long double>);
  long double r;
  if (ax < 2.5L) {
    long double term = ax, sum = ax;
    for (int k = 1; k < 200; ++k) {
      term *= -ax * ax / k;
      const long double add = term / (2 * k + 1);
      sum += add;
      if (std::fabs(add) < 1e-22L * std::fabs(sum)) break;
    }
    r = two_over_sqrt_pi * sum;
  } else {
    long double t = ax;
    for (int k = 120; k >= 1; --k) t = ax + (k / 2.0L) / t;
    const long double erfc = std::exp(-ax * ax) / std::sqrt(std::numbers::pi_v<long double>) / t;
    r = 1.0L - erfc;
  }
  return x < 0 ? -r : r;
}

LaplaceSummary laplace_check(std::size_t points, double lo, double hi) {
  LaplaceSummary s;
  const LaplaceCoeffs c;
  s.f_at_mu_err = std::abs(laplace(c.mu) - 0.5);
  s.mu_sq_err = std::abs(c.mu * c.mu - 0.5);
  s.sigma_err = std::abs(4.0 * std::numbers::pi * c.sigma * c.sigma - 1.0);
  const long double mu = std::sqrt(0.5L);
  const long double sigma = std::sqrt(1.0L / (4.0L * std::numbers::pi_v<long double>));
  double prev = -1.0;
  for (std::size_t i = 0; i < points; ++i) {
    const double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    const double f = laplace(x);
    const long double ref = 0.5L * (1.0L + erf_reference((x - mu) / (sigma * std::sqrt(2.0L))));
    s.max_oracle_gap = std::max(s.max_oracle_gap, static_cast<double>(std::fabs(f - ref)));
    if (f < prev) s.monotone = false;
    if (!(f >= 0.0 && f <= 1.0)) s.bounded = false;
    prev = f;
  }
  s.points = points;
  return s;
}

// ---- benchmarks ------------------------------------------------------------------------

namespace {

template <typename T>
std::vector<T> random_buffer(std::size_t count, SeedState& rng, double lo, double hi) {
  std::vector<T> v(count);
  for (T& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return v;
}

template <typename Fn>
double median_seconds(std::size_t reps, Fn&& fn) {
  fn();  // warm-up
  std::vector<double> times;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t m = times.size() / 2;
  return times.size() % 2 ? times[m] : 0.5 * (times[m - 1] + times[m]);
}

template <typename T>
double bench_one(const BenchOptions& o, const std::string& mode, std::size_t n, SeedState& rng) {
  volatile T sink = 0;
  if (mode == "scan" || mode == "fft") {
    const std::size_t d = o.d, h = o.h;
    const auto x = random_buffer<T>(n * d, rng, -1, 1);
    const auto alpha = random_buffer<T>(d * h, rng, 0.1, 0.9);
    const auto delta = random_buffer<T>(d * h, rng, 0.1, 0.9);
    const auto beta = random_buffer<T>(d * h, rng, -1, 1);
    const auto eta = random_buffer<T>(d * h, rng, -1, 1);
    std::vector<T> decay(d * h);
    for (std::size_t i = 0; i < d * h; ++i) decay[i] = T(1) - alpha[i] * delta[i];
    if (mode == "scan") {
      return median_seconds(o.reps, [&] {
        std::vector<T> state(d * h, T(0)), y(n * d);
        detail::ema_scan_raw<T>(n, d, h, x.data(), alpha.data(), decay.data(), beta.data(), eta.data(), state.data(),
                                y.data());
        sink = y.back();
      });
    }
    return median_seconds(o.reps, [&] {
      std::vector<T> kernel(n), col(n);
      T last = 0;
      for (std::size_t j = 0; j < d; ++j) {
        std::fill(kernel.begin(), kernel.end(), T(0));
        for (std::size_t k = 0; k < h; ++k) {
          const std::size_t i = j * h + k;
          const T w = eta[i] * alpha[i] * beta[i];
          const T lg = std::log(decay[i]);
          for (std::size_t t = 0; t < n; ++t) kernel[t] += w * std::exp(static_cast<T>(t) * lg);
        }
        for (std::size_t t = 0; t < n; ++t) col[t] = x[t * d + j];
        const std::vector<T> y = detail::causal_conv_fft<T>(col, kernel);
        last += y.back();
      }
      sink = last;
    });
  }
  const std::size_t chunk = mode == "attention_full" ? n : o.chunk;
  const auto q = random_buffer<T>(n * o.z, rng, -1, 1);
  const auto k = random_buffer<T>(n * o.z, rng, -1, 1);
  const auto v = random_buffer<T>(n * o.v, rng, -1, 1);
  std::vector<T> out(n * o.v);
  return median_seconds(o.reps, [&] {
    detail::chunked_attention_raw<T>(q.data(), k.data(), v.data(), out.data(), n, o.z, o.v, chunk, AttnFn::softmax,
                                     false);
    sink = out.back();
  });
}

}  // namespace

std::vector<BenchRecord> run_bench(const BenchOptions& o) {
  if (o.reps < 5) throw ConfigError("bench needs at least 5 repetitions");
  if (o.chunk == 0) throw ConfigError("bench chunk must be positive");
  for (const std::string& m : o.modes) {
    if (m != "scan" && m != "fft" && m != "attention_full" && m != "attention_chunked") {
      throw ConfigError("unknown bench mode '" + m + "'");
    }
  }
  for (std::size_t n : o.ns)
    if (n == 0) throw ConfigError("bench lengths must be positive");
  std::vector<BenchRecord> out;
  SeedState rng(o.seed);
  for (const std::string& mode : o.modes) {
    for (std::size_t n : o.ns) {
      BenchRecord rec;
      rec.n = n;
      rec.mode = mode;
      rec.dtype = o.dtype;
      rec.c = mode == "attention_full" ? "full" : mode == "attention_chunked" ? std::to_string(o.chunk) : "-";
      try {
        rec.seconds = o.dtype == Dtype::f32 ? bench_one<float>(o, mode, n, rng) : bench_one<double>(o, mode, n, rng);
      } catch (const std::bad_alloc&) {
        rec.note = "out of memory";
      }
      out.push_back(rec);
    }
  }
  return out;
}

std::string bench_csv(const std::vector<BenchRecord>& records) {
  std::string s = "n,c,mode,seconds,dtype\n";
  char buf[64];
  for (const BenchRecord& r : records) {
    s += std::to_string(r.n) + "," + r.c + "," + r.mode + ",";
    if (r.seconds) {
      std::snprintf(buf, sizeof buf, "%.6e", *r.seconds);
      s += buf;
    }
    s += "," + to_string(r.dtype) + "\n";
  }
  return s;
}

std::map<std::string, std::vector<double>> growth_factors(const std::vector<BenchRecord>& records) {
  std::map<std::string, std::vector<double>> g;
  std::map<std::string, const BenchRecord*> prev;
  for (const BenchRecord& r : records) {
    const BenchRecord*& p = prev[r.mode];
    if (p && p->seconds && r.seconds && *p->seconds > 0.0) g[r.mode].push_back(*r.seconds / *p->seconds);
    p = &r;
  }
  return g;
}

}  // namespace mega
