#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mega/attention.h"
#include "mega/autodiff.h"
#include "mega/numerics.h"
#include "mega/tensor.h"

// Verification and benchmark suites shared by the command-line tool and the
// acceptance tests.
namespace mega {

// ---- gradient check of a full MEGA block ------------------------------------

struct GradcheckOptions {
  std::size_t n = 16, d = 8, z = 4, v = 16, h_ema = 4;
  AttnFn fn = AttnFn::softmax;
  std::optional<std::size_t> chunk;
  // Rotary positions keep every group's gradient nonzero: with softmax and no
  // positional term, mu_k shifts each score row by a constant and its
  // gradient vanishes identically.
  BiasKind bias = BiasKind::rotary;
  NormKind norm = NormKind::layer;
  bool pre_norm = true;
  bool causal = false;
  std::uint64_t seed = 0;
  double spread = 0.4;  // std of the noise added to every initialized parameter
  ag::FdOptions fd;
};

// Loss is sum(Y' * R) for a fixed random R; every parameter group of the
// block (including the EMA initial state) is compared against central
// differences.
ag::FdReport block_gradcheck(const GradcheckOptions& options);

// ---- EMA scan versus FFT ----------------------------------------------------

struct EmaEquivResult {
  double max_abs_gap = 0.0;
  std::size_t trials = 0;
};

EmaEquivResult ema_equivalence(std::size_t n, std::size_t d, std::size_t h, std::uint64_t seed, std::size_t trials);

// ---- single-head gated attention versus multi-head ------------------------

struct Theorem1Summary {
  double max_gap = 0.0;
  std::size_t excluded = 0;
  std::size_t coordinates = 0;
  std::size_t trials = 0;
  double exclusion_rate() const { return coordinates ? static_cast<double>(excluded) / coordinates : 0.0; }
};

// Runs `trials` random instances per head count.
Theorem1Summary theorem1_trials(std::size_t trials, const std::vector<std::size_t>& heads, std::size_t n,
                                std::size_t d, std::uint64_t seed, double guard_eps = 1e-8);

// ---- laplace attention function ------------------------------------------------

// erf evaluated in extended precision by its Maclaurin series near zero and
// a continued fraction for the complement elsewhere.
long double erf_reference(long double x);

struct LaplaceSummary {
  double f_at_mu_err = 0.0;
  double mu_sq_err = 0.0;
  double sigma_err = 0.0;  // |4 pi sigma^2 - 1|
  double max_oracle_gap = 0.0;
  bool monotone = true;
  bool bounded = true;
  std::size_t points = 0;
};

LaplaceSummary laplace_check(std::size_t points = 10000, double lo = -6.0, double hi = 6.0);

// ---- benchmarks -----------------------------------------------------------------

struct BenchOptions {
  std::vector<std::size_t> ns{2048, 4096, 8192};
  std::size_t chunk = 128;
  std::vector<std::string> modes{"scan", "fft", "attention_full", "attention_chunked"};
  std::size_t reps = 5;
  Dtype dtype = Dtype::f64;
  std::size_t d = 8, h = 16;   // EMA modes
  std::size_t z = 32, v = 32;  // attention modes
  std::uint64_t seed = 0;
};

struct BenchRecord {
  std::size_t n = 0;
  std::string c;  // chunk length, "full", or "-" for EMA modes
  std::string mode;
  std::optional<double> seconds;  // empty when the run failed
  Dtype dtype = Dtype::f64;
  std::string note;
};

std::vector<BenchRecord> run_bench(const BenchOptions& options);
std::string bench_csv(const std::vector<BenchRecord>& records);
// mode -> seconds(n_i) / seconds(n_{i-1}) along the n ladder.
std::map<std::string, std::vector<double>> growth_factors(const std::vector<BenchRecord>& records);

}  // namespace mega
