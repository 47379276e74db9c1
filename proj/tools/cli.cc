#include "cli.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "mega/checkpoint.h"
#include "mega/config.h"
#include "mega/error.h"
#include "mega/suites.h"
#include "mega/train.h"

namespace mega::cli {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

const char* verdict(bool ok) { return ok ? "PASS" : "FAIL"; }

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::string report_path;
};

int finish(Context& ctx, const json& report, bool passed) {
  if (!ctx.report_path.empty()) {
    std::ofstream f(ctx.report_path);
    if (!f) {
      ctx.err << "error: cannot write report '" << ctx.report_path << "'\n";
      return kExitConfig;
    }
    f << report.dump(2) << "\n";
  }
  return passed ? kExitPass : kExitFail;
}

// ---- gradcheck -------------------------------------------------------------------

struct GradcheckArgs {
  GradcheckOptions opt;
  std::string attn = "all";
  std::size_t chunk = 0;
  std::string bias = "rotary", norm = "layer";
  bool post_norm = false;
};

int cmd_gradcheck(Context& ctx, const GradcheckArgs& a) {
  GradcheckOptions o = a.opt;
  if (a.chunk) o.chunk = a.chunk;
  o.bias = parse_bias_kind(a.bias);
  o.norm = parse_norm_kind(a.norm);
  o.pre_norm = !a.post_norm;
  std::vector<AttnFn> fns;
  if (a.attn == "all") {
    fns = {AttnFn::softmax, AttnFn::relu2, AttnFn::laplace};
  } else {
    fns = {parse_attn_fn(a.attn)};
  }
  json report{{"command", "gradcheck"}, {"tol", o.fd.tol}, {"eps", o.fd.eps}, {"runs", json::array()}};
  bool all_ok = true;
  for (AttnFn fn : fns) {
    o.fn = fn;
    const ag::FdReport rep = block_gradcheck(o);
    json groups = json::array();
    for (const auto& g : rep.groups) {
      groups.push_back({{"name", g.name},
                        {"checked", g.checked},
                        {"max_rel_err", g.max_rel_err},
                        {"worst_index", g.worst_index},
                        {"analytic", g.analytic},
                        {"numeric", g.numeric}});
    }
    report["runs"].push_back({{"attn_fn", std::string(to_string(fn))},
                              {"groups", groups},
                              {"max_rel_err", rep.max_rel_err()},
                              {"passed", rep.passed()}});
    all_ok = all_ok && rep.passed();
  }
  report["passed"] = all_ok;
  for (const json& run : report["runs"]) {
    ctx.out << "gradcheck attn_fn=" << run["attn_fn"].get<std::string>() << " groups=" << run["groups"].size()
            << " max_rel_err=" << fmt(run["max_rel_err"].get<double>()) << " tol=" << fmt(report["tol"].get<double>())
            << " " << verdict(run["passed"].get<bool>()) << "\n";
    for (const json& g : run["groups"]) {
      if (g["max_rel_err"].get<double>() > report["tol"].get<double>()) {
        ctx.out << "  " << g["name"].get<std::string>() << " max_rel_err=" << fmt(g["max_rel_err"].get<double>())
                << " at " << g["worst_index"].get<std::size_t>() << "\n";
      }
    }
  }
  return finish(ctx, report, all_ok);
}

// ---- ema-equiv -------------------------------------------------------------------

struct EmaArgs {
  std::size_t n = 4096, d = 8, h = 16, trials = 1;
  std::uint64_t seed = 0;
  double tol = 1e-10;
};

int cmd_ema_equiv(Context& ctx, const EmaArgs& a) {
  if (a.n == 0 || a.d == 0 || a.h == 0 || a.trials == 0) throw ConfigError("n, d, h and trials must be positive");
  const EmaEquivResult r = ema_equivalence(a.n, a.d, a.h, a.seed, a.trials);
  const bool ok = r.max_abs_gap <= a.tol;
  const json report{{"command", "ema-equiv"}, {"n", a.n},        {"d", a.d},   {"h", a.h},
                    {"seed", a.seed},         {"trials", r.trials}, {"tol", a.tol}, {"max_abs_gap", r.max_abs_gap},
                    {"passed", ok}};
  ctx.out << "ema-equiv n=" << report["n"] << " d=" << report["d"] << " h=" << report["h"]
          << " trials=" << report["trials"] << " max_abs_gap=" << fmt(report["max_abs_gap"].get<double>())
          << " tol=" << fmt(a.tol) << " " << verdict(ok) << "\n";
  return finish(ctx, report, ok);
}

// ---- theorem1 ----------------------------------------------------------------------

struct Theorem1Args {
  std::size_t trials = 100, n = 8, d = 8;
  std::vector<std::size_t> heads{4};
  std::uint64_t seed = 0;
  double guard = 1e-8, tol = 1e-8, max_exclusion_rate = 0.01;
};

int cmd_theorem1(Context& ctx, const Theorem1Args& a) {
  if (a.trials == 0 || a.n == 0 || a.d == 0) throw ConfigError("trials, n and d must be positive");
  const Theorem1Summary s = theorem1_trials(a.trials, a.heads, a.n, a.d, a.seed, a.guard);
  const bool ok = s.max_gap <= a.tol && s.exclusion_rate() < a.max_exclusion_rate;
  const json report{{"command", "theorem1"},
                    {"trials", s.trials},
                    {"heads", a.heads},
                    {"n", a.n},
                    {"d", a.d},
                    {"guard_eps", a.guard},
                    {"tol", a.tol},
                    {"max_gap", s.max_gap},
                    {"excluded", s.excluded},
                    {"coordinates", s.coordinates},
                    {"exclusion_rate", s.exclusion_rate()},
                    {"passed", ok}};
  ctx.out << "theorem1 trials=" << report["trials"] << " max_gap=" << fmt(s.max_gap) << " tol=" << fmt(a.tol)
          << " excluded=" << s.excluded << "/" << s.coordinates << " exclusion_rate=" << fmt(s.exclusion_rate())
          << " " << verdict(ok) << "\n";
  return finish(ctx, report, ok);
}

// ---- laplace-check -----------------------------------------------------------------

struct LaplaceArgs {
  std::size_t points = 10000;
  double lo = -6.0, hi = 6.0, tol = 1e-12;
};

int cmd_laplace(Context& ctx, const LaplaceArgs& a) {
  if (a.points < 2 || !(a.hi > a.lo)) throw ConfigError("need at least 2 points and hi > lo");
  const LaplaceSummary s = laplace_check(a.points, a.lo, a.hi);
  const bool ok = s.f_at_mu_err <= 1e-15 && s.mu_sq_err <= 1e-15 && s.sigma_err <= 1e-15 &&
                  s.max_oracle_gap <= a.tol && s.monotone && s.bounded;
  const json report{{"command", "laplace-check"}, {"points", s.points},
                    {"f_at_mu_err", s.f_at_mu_err}, {"mu_sq_err", s.mu_sq_err},
                    {"sigma_err", s.sigma_err},     {"max_oracle_gap", s.max_oracle_gap},
                    {"tol", a.tol},                 {"monotone", s.monotone},
                    {"bounded", s.bounded},         {"passed", ok}};
  ctx.out << "laplace-check points=" << s.points << " f_at_mu_err=" << fmt(s.f_at_mu_err)
          << " mu_sq_err=" << fmt(s.mu_sq_err) << " sigma_err=" << fmt(s.sigma_err)
          << " max_oracle_gap=" << fmt(s.max_oracle_gap) << " monotone=" << (s.monotone ? "yes" : "no")
          << " bounded=" << (s.bounded ? "yes" : "no") << " " << verdict(ok) << "\n";
  return finish(ctx, report, ok);
}

// ---- bench ---------------------------------------------------------------------------

struct BenchArgs {
  BenchOptions opt;
  std::string dtype = "f64";
  std::string csv;
  std::optional<double> max_chunked_growth, min_full_growth;
};

int cmd_bench(Context& ctx, BenchArgs a) {
  if (a.dtype == "f64") {
    a.opt.dtype = Dtype::f64;
  } else if (a.dtype == "f32") {
    a.opt.dtype = Dtype::f32;
  } else {
    throw ConfigError("dtype must be f64 or f32");
  }
  const std::vector<BenchRecord> recs = run_bench(a.opt);
  const auto growth = growth_factors(recs);
  json rows = json::array();
  for (const BenchRecord& r : recs) {
    rows.push_back({{"n", r.n},
                    {"c", r.c},
                    {"mode", r.mode},
                    {"seconds", r.seconds ? json(*r.seconds) : json(nullptr)},
                    {"dtype", to_string(r.dtype)},
                    {"note", r.note}});
  }
  bool ok = true;
  auto check = [&](const char* mode, auto pred) {
    auto it = growth.find(mode);
    if (it == growth.end()) return;
    for (double g : it->second) ok = ok && pred(g);
  };
  if (a.max_chunked_growth) check("attention_chunked", [&](double g) { return g <= *a.max_chunked_growth; });
  if (a.min_full_growth) check("attention_full", [&](double g) { return g >= *a.min_full_growth; });
  const json report{{"command", "bench"}, {"records", rows}, {"growth", growth}, {"reps", a.opt.reps}, {"passed", ok}};
  if (!a.csv.empty()) {
    std::ofstream f(a.csv);
    if (!f) throw ConfigError("cannot write bench CSV '" + a.csv + "'");
    f << bench_csv(recs);
  }
  ctx.out << bench_csv(recs);
  for (const auto& [mode, gs] : growth) {
    ctx.out << "growth " << mode << ":";
    for (double g : gs) ctx.out << " " << fmt(g);
    ctx.out << "\n";
  }
  if (a.max_chunked_growth || a.min_full_growth) ctx.out << "bench " << verdict(ok) << "\n";
  return finish(ctx, report, ok);
}

// ---- train / eval ----------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::size_t> steps;
  std::optional<double> min_accuracy;
  bool quiet = false;
};

int cmd_train(Context& ctx, const TrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  if (a.steps) {
    if (*a.steps == 0) throw ConfigError("--steps must be positive");
    cfg.train.steps = *a.steps;
  }
  const TrainResult r = train(cfg, [&](const MetricsRow& row) {
    if (!a.quiet && row.eval_accuracy) {
      ctx.out << "step " << row.step + 1 << " loss=" << fmt(row.loss) << " eval_accuracy=" << *row.eval_accuracy
              << "\n";
    }
  });
  if (!cfg.io.metrics.empty()) write_metrics_csv(cfg.io.metrics, r.history);
  if (!cfg.io.checkpoint.empty()) checkpoint_save(r.params, cfg, cfg.io.checkpoint);
  const bool ok = !a.min_accuracy || r.final_accuracy >= *a.min_accuracy;
  const json report{{"command", "train"},
                    {"config", json::parse(to_json(cfg))},
                    {"steps_run", r.steps_run},
                    {"stopped_early", r.stopped_early},
                    {"final_loss", r.history.empty() ? 0.0 : r.history.back().loss},
                    {"final_accuracy", r.final_accuracy},
                    {"parameters", r.params.count()},
                    {"passed", ok}};
  ctx.out << "train task=" << to_string(cfg.task.kind) << " steps_run=" << r.steps_run
          << " final_loss=" << fmt(report["final_loss"].get<double>()) << " final_accuracy=" << r.final_accuracy
          << " parameters=" << r.params.count();
  if (a.min_accuracy) ctx.out << " " << verdict(ok);
  ctx.out << "\n";
  return finish(ctx, report, ok);
}

struct EvalArgs {
  std::string checkpoint, config;
  std::size_t count = 2000;
};

int cmd_eval(Context& ctx, const EvalArgs& a) {
  if (a.count == 0) throw ConfigError("--count must be positive");
  std::optional<RunConfig> expected;
  if (!a.config.empty()) expected = load_run_config(a.config);
  const LoadedCheckpoint lc = expected ? checkpoint_load(a.checkpoint, *expected) : checkpoint_load(a.checkpoint);
  const EvalResult r = evaluate(lc.config.model_config(), lc.params, lc.config.task, a.count);
  const json report{{"command", "eval"},      {"checkpoint", a.checkpoint}, {"count", r.count},
                    {"accuracy", r.accuracy}, {"mean_loss", r.mean_loss},   {"passed", true}};
  ctx.out << "eval count=" << r.count << " accuracy=" << r.accuracy << " mean_loss=" << fmt(r.mean_loss) << "\n";
  return finish(ctx, report, true);
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"MEGA reference implementation: verification suites, benchmarks and training", "mega"};
  app.set_help_flag("--help", "Print this help message and exit");
  app.require_subcommand(1);
  std::string report;
  app.add_option("--report", report, "Write a JSON report to this path");
  app.fallthrough();

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every MEGA block parameter group");
  gc->add_option("--n", ga.opt.n, "Sequence length")->capture_default_str();
  gc->add_option("--d", ga.opt.d, "Model width")->capture_default_str();
  gc->add_option("--z", ga.opt.z, "Shared representation width")->capture_default_str();
  gc->add_option("--v", ga.opt.v, "Value width")->capture_default_str();
  gc->add_option("--h", ga.opt.h_ema, "EMA order")->capture_default_str();
  gc->add_option("--attn", ga.attn, "softmax | relu2 | laplace | all")->capture_default_str();
  gc->add_option("--chunk", ga.chunk, "Chunk length (0: full)")->capture_default_str();
  gc->add_option("--bias", ga.bias, "none | rotary | learned")->capture_default_str();
  gc->add_option("--norm", ga.norm, "layer | scale")->capture_default_str();
  gc->add_flag("--post-norm", ga.post_norm, "Use post-norm blocks");
  gc->add_flag("--causal", ga.opt.causal, "Causal attention");
  gc->add_option("--seed", ga.opt.seed)->capture_default_str();
  gc->add_option("--spread", ga.opt.spread, "Std of the noise added to the initial parameters")->capture_default_str();
  gc->add_option("--tol", ga.opt.fd.tol, "Relative error tolerance")->capture_default_str();
  gc->add_option("--eps", ga.opt.fd.eps, "Central-difference step")->capture_default_str();
  gc->add_option("--max-coords", ga.opt.fd.max_coords, "Coordinates sampled per large group")->capture_default_str();

  EmaArgs ea;
  auto* ee = app.add_subcommand("ema-equiv", "Compare the EMA recurrence with its FFT convolution form");
  ee->add_option("--n", ea.n)->capture_default_str();
  ee->add_option("--d", ea.d)->capture_default_str();
  ee->add_option("--h", ea.h)->capture_default_str();
  ee->add_option("--trials", ea.trials)->capture_default_str();
  ee->add_option("--seed", ea.seed)->capture_default_str();
  ee->add_option("--tol", ea.tol)->capture_default_str();

  Theorem1Args ta;
  auto* th = app.add_subcommand("theorem1", "Single-head gated attention reproducing multi-head attention");
  th->add_option("--trials", ta.trials, "Trials per head count")->capture_default_str();
  th->add_option("--heads", ta.heads, "Head counts (comma separated)")->delimiter(',')->capture_default_str();
  th->add_option("--n", ta.n)->capture_default_str();
  th->add_option("--d", ta.d)->capture_default_str();
  th->add_option("--seed", ta.seed)->capture_default_str();
  th->add_option("--guard", ta.guard, "Denominator magnitude below which a coordinate is excluded")
      ->capture_default_str();
  th->add_option("--tol", ta.tol)->capture_default_str();
  th->add_option("--max-exclusion-rate", ta.max_exclusion_rate)->capture_default_str();

  LaplaceArgs la;
  auto* lp = app.add_subcommand("laplace-check", "Laplace attention function against an extended-precision erf");
  lp->add_option("--points", la.points)->capture_default_str();
  lp->add_option("--lo", la.lo)->capture_default_str();
  lp->add_option("--hi", la.hi)->capture_default_str();
  lp->add_option("--tol", la.tol)->capture_default_str();

  BenchArgs ba;
  auto* bn = app.add_subcommand("bench", "Single-threaded timing of EMA and attention paths");
  bn->add_option("--n", ba.opt.ns, "Sequence lengths (comma separated)")->delimiter(',')->capture_default_str();
  bn->add_option("--chunk", ba.opt.chunk)->capture_default_str();
  bn->add_option("--modes", ba.opt.modes, "scan,fft,attention_full,attention_chunked")
      ->delimiter(',')
      ->capture_default_str();
  bn->add_option("--reps", ba.opt.reps, "Timed repetitions (median reported)")->capture_default_str();
  bn->add_option("--dtype", ba.dtype, "f64 | f32")->capture_default_str();
  bn->add_option("--d", ba.opt.d)->capture_default_str();
  bn->add_option("--h", ba.opt.h)->capture_default_str();
  bn->add_option("--z", ba.opt.z)->capture_default_str();
  bn->add_option("--v", ba.opt.v)->capture_default_str();
  bn->add_option("--seed", ba.opt.seed)->capture_default_str();
  bn->add_option("--csv", ba.csv, "Also write the CSV to this path");
  bn->add_option("--max-chunked-growth", ba.max_chunked_growth, "Fail if chunked attention grows faster");
  bn->add_option("--min-full-growth", ba.min_full_growth, "Fail if full attention grows slower");

  TrainArgs tra;
  auto* tr = app.add_subcommand("train", "Train a classifier on a synthetic task")->footer(config_help());
  tr->add_option("--config", tra.config, "Run configuration JSON")->required();
  tr->add_option("--steps", tra.steps, "Override train.steps");
  tr->add_option("--min-accuracy", tra.min_accuracy, "Exit 1 if the final eval accuracy is lower");
  tr->add_flag("--quiet", tra.quiet);

  EvalArgs eva;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split of its task");
  ev->add_option("--checkpoint", eva.checkpoint)->required();
  ev->add_option("--config", eva.config, "Verify the checkpoint against this run configuration");
  ev->add_option("--count", eva.count)->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitPass;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitPass;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  Context ctx{out, err, report};
  try {
    if (gc->parsed()) return cmd_gradcheck(ctx, ga);
    if (ee->parsed()) return cmd_ema_equiv(ctx, ea);
    if (th->parsed()) return cmd_theorem1(ctx, ta);
    if (lp->parsed()) return cmd_laplace(ctx, la);
    if (bn->parsed()) return cmd_bench(ctx, ba);
    if (tr->parsed()) return cmd_train(ctx, tra);
    if (ev->parsed()) return cmd_eval(ctx, eva);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFail;
  }
  err << app.help();
  return kExitConfig;
}

}  // namespace mega::cli
