#include "mega/train.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mega/optim.h"

namespace mega {

std::vector<ag::NamedParam> named_params(ModelParams& params) {
  std::vector<ag::NamedParam> out;
  params.visit([&](const std::string& name, Tensor& t, bool trainable) {
    if (trainable) out.push_back({name, &t});
  });
  return out;
}

EvalResult score_logits(const std::vector<Tensor>& logits, const std::vector<int>& labels) {
  if (logits.size() != labels.size()) throw DimensionError("score_logits: logits and labels differ in count");
  EvalResult r;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Tensor& z = logits[i];
    for (std::size_t row = 0; row < z.rows(); ++row) {
      auto v = z.row(row);
      const auto best = std::max_element(v.begin(), v.end()) - v.begin();
      if (best == labels[i]) ++correct;
      const double mx = v[static_cast<std::size_t>(best)];
      double s = 0.0;
      for (double x : v) s += std::exp(x - mx);
      loss += mx + std::log(s) - v[static_cast<std::size_t>(labels[i])];
      ++r.count;
    }
  }
  if (r.count) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
    r.mean_loss = loss / static_cast<double>(r.count);
  }
  return r;
}

EvalResult evaluate(const ModelConfig& cfg, const ModelParams& params, const TaskSpec& spec, std::size_t count) {
  if (cfg.mode != ModelMode::classifier) throw ConfigError("evaluate expects a classifier model");
  const std::vector<Sample> samples = generate_task(eval_split(spec), count);
  std::vector<Tensor> logits;
  std::vector<int> labels;
  logits.reserve(count);
  for (const Sample& s : samples) {
    logits.push_back(model_forward(cfg, params, s.tokens, ModelMode::classifier));
    labels.push_back(s.label);
  }
  return score_logits(logits, labels);
}

TrainResult train(const RunConfig& config, const ProgressFn& progress) {
  config.validate();
  const ModelConfig mc = config.model_config();
  const TrainConfig& tc = config.train;
  const SeedState root(tc.seed);
  SeedState init_rng = root.fork(1);
  TrainResult result;
  result.params = ModelParams::init(mc, init_rng);
  std::vector<ag::NamedParam> named = named_params(result.params);
  OptimState opt;
  opt.hp = tc.adam;

  for (std::size_t step = 0; step < tc.steps; ++step) {
    const std::vector<Sample> batch = generate_task(config.task, tc.batch, static_cast<std::uint64_t>(step) * tc.batch);
    SeedState drop_rng = root.fork(1000 + step);
    ag::Graph g;
    std::vector<ag::Var> rows;
    std::vector<int> labels;
    for (const Sample& s : batch) {
      rows.push_back(build_model(g, mc, result.params, s.tokens, nullptr, mc.dropout > 0.0 ? &drop_rng : nullptr).logits);
      labels.push_back(s.label);
    }
    const ag::Var loss = ag::cross_entropy(ag::concat_rows(rows), labels);
    double loss_value = 0.0;
    try {
      g.forward();
      loss_value = g.value(loss)[0];
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + " with attn_fn " +
                           std::string(to_string(mc.attn_fn)) + ": " + e.what());
    }
    if (!std::isfinite(loss_value)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step) + " with attn_fn " +
                           std::string(to_string(mc.attn_fn)));
    }
    ag::GradientSet grads = g.backward(loss);
    if (tc.clip > 0.0) clip_global_norm(grads, tc.clip);
    adam_step(named, grads, opt);

    MetricsRow row{step, loss_value, std::nullopt};
    const bool last = step + 1 == tc.steps;
    if ((tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) || last) {
      const EvalResult ev = evaluate(mc, result.params, config.task, tc.eval_count);
      row.eval_accuracy = ev.accuracy;
      result.final_accuracy = ev.accuracy;
    }
    result.history.push_back(row);
    result.steps_run = step + 1;
    if (progress) progress(row);
    if (row.eval_accuracy && tc.stop_at_accuracy && *row.eval_accuracy >= *tc.stop_at_accuracy) {
      result.stopped_early = !last;
      break;
    }
  }
  return result;
}

std::string metrics_csv(const std::vector<MetricsRow>& history) {
  std::string out = "step,loss,eval_accuracy\n";
  char buf[96];
  for (const MetricsRow& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,", r.step, r.loss);
    out += buf;
    if (r.eval_accuracy) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.eval_accuracy);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write metrics file '" + path + "'");
  out << metrics_csv(history);
}

}  // namespace mega
