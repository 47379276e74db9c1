#include "mega/config.h"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mega {

using nlohmann::json;

ModelConfig RunConfig::model_config() const {
  ModelConfig m = model;
  m.mode = ModelMode::classifier;
  m.vocab = task.vocab();
  m.classes = task.classes();
  return m;
}

void RunConfig::validate() const {
  task.validate();
  model_config().validate();
  train.adam.validate();
  if (train.steps == 0 || train.batch == 0) throw ConfigError("train.steps and train.batch must be positive");
  if (train.eval_count == 0) throw ConfigError("train.eval_count must be positive");
  if (train.clip < 0.0) throw ConfigError("train.clip must be non-negative");
  if (train.stop_at_accuracy && !(*train.stop_at_accuracy > 0.0 && *train.stop_at_accuracy <= 1.0)) {
    throw ConfigError("train.stop_at_accuracy must lie in (0, 1]");
  }
}

namespace {

class Section {
 public:
  Section(const json& j, std::string name, std::set<std::string> keys) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("'" + name_ + "' must be an object");
    for (const auto& [k, v] : j_.items()) {
      if (!keys.count(k)) throw ConfigError("unknown key '" + name_ + "." + k + "'");
    }
  }

  bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  template <typename T>
  void get(const char* key, T& out) const {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("'" + name_ + "." + key + "' has the wrong type");
    }
  }

  void get_size(const char* key, std::size_t& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError("'" + name_ + "." + key + "' must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  }

  const json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return name_ + "." + key; }

 private:
  const json& j_;
  std::string name_;
};

void read_model(const json& j, ModelConfig& m) {
  Section s(j, "model", {"depth", "d", "z", "v", "d_ffn", "h_ema", "chunk", "attn_fn", "bias_kind", "norm_kind",
                         "pre_norm", "causal", "dropout", "pool"});
  s.get_size("depth", m.depth);
  s.get_size("d", m.d);
  s.get_size("z", m.z);
  s.get_size("v", m.v);
  s.get_size("d_ffn", m.d_ffn);
  s.get_size("h_ema", m.h_ema);
  if (s.has("chunk")) {
    const json& c = s.at("chunk");
    if (c.is_string() && c.get<std::string>() == "full") {
      m.chunk.reset();
    } else if (c.is_number_integer() && c.get<std::int64_t>() > 0) {
      m.chunk = c.get<std::size_t>();
    } else {
      throw ConfigError("'model.chunk' must be a positive integer or \"full\"");
    }
  }
  std::string str;
  if (s.has("attn_fn")) {
    s.get("attn_fn", str);
    m.attn_fn = parse_attn_fn(str);
  }
  if (s.has("bias_kind")) {
    s.get("bias_kind", str);
    m.bias = parse_bias_kind(str);
  }
  if (s.has("norm_kind")) {
    s.get("norm_kind", str);
    m.norm = parse_norm_kind(str);
  }
  if (s.has("pool")) {
    s.get("pool", str);
    m.pool = parse_pooling(str);
  }
  s.get("pre_norm", m.pre_norm);
  s.get("causal", m.causal);
  s.get("dropout", m.dropout);
}

void read_train(const json& j, TrainConfig& t) {
  Section s(j, "train", {"lr", "betas", "eps", "weight_decay", "steps", "batch", "clip", "seed", "eval_every",
                         "eval_count", "stop_at_accuracy"});
  s.get("lr", t.adam.lr);
  if (s.has("betas")) {
    const json& b = s.at("betas");
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number()) {
      throw ConfigError("'train.betas' must be a two-element number array");
    }
    t.adam.beta1 = b[0].get<double>();
    t.adam.beta2 = b[1].get<double>();
  }
  s.get("eps", t.adam.eps);
  s.get("weight_decay", t.adam.weight_decay);
  s.get_size("steps", t.steps);
  s.get_size("batch", t.batch);
  s.get("clip", t.clip);
  if (s.has("seed")) {
    const json& v = s.at("seed");
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError("'train.seed' must be a non-negative integer");
    }
    t.seed = v.get<std::uint64_t>();
  }
  s.get_size("eval_every", t.eval_every);
  s.get_size("eval_count", t.eval_count);
  if (s.has("stop_at_accuracy")) {
    double a = 0.0;
    s.get("stop_at_accuracy", a);
    t.stop_at_accuracy = a;
  }
}

void read_task(const json& j, TaskSpec& t, bool& seed_given) {
  Section s(j, "task", {"kind", "n", "key_vocab", "value_vocab", "noise", "decay", "seed"});
  if (s.has("kind")) {
    std::string k;
    s.get("kind", k);
    t.kind = parse_task_kind(k);
  }
  s.get_size("n", t.n);
  s.get_size("key_vocab", t.key_vocab);
  s.get_size("value_vocab", t.value_vocab);
  s.get("noise", t.noise);
  s.get("decay", t.decay);
  if (s.has("seed")) {
    s.get("seed", t.seed);
    seed_given = true;
  }
}

void read_io(const json& j, IoConfig& io) {
  Section s(j, "io", {"checkpoint", "metrics"});
  s.get("checkpoint", io.checkpoint);
  s.get("metrics", io.metrics);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config JSON: ") + e.what());
  }
  Section top(j, "config", {"model", "train", "task", "io"});
  RunConfig c;
  bool task_seed = false;
  if (top.has("model")) read_model(top.at("model"), c.model);
  if (top.has("train")) read_train(top.at("train"), c.train);
  if (top.has("task")) read_task(top.at("task"), c.task, task_seed);
  if (top.has("io")) read_io(top.at("io"), c.io);
  if (!task_seed) c.task.seed = c.train.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_json(const RunConfig& c, int indent) {
  json j;
  const ModelConfig& m = c.model;
  j["model"] = {{"depth", m.depth},
                {"d", m.d},
                {"z", m.z},
                {"v", m.v},
                {"d_ffn", m.d_ffn},
                {"h_ema", m.h_ema},
                {"attn_fn", std::string(to_string(m.attn_fn))},
                {"bias_kind", std::string(to_string(m.bias))},
                {"norm_kind", std::string(to_string(m.norm))},
                {"pre_norm", m.pre_norm},
                {"causal", m.causal},
                {"dropout", m.dropout},
                {"pool", std::string(to_string(m.pool))}};
  if (m.chunk) {
    j["model"]["chunk"] = *m.chunk;
  } else {
    j["model"]["chunk"] = "full";
  }
  const TrainConfig& t = c.train;
  j["train"] = {{"lr", t.adam.lr},
                {"betas", {t.adam.beta1, t.adam.beta2}},
                {"eps", t.adam.eps},
                {"weight_decay", t.adam.weight_decay},
                {"steps", t.steps},
                {"batch", t.batch},
                {"clip", t.clip},
                {"seed", t.seed},
                {"eval_every", t.eval_every},
                {"eval_count", t.eval_count}};
  j["train"]["stop_at_accuracy"] = t.stop_at_accuracy ? json(*t.stop_at_accuracy) : json(nullptr);
  j["task"] = {{"kind", std::string(to_string(c.task.kind))},
               {"n", c.task.n},
               {"key_vocab", c.task.key_vocab},
               {"value_vocab", c.task.value_vocab},
               {"noise", c.task.noise},
               {"decay", c.task.decay},
               {"seed", c.task.seed}};
  j["io"] = {{"checkpoint", c.io.checkpoint}, {"metrics", c.io.metrics}};
  return j.dump(indent);
}

std::string config_help() {
  return R"(Run configuration (JSON, unknown keys rejected; every key optional):
  model.depth         2          number of MEGA blocks
  model.d             64         model width
  model.z             d/4        shared representation width (rounded up to even)
  model.v             2d         value width
  model.d_ffn         2d         FFN hidden width
  model.h_ema         16         EMA order per dimension; 0 removes the EMA
  model.chunk         "full"     attention chunk length, or "full"
  model.attn_fn       softmax    softmax | relu2 | laplace
  model.bias_kind     none       none | rotary | learned
  model.norm_kind     layer      layer | scale
  model.pre_norm      true       pre-norm (true) or post-norm (false) blocks
  model.causal        false      causal attention mask
  model.dropout       0          attention-weight and FFN-hidden dropout
  model.pool          mean       classifier pooling: mean | last
  train.lr            1e-3
  train.betas         [0.9, 0.98]
  train.eps           1e-8
  train.weight_decay  0.01       decoupled, applied to every parameter
  train.steps         5000
  train.batch         32
  train.clip          1.0        global gradient-norm clip (0 disables)
  train.seed          0
  train.eval_every    250        steps between evaluations
  train.eval_count    512        held-out samples per evaluation
  train.stop_at_accuracy null    stop early once eval accuracy reaches this
  task.kind           windowed_majority | key_value_recall
  task.n              64         sequence length (odd for key_value_recall)
  task.key_vocab      16
  task.value_vocab    16
  task.noise          0          label-flip probability
  task.decay          0.9        windowed_majority weighting
  task.seed           train.seed
  io.checkpoint       ""         checkpoint path written by train
  io.metrics          ""         metrics CSV path written by train
)";
}

}  // namespace mega
