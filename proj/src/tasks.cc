#include "mega/tasks.h"

#include <algorithm>
#include <numeric>
#include <string>

#include "mega/error.h"
#include "mega/rng.h"

namespace mega {

namespace {
constexpr std::uint64_t kEvalSeedOffset = 0x9e3779b97f4a7c15ULL;
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "windowed_majority") return TaskKind::windowed_majority;
  if (name == "key_value_recall") return TaskKind::key_value_recall;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::windowed_majority ? "windowed_majority" : "key_value_recall";
}

std::size_t TaskSpec::vocab() const { return kind == TaskKind::windowed_majority ? 2 : key_vocab + value_vocab; }

std::size_t TaskSpec::classes() const { return kind == TaskKind::windowed_majority ? 2 : value_vocab; }

void TaskSpec::validate() const {
  if (n == 0) throw ConfigError("task.n must be positive");
  if (!(noise >= 0.0 && noise <= 0.5)) throw ConfigError("task.noise must lie in [0, 0.5]");
  if (kind == TaskKind::windowed_majority) {
    if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("task.decay must lie in (0, 1]");
  } else {
    if (n < 3 || n % 2 == 0) throw ConfigError("key_value_recall needs odd n >= 3, got " + std::to_string(n));
    if (key_vocab == 0 || value_vocab < 2) throw ConfigError("key_value_recall needs key_vocab >= 1, value_vocab >= 2");
  }
}

int majority_label(const std::vector<int>& tokens, double decay) {
  double s = 0.0;
  for (int t : tokens) s = decay * s + (t == 1 ? 1.0 : -1.0);
  return s > 0.0 ? 1 : 0;
}

Sample generate_sample(const TaskSpec& spec, std::uint64_t index) {
  spec.validate();
  SeedState rng(mix64(spec.seed ^ mix64(index + 0x51ed2701ULL)));
  Sample s;
  s.tokens.resize(spec.n);
  if (spec.kind == TaskKind::windowed_majority) {
    for (int& t : s.tokens) t = rng.bernoulli(0.5) ? 1 : 0;
    s.label = majority_label(s.tokens, spec.decay);
    if (spec.noise > 0.0 && rng.bernoulli(spec.noise)) s.label = 1 - s.label;
    return s;
  }
  const std::size_t pairs = (spec.n - 1) / 2;
  std::vector<int> keys(pairs);
  if (pairs <= spec.key_vocab) {
    // Partial Fisher-Yates: distinct keys.
    std::vector<int> pool(spec.key_vocab);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < pairs; ++i) {
      const std::size_t j = i + rng.below(spec.key_vocab - i);
      std::swap(pool[i], pool[j]);
      keys[i] = pool[i];
    }
  } else {
    for (int& k : keys) k = static_cast<int>(rng.below(spec.key_vocab));
  }
  std::vector<int> values(pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    values[i] = static_cast<int>(rng.below(spec.value_vocab));
    s.tokens[2 * i] = keys[i];
    s.tokens[2 * i + 1] = static_cast<int>(spec.key_vocab) + values[i];
  }
  const int query = keys[rng.below(pairs)];
  s.tokens[spec.n - 1] = query;
  for (std::size_t i = 0; i < pairs; ++i)
    if (keys[i] == query) s.label = values[i];
  if (spec.noise > 0.0 && rng.bernoulli(spec.noise)) {
    s.label = static_cast<int>((static_cast<std::size_t>(s.label) + 1 + rng.below(spec.value_vocab - 1)) %
                               spec.value_vocab);
  }
  return s;
}

std::vector<Sample> generate_task(const TaskSpec& spec, std::size_t count, std::uint64_t first_index) {
  if (count == 0) throw ConfigError("generate_task needs count >= 1");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, first_index + i));
  return out;
}

TaskSpec eval_split(const TaskSpec& spec) {
  TaskSpec e = spec;
  e.seed = spec.seed + kEvalSeedOffset;
  return e;
}

}  // namespace mega
