#include "mega/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace mega {

namespace {

struct ManifestEntry {
  std::string name;
  std::string dtype;
  std::string shape;
};

std::vector<std::pair<std::string, Shape>> layout(const ModelParams& p) {
  std::vector<std::pair<std::string, Shape>> out;
  p.visit([&](const std::string& name, const Tensor& t, bool) { out.emplace_back(name, t.shape()); });
  return out;
}

ModelParams skeleton(const RunConfig& cfg) {
  SeedState rng(0);
  return ModelParams::init(cfg.model_config(), rng);
}

void put_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

void check_layout(const std::vector<ManifestEntry>& manifest, const std::vector<std::pair<std::string, Shape>>& want,
                  const char* against) {
  for (std::size_t i = 0; i < std::min(manifest.size(), want.size()); ++i) {
    if (manifest[i].name != want[i].first) {
      throw CheckpointShapeError("checkpoint parameter #" + std::to_string(i) + " is '" + manifest[i].name + "', " +
                                 against + " expects '" + want[i].first + "'");
    }
    if (manifest[i].shape != to_string(want[i].second)) {
      throw CheckpointShapeError("parameter '" + manifest[i].name + "' has shape " + manifest[i].shape +
                                 " in the checkpoint, " + against + " expects " + to_string(want[i].second));
    }
  }
  if (manifest.size() != want.size()) {
    throw CheckpointShapeError("checkpoint lists " + std::to_string(manifest.size()) + " parameters, " + against +
                               " expects " + std::to_string(want.size()));
  }
}

}  // namespace

void checkpoint_save(const ModelParams& params, const RunConfig& config, const std::string& path) {
  std::string out = "mega-checkpoint " + std::to_string(kCheckpointVersion) + "\n";
  out += "config " + to_json(config) + "\n";
  params.visit([&](const std::string& name, const Tensor& t, bool) {
    out += "param " + name + " f64 " + to_string(t.shape()) + "\n";
  });
  out += "\n";
  params.visit([&](const std::string&, const Tensor& t, bool) {
    for (double v : t.data()) put_le(out, v);
  });
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing '" + path + "'");
}

namespace {

LoadedCheckpoint load_impl(const std::string& path, const RunConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();

  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw CheckpointTruncatedError("checkpoint header is truncated");
    line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
  };

  std::string line;
  next_line(line);
  const std::string magic = "mega-checkpoint ";
  if (line.rfind(magic, 0) != 0) throw CheckpointError("'" + path + "' is not a checkpoint");
  if (line.substr(magic.size()) != std::to_string(kCheckpointVersion)) {
    throw CheckpointVersionError("checkpoint version " + line.substr(magic.size()) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  next_line(line);
  if (line.rfind("config ", 0) != 0) throw CheckpointError("checkpoint header lacks a config line");
  LoadedCheckpoint lc;
  try {
    lc.config = parse_run_config(line.substr(7));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  std::vector<ManifestEntry> manifest;
  for (;;) {
    next_line(line);
    if (line.empty()) break;
    std::istringstream ls(line);
    std::string tag;
    ManifestEntry e;
    if (!(ls >> tag >> e.name >> e.dtype >> e.shape) || tag != "param") {
      throw CheckpointError("malformed manifest line '" + line + "'");
    }
    if (e.dtype != "f64") throw CheckpointError("unsupported dtype '" + e.dtype + "' for " + e.name);
    manifest.push_back(e);
  }

  if (expected) check_layout(manifest, layout(skeleton(*expected)), "the given config");
  lc.params = skeleton(lc.config);
  check_layout(manifest, layout(lc.params), "its own config");

  std::size_t total = 0;
  lc.params.visit([&](const std::string&, const Tensor& t, bool) { total += t.size(); });
  const std::size_t have = bytes.size() - pos;
  if (have < total * 8) {
    throw CheckpointTruncatedError("checkpoint payload has " + std::to_string(have) + " bytes, expected " +
                                   std::to_string(total * 8));
  }
  if (have > total * 8) throw CheckpointError("checkpoint has " + std::to_string(have - total * 8) + " trailing bytes");
  const char* p = bytes.data() + pos;
  lc.params.visit([&](const std::string&, Tensor& t, bool) {
    for (double& v : t.data()) {
      v = get_le(p);
      p += 8;
    }
  });
  return lc;
}

}  // namespace

LoadedCheckpoint checkpoint_load(const std::string& path) { return load_impl(path, nullptr); }

LoadedCheckpoint checkpoint_load(const std::string& path, const RunConfig& expected) {
  return load_impl(path, &expected);
}

}  // namespace mega
