#pragma once

#include <string>

#include "mega/config.h"
#include "mega/model.h"

// File layout: a text header
//   mega-checkpoint <version>
//   config <run config JSON on one line>
//   param <name> <dtype> <shape>      (one per tensor, in visit order)
//   <blank line>
// followed by every tensor's values as little-endian IEEE-754 doubles in
// manifest order.
namespace mega {

inline constexpr int kCheckpointVersion = 1;

void checkpoint_save(const ModelParams& params, const RunConfig& config, const std::string& path);

struct LoadedCheckpoint {
  RunConfig config;
  ModelParams params;
};

LoadedCheckpoint checkpoint_load(const std::string& path);
// Also checks every manifest shape against the shapes `expected` implies.
LoadedCheckpoint checkpoint_load(const std::string& path, const RunConfig& expected);

}  // namespace mega
