#pragma once

#include <string>
#include <utility>
#include <vector>

#include "eve/config.hpp"
#include "eve/trainer.hpp"

namespace eve {

// Ablation sweep: a cartesian grid of config overrides, one full training run
// per combination, each in its own subdirectory of out_dir with the resolved
// config written next to its logs.
//
// Grid syntax: "key=v1|v2;key2=w1|w2|w3" — axes separated by ';', values by
// '|'; every key must be a config key accepted by apply_override.

struct SweepOptions {
  std::string grid;
  std::string out_dir = "sweep";
  bool quiet = true;
};

using OverrideSet = std::vector<std::pair<std::string, std::string>>;

struct SweepRun {
  int index = 0;
  OverrideSet overrides;
  std::string dir;
  TrainSummary summary;
};

struct SweepReport {
  std::vector<SweepRun> runs;
};

// Expands the grid into the cartesian product of override sets, first axis
// outermost, values in the order written.
std::vector<OverrideSet> parse_grid(const std::string& grid);

// Runs the grid and writes a sweep.json summary into out_dir.
SweepReport run_sweep(const ModelConfig& base, const SweepOptions& opt);

}  // namespace eve
