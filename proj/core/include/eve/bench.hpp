#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eve/config.hpp"

namespace eve {

// Throughput benchmark over task sets that extend the masked-signal step with
// the retrieval heads ("msm", "msm+itc", "msm+itm", "msm+itc+itm"). Every
// task runs full optimization steps (batch assembly, forward, backward, clip,
// update) at the same batch size; warmup steps are excluded from timing.
// Deterministic mode is forced off for the duration of the run (and restored
// afterwards): wall-clock numbers should reflect the fast kernel paths.

struct BenchOptions {
  int steps = 20;   // measured steps per task
  int warmup = 3;   // untimed steps before measurement
  std::vector<std::string> tasks = {"msm", "msm+itc", "msm+itm", "msm+itc+itm"};
};

struct BenchTask {
  std::string name;
  double steps_per_sec = 0.0;
  double tokens_per_sec = 0.0;
  double mean_step_ms = 0.0;
  std::int64_t tokens_per_step = 0;
  // steps/sec of the plain "msm" task divided by this task's steps/sec, i.e.
  // the slowdown factor from the extra heads; 0 when no "msm" task was run.
  double ratio_vs_msm = 0.0;
};

struct BenchReport {
  std::vector<BenchTask> tasks;
  int threads = 1;                   // worker threads the kernels were allowed
  std::int64_t peak_bytes = 0;       // high-water tensor memory across all tasks
  bool short_run_warning = false;    // fewer than 100 measured steps per task
  std::string note;                  // interpretation caveats, fixed text
};

BenchReport run_bench(const ModelConfig& cfg, const BenchOptions& opt);

}  // namespace eve
