#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eve/config.hpp"
#include "eve/model.hpp"
#include "eve/objectives.hpp"
#include "eve/optim.hpp"
#include "eve/shapeworld.hpp"

namespace eve {

// Everything logged for one optimization step.
struct StepRecord {
  std::int64_t step = 0;
  double mlm = 0.0;
  double mim = 0.0;
  double itc = 0.0;
  double itm = 0.0;
  double aux = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double tokens_per_sec = 0.0;
  std::vector<LayerRouting> routing;
};

struct TrainOptions {
  std::string out_dir = "run";  // metrics.jsonl, router_stats.jsonl, checkpoints
  std::string resume;           // checkpoint to continue from (strict load)
  // Checkpoint to initialize weights from before step 1 (tolerant load: only
  // parameters whose names match are copied, so a fine-tune config may add
  // heads the pre-trained trunk lacks). Mutually exclusive with resume; the
  // optimizer and schedule still start fresh.
  std::string init;
  bool quiet = false;
  // Pre-training by default; "contrastive" fine-tunes the retrieval heads
  // (no masking) and requires enable_itc and enable_itm.
  std::string objective = "pretrain";
  // Stop this invocation after N steps even if the schedule has more (0 =
  // run to cfg.steps). The final checkpoint then records the reached step,
  // so a later resume continues exactly where this run stopped.
  int stop_after = 0;
  // Test hook: called after every step. Optional.
  std::function<void(const StepRecord&)> on_step;
};

struct TrainSummary {
  std::int64_t final_step = 0;
  int steps_run = 0;
  double final_total = 0.0;
  double final_mlm = 0.0;
  double final_mim = 0.0;
  double mean_tokens_per_sec = 0.0;
  std::string final_checkpoint;
};

// Deterministic training driver: builds the corpus, model and optimizer from
// the config, runs cfg.steps optimization steps (resuming transparently if
// asked), streams metrics and router statistics as JSON lines into out_dir,
// and checkpoints at the configured cadence plus once at the end.
TrainSummary train(const ModelConfig& cfg, const TrainOptions& opt);

// The deterministic data pipeline, shared with evaluation tooling: sample
// indices, flip augmentation and batch assembly for one step. Exposed so
// tests can assert resume-equals-uninterrupted behaviour at the data level.
std::vector<std::int64_t> batch_indices(const ModelConfig& cfg, std::int64_t step);
shapeworld::Batch assemble_batch(const ModelConfig& cfg, const shapeworld::Vocab& vocab,
                                 const std::vector<shapeworld::Sample>& corpus,
                                 std::int64_t step);

// Builds the training corpus for a config (pure function of the config).
std::vector<shapeworld::Sample> build_corpus(const ModelConfig& cfg,
                                             const shapeworld::Vocab& vocab);

// The sample-generator options a config implies (image size, caption grammar,
// grid). `start_index` offsets the deterministic sample index space; disjoint
// ranges give disjoint data splits.
shapeworld::CorpusOptions corpus_options(const ModelConfig& cfg, std::int64_t start_index = 0);

// Encoder token positions processed per optimization step (all passes of the
// objective), the numerator of the tokens-per-second throughput metric.
std::int64_t step_token_count(const ModelConfig& cfg, bool finetune);

// Held-out pairs occupy an index range far beyond any training index.
inline constexpr std::int64_t kHeldOutIndexBase = 1'000'000;

}  // namespace eve
