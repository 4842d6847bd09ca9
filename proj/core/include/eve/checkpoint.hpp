#pragma once

#include <cstdint>
#include <string>

#include "eve/model.hpp"
#include "eve/optim.hpp"

namespace eve {

// Binary checkpoint ("EVEK"): header with format version, config digest and
// the canonical config text, the step counter and the seed, then every
// parameter by name in registry order, then (optionally) the optimizer
// moments. All integers little-endian; floats as raw IEEE bit patterns, so a
// save/load/save cycle is byte-identical.
struct CheckpointMeta {
  std::uint32_t version = 0;
  std::uint64_t digest = 0;
  std::string config_text;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  bool has_optimizer = false;
};

void save_checkpoint(const std::string& path, const EveModel& m, const AdamW* opt,
                     std::int64_t step);

// Metadata only; tensor payloads are skipped, not loaded.
CheckpointMeta read_checkpoint_meta(const std::string& path);

// Strict load (allow_missing=false): the stored digest must equal the
// model's, every parameter must be present with matching shape/dtype, and
// `opt`, when given, is restored too. Tolerant load (allow_missing=true):
// loads the by-name intersection (for attaching fresh heads to a pre-trained
// trunk), ignores the digest, converts across float widths, and refuses
// optimizer restoration.
CheckpointMeta load_checkpoint(const std::string& path, EveModel& m, AdamW* opt,
                               bool allow_missing = false);

}  // namespace eve
