#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "eve/tensor.hpp"

namespace eve {

enum class FfnMode : std::uint8_t { Shared, Hard, Soft };

const char* ffn_mode_name(FfnMode m);

struct LayerSpec {
  FfnMode mode = FfnMode::Shared;
  int experts = 1;  // Hard: always 2; Soft: config experts; Shared: 1
  int top_k = 1;
};

// Full run configuration. Serialized as flat `key = value` lines; every field
// here has a key of the same name (see parse_config).
struct ModelConfig {
  // data
  int image_size = 64;
  int patch = 8;
  int max_tokens = 16;
  int grid = 2;
  bool relation_captions = true;
  bool flip_augment = true;
  bool crop_augment = false;
  int corpus_count = 2000;
  // First sample index of the corpus. Disjoint index ranges give disjoint
  // data: held-out evaluation splits start at a far-away base index.
  std::int64_t corpus_start = 0;

  // model
  int dim = 64;
  int heads = 4;
  int depth = 4;
  int ffn_mult = 4;
  std::string layers = "1-3:hard,4:soft";  // per-layer FFN mode bands, 1-based
  int experts = 4;   // expert count for soft layers
  int top_k = 2;     // top-k for soft layers
  int dec_dim = 32;
  int dec_depth = 2;

  // objectives
  double mask_ratio_img = 0.75;
  double mask_ratio_txt = 0.5;
  bool simultaneous_masking = false;
  bool enable_itc = false;
  bool enable_itm = false;
  double aux_alpha = 0.001;
  bool modality_bias = true;         // apply b_m inside soft routers
  bool normalize_pix_targets = false;

  // training
  int batch = 32;
  int steps = 2000;
  int warmup = 100;
  double peak_lr = 1e-3;
  double floor_lr = 0.0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;          // 0 = only at the end
  int router_stats_every = 50;
  int log_every = 100;               // console cadence; the metrics file gets every step
  bool deterministic = true;
  int threads = 1;
  std::string dtype = "f32";         // f32 | f64

  // ---- derived helpers ----
  int patches_per_image() const { return (image_size / patch) * (image_size / patch); }
  int patch_dim() const { return patch * patch * 3; }
  DType compute_dtype() const;
  std::vector<LayerSpec> layer_specs() const;  // parsed from `layers`
};

// Parses `key = value` lines ('#' comments, blank lines ignored). Unknown
// keys and malformed values throw with the offending line.
ModelConfig parse_config_text(const std::string& text);
ModelConfig load_config(const std::string& path);
void apply_override(ModelConfig& cfg, const std::string& key, const std::string& value);

// Canonical serialization: every key, fixed order, round-trips exactly.
std::string config_to_text(const ModelConfig& cfg);

// Digest over the architecture- and objective-defining subset: two configs
// with equal digests produce checkpoint-compatible models.
std::uint64_t config_digest(const ModelConfig& cfg);

// Throws std::invalid_argument describing the first violated constraint.
void validate(const ModelConfig& cfg);

}  // namespace eve
