#include "eve/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace eve {

const char* ffn_mode_name(FfnMode m) {
  switch (m) {
    case FfnMode::Shared: return "shared";
    case FfnMode::Hard: return "hard";
    case FfnMode::Soft: return "soft";
  }
  return "?";
}

DType ModelConfig::compute_dtype() const {
  if (dtype == "f32") return DType::F32;
  if (dtype == "f64") return DType::F64;
  throw std::invalid_argument("config: dtype must be f32 or f64, got '" + dtype + "'");
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

FfnMode mode_from_name(const std::string& name) {
  if (name == "shared") return FfnMode::Shared;
  if (name == "hard") return FfnMode::Hard;
  if (name == "soft") return FfnMode::Soft;
  throw std::invalid_argument("config: unknown FFN mode '" + name +
                              "' (expected shared|hard|soft)");
}

}  // namespace

std::vector<LayerSpec> ModelConfig::layer_specs() const {
  // Band syntax: "1-3:hard,4:soft" or "all:shared"; 1-based inclusive ranges
  // that must cover every layer exactly once.
  if (depth == 0) return {};  // no blocks: the encoder is the identity
  std::vector<LayerSpec> specs(static_cast<std::size_t>(depth));
  std::vector<bool> covered(static_cast<std::size_t>(depth), false);
  std::stringstream bands(layers);
  std::string band;
  while (std::getline(bands, band, ',')) {
    band = trim(band);
    if (band.empty()) continue;
    std::size_t colon = band.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("config: layer band '" + band + "' missing ':mode'");
    }
    std::string range = trim(band.substr(0, colon));
    FfnMode mode = mode_from_name(trim(band.substr(colon + 1)));
    int lo = 1, hi = depth;
    if (range != "all") {
      std::size_t dash = range.find('-');
      try {
        if (dash == std::string::npos) {
          lo = hi = std::stoi(range);
        } else {
          lo = std::stoi(range.substr(0, dash));
          hi = std::stoi(range.substr(dash + 1));
        }
      } catch (const std::exception&) {
        throw std::invalid_argument("config: bad layer range '" + range + "'");
      }
    }
    if (lo < 1 || hi > depth || lo > hi) {
      throw std::invalid_argument("config: layer range '" + range + "' outside 1-" +
                                  std::to_string(depth));
    }
    for (int i = lo; i <= hi; ++i) {
      auto idx = static_cast<std::size_t>(i - 1);
      if (covered[idx]) {
        throw std::invalid_argument("config: layer " + std::to_string(i) +
                                    " assigned twice in '" + layers + "'");
      }
      covered[idx] = true;
      LayerSpec& s = specs[idx];
      s.mode = mode;
      switch (mode) {
        case FfnMode::Shared: s.experts = 1; s.top_k = 1; break;
        case FfnMode::Hard: s.experts = 2; s.top_k = 1; break;
        case FfnMode::Soft: s.experts = experts; s.top_k = top_k; break;
      }
    }
  }
  for (int i = 0; i < depth; ++i) {
    if (!covered[static_cast<std::size_t>(i)]) {
      throw std::invalid_argument("config: layer " + std::to_string(i + 1) +
                                  " not covered by '" + layers + "'");
    }
  }
  return specs;
}

namespace {

struct Field {
  const char* key;
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string&)> set;
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    int r = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    std::uint64_t r = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" +
                                v + "'");
  }
}

std::int64_t parse_i64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    std::int64_t r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

#define INT_FIELD(name) \
  {#name, [](const ModelConfig& c) { return std::to_string(c.name);}, \
   [](ModelConfig& c, const std::string& v) { c.name = parse_int(#name, v); }}
#define DBL_FIELD(name) \
  {#name, [](const ModelConfig& c) { return fmt_double(c.name); }, \
   [](ModelConfig& c, const std::string& v) { c.name = parse_double(#name, v); }}
#define BOOL_FIELD(name) \
  {#name, [](const ModelConfig& c) { return std::string(c.name ? "true" : "false"); }, \
   [](ModelConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }}
#define STR_FIELD(name) \
  {#name, [](const ModelConfig& c) { return c.name; }, \
   [](ModelConfig& c, const std::string& v) { c.name = v; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> kFields = {
      INT_FIELD(image_size), INT_FIELD(patch), INT_FIELD(max_tokens), INT_FIELD(grid),
      BOOL_FIELD(relation_captions), BOOL_FIELD(flip_augment), BOOL_FIELD(crop_augment),
      INT_FIELD(corpus_count),
      {"corpus_start", [](const ModelConfig& c) { return std::to_string(c.corpus_start); },
       [](ModelConfig& c, const std::string& v) { c.corpus_start = parse_i64("corpus_start", v); }},
      INT_FIELD(dim), INT_FIELD(heads), INT_FIELD(depth), INT_FIELD(ffn_mult),
      STR_FIELD(layers), INT_FIELD(experts), INT_FIELD(top_k),
      INT_FIELD(dec_dim), INT_FIELD(dec_depth),
      DBL_FIELD(mask_ratio_img), DBL_FIELD(mask_ratio_txt), BOOL_FIELD(simultaneous_masking),
      BOOL_FIELD(enable_itc), BOOL_FIELD(enable_itm),
      DBL_FIELD(aux_alpha), BOOL_FIELD(modality_bias), BOOL_FIELD(normalize_pix_targets),
      INT_FIELD(batch), INT_FIELD(steps), INT_FIELD(warmup),
      DBL_FIELD(peak_lr), DBL_FIELD(floor_lr), DBL_FIELD(weight_decay),
      DBL_FIELD(beta1), DBL_FIELD(beta2), DBL_FIELD(adam_eps), DBL_FIELD(clip_norm),
      {"seed", [](const ModelConfig& c) { return std::to_string(c.seed); },
       [](ModelConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }},
      INT_FIELD(checkpoint_every), INT_FIELD(router_stats_every), INT_FIELD(log_every),
      BOOL_FIELD(deterministic), INT_FIELD(threads), STR_FIELD(dtype),
  };
  return kFields;
}

#undef INT_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD
#undef STR_FIELD

}  // namespace

void apply_override(ModelConfig& cfg, const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

ModelConfig parse_config_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not 'key = value': '" + line + "'");
    }
    apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str());
}

std::string config_to_text(const ModelConfig& cfg) {
  std::ostringstream os;
  for (const Field& f : fields()) os << f.key << " = " << f.get(cfg) << "\n";
  return os.str();
}

std::uint64_t config_digest(const ModelConfig& cfg) {
  // Architecture- and objective-defining keys only: training-schedule knobs
  // (steps, lr, logging cadence, threads) do not affect model shape.
  static const char* kArchKeys[] = {
      "image_size", "patch", "max_tokens", "grid",
      "dim", "heads", "depth", "ffn_mult", "layers", "experts", "top_k",
      "dec_dim", "dec_depth", "enable_itc", "enable_itm", "modality_bias", "dtype",
  };
  std::string canon;
  for (const char* key : kArchKeys) {
    for (const Field& f : fields()) {
      if (std::string(key) == f.key) {
        canon += key;
        canon += '=';
        canon += f.get(cfg);
        canon += ';';
      }
    }
  }
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (unsigned char c : canon) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void validate(const ModelConfig& cfg) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (cfg.image_size <= 0 || cfg.patch <= 0 || cfg.image_size % cfg.patch != 0) {
    fail("image_size " + std::to_string(cfg.image_size) + " must be divisible by patch " +
         std::to_string(cfg.patch));
  }
  if (cfg.max_tokens < 1) fail("max_tokens must be >= 1");
  if (cfg.grid < 1) fail("grid must be >= 1");
  if (cfg.dim <= 0 || cfg.heads <= 0 || cfg.dim % cfg.heads != 0) {
    fail("dim " + std::to_string(cfg.dim) + " must be divisible by heads " +
         std::to_string(cfg.heads));
  }
  if (cfg.depth < 0) fail("depth must be >= 0");
  if (cfg.ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (cfg.experts < 1) fail("experts must be >= 1");
  if (cfg.top_k < 1 || cfg.top_k > cfg.experts) {
    fail("top_k " + std::to_string(cfg.top_k) + " must lie in [1, experts=" +
         std::to_string(cfg.experts) + "]");
  }
  if (cfg.depth > 0) cfg.layer_specs();  // throws on bad band syntax/coverage
  if (cfg.dec_dim <= 0) fail("dec_dim must be positive");
  if (cfg.dec_dim % cfg.heads != 0) {
    // the decoder blocks reuse the encoder's head count
    fail("dec_dim " + std::to_string(cfg.dec_dim) + " must be divisible by heads " +
         std::to_string(cfg.heads));
  }
  if (cfg.dec_depth < 0) fail("dec_depth must be >= 0");
  if (!(cfg.mask_ratio_img > 0.0 && cfg.mask_ratio_img < 1.0)) {
    fail("mask_ratio_img must lie in (0,1)");
  }
  if (!(cfg.mask_ratio_txt > 0.0 && cfg.mask_ratio_txt < 1.0)) {
    fail("mask_ratio_txt must lie in (0,1)");
  }
  if (cfg.aux_alpha < 0) fail("aux_alpha must be >= 0");
  if (cfg.batch < 1) fail("batch must be >= 1");
  if (cfg.steps < 1) fail("steps must be >= 1");
  if (cfg.warmup < 0 || cfg.warmup >= cfg.steps) {
    fail("warmup " + std::to_string(cfg.warmup) + " must lie in [0, steps)");
  }
  if (cfg.peak_lr <= 0) fail("peak_lr must be positive");
  if (cfg.floor_lr < 0 || cfg.floor_lr > cfg.peak_lr) fail("floor_lr must lie in [0, peak_lr]");
  if (cfg.weight_decay < 0) fail("weight_decay must be >= 0");
  if (!(cfg.beta1 >= 0 && cfg.beta1 < 1)) fail("beta1 must lie in [0,1)");
  if (!(cfg.beta2 >= 0 && cfg.beta2 < 1)) fail("beta2 must lie in [0,1)");
  if (cfg.adam_eps <= 0) fail("adam_eps must be positive");
  if (cfg.clip_norm < 0) fail("clip_norm must be >= 0 (0 disables clipping)");
  if (cfg.corpus_count < 1) fail("corpus_count must be >= 1");
  if (cfg.corpus_start < 0) fail("corpus_start must be >= 0");
  if (cfg.threads < 1) fail("threads must be >= 1");
  if (cfg.crop_augment && cfg.relation_captions) {
    fail("crop_augment requires relation_captions = false: cropping can move objects "
         "across cells and falsify spatial relations");
  }
  cfg.compute_dtype();  // validates the dtype string
}

}  // namespace eve
