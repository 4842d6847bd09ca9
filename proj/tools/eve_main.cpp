// eve: command-line front end for the multimodal mixture-of-experts trainer.
//
// Commands: data gen, train, gradcheck, router-stats, probe, bench, sweep.
// Every command prints a JSON report to stdout and is a pure function of its
// flags, config and seed when deterministic mode is on (the default).
//
// Exit codes: 0 success; 1 operation failure (failed gradient check, aborted
// run, unreadable inputs); 2 usage error (bad flags or config values).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "eve/bench.hpp"
#include "eve/checkpoint.hpp"
#include "eve/config.hpp"
#include "eve/encoder.hpp"
#include "eve/gradcheck.hpp"
#include "eve/model.hpp"
#include "eve/objectives.hpp"
#include "eve/probes.hpp"
#include "eve/runtime.hpp"
#include "eve/shapeworld.hpp"
#include "eve/sweep.hpp"
#include "eve/trainer.hpp"
#include "json.hpp"

namespace {

using nlohmann::json;
using namespace eve;

constexpr int kExitOk = 0;
constexpr int kExitFail = 1;
constexpr int kExitUsage = 2;

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) out.push_back(trim(part));
  return out;
}

// Prints the report and optionally mirrors it to a file.
void emit(const json& j, const std::string& path) {
  std::cout << j.dump(2) << "\n";
  if (!path.empty()) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write report to '" + path + "'");
    os << j.dump(2) << "\n";
  }
}

// Config resolution shared by the commands that build a model from flags:
// file < --seed/--layers/--ffn shortcuts < --set overrides, then validation.
struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  std::string layers;
  std::string ffn;
  std::uint64_t seed = 0;
  CLI::Option* o_layers = nullptr;
  CLI::Option* o_ffn = nullptr;
  CLI::Option* o_seed = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", path, "configuration file (key = value lines)")
        ->check(CLI::ExistingFile);
    o_seed = cmd->add_option("--seed", seed, "run seed (overrides the config)");
    o_layers = cmd->add_option("--layers", layers,
                               "per-layer FFN bands, e.g. '1-10:hard,11-12:soft'");
    o_ffn = cmd->add_option("--ffn", ffn, "alias for --layers, e.g. 'all:shared'");
    cmd->add_option("--set", overrides, "extra 'key=value' config overrides")
        ->take_all();
  }

  ModelConfig resolve() const {
    ModelConfig cfg = path.empty() ? ModelConfig{} : load_config(path);
    if (o_seed && o_seed->count() > 0) cfg.seed = seed;
    if (o_layers && o_layers->count() > 0) cfg.layers = layers;
    if (o_ffn && o_ffn->count() > 0) cfg.layers = ffn;
    for (const std::string& kv : overrides) {
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      }
      apply_override(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    validate(cfg);
    return cfg;
  }
};

struct LoadedModel {
  ModelConfig cfg;
  CheckpointMeta meta;
  EveModel model;
};

// Rebuilds the model a checkpoint describes (the config is embedded in the
// file) and strict-loads its weights.
LoadedModel load_model(const std::string& ckpt) {
  const CheckpointMeta meta = read_checkpoint_meta(ckpt);
  ModelConfig cfg = parse_config_text(meta.config_text);
  validate(cfg);
  runtime::set_deterministic(cfg.deterministic);
  runtime::set_threads(cfg.threads);
  shapeworld::Vocab vocab;
  LoadedModel lm{cfg, meta, EveModel(cfg, vocab.size(), cfg.seed)};
  load_checkpoint(ckpt, lm.model, /*opt=*/nullptr);
  return lm;
}

double finite_or(double v, double fallback) { return std::isinf(v) ? fallback : v; }

// ---------------------------------------------------------------------------
// data gen
// ---------------------------------------------------------------------------

struct DataGenArgs {
  int count = 2000;
  int size = 64;
  int max_tokens = 16;
  int grid = 2;
  std::uint64_t seed = 1;
  std::int64_t start = 0;
  bool no_relations = false;
  std::string out;
};

int run_data_gen(const DataGenArgs& a) {
  shapeworld::CorpusOptions opt;
  opt.image_size = a.size;
  opt.max_tokens = a.max_tokens;
  opt.allow_relations = !a.no_relations;
  opt.start_index = a.start;
  opt.grid = a.grid;
  const shapeworld::Corpus corpus = shapeworld::generate_corpus(a.count, a.seed, opt);
  shapeworld::save_corpus(corpus, a.out);

  json j;
  j["count"] = a.count;
  j["image_size"] = a.size;
  j["max_tokens"] = a.max_tokens;
  j["grid"] = a.grid;
  j["relations"] = !a.no_relations;
  j["seed"] = a.seed;
  j["start_index"] = a.start;
  j["out"] = a.out;
  j["bytes"] = static_cast<std::int64_t>(std::filesystem::file_size(a.out));
  emit(j, "");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  ConfigArgs cfg;
  std::string out = "run";
  std::string resume;
  std::string init;
  std::string objective = "pretrain";
  int stop_after = 0;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  const ModelConfig cfg = a.cfg.resolve();
  TrainOptions topt;
  topt.out_dir = a.out;
  topt.resume = a.resume;
  topt.init = a.init;
  topt.objective = a.objective;
  topt.stop_after = a.stop_after;
  topt.quiet = a.quiet;
  const TrainSummary s = train(cfg, topt);

  json j;
  j["objective"] = a.objective;
  j["final_step"] = s.final_step;
  j["steps_run"] = s.steps_run;
  j["final_total"] = s.final_total;
  j["final_mlm"] = s.final_mlm;
  j["final_mim"] = s.final_mim;
  j["mean_tokens_per_sec"] = s.mean_tokens_per_sec;
  j["final_checkpoint"] = s.final_checkpoint;
  j["out_dir"] = a.out;
  emit(j, a.out + "/summary.json");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
  ConfigArgs cfg;
  std::string init;
  int batch = 2;
  std::int64_t max_per_param = 2;
  double tol = 1e-4;
  double h = 1e-5;
  double margin = 1e-3;
  int attempts = 10;
  std::string report;
};

int run_gradcheck(const GradcheckArgs& a) {
  ModelConfig cfg = a.cfg.resolve();
  // Finite differences need 64-bit precision and a bitwise-stable forward.
  cfg.dtype = "f64";
  cfg.deterministic = true;
  cfg.threads = 1;
  cfg.batch = a.batch;
  // Gradient checking needs data variety, not corpus coverage.
  cfg.corpus_count = std::min(cfg.corpus_count, std::max(cfg.batch * 4, 8));
  validate(cfg);
  runtime::set_deterministic(true);
  runtime::set_threads(1);

  shapeworld::Vocab vocab;
  EveModel model(cfg, vocab.size(), cfg.seed);
  // A freshly initialized router is nearly uniform, so top-k margins start
  // tiny; checking at a trained operating point gives honest non-tie points.
  if (!a.init.empty()) load_checkpoint(a.init, model, /*opt=*/nullptr, /*allow_missing=*/true);
  const std::vector<shapeworld::Sample> corpus = build_corpus(cfg, vocab);

  // Finite differences are invalid near a routing tie: an h-sized nudge can
  // flip the top-k set and the loss jumps. Redraw the evaluation point (a new
  // step index gives a new batch and mask plan) until every learned-router
  // layer clears the margin; running out of redraws is reported, not failed.
  shapeworld::Batch batch;
  MaskPlan plan;
  double margin = std::numeric_limits<double>::infinity();
  bool margin_ok = false;
  int tried = 0;
  for (int attempt = 0; attempt < std::max(a.attempts, 1); ++attempt) {
    const std::int64_t t = 1 + attempt;
    batch = assemble_batch(cfg, vocab, corpus, t);
    plan = sample_masks(cfg, batch, cfg.seed, t);
    const StepLosses probe = msm_step(model, batch, plan);
    margin = std::numeric_limits<double>::infinity();
    for (const LayerRouting& lr : probe.routing) margin = std::min(margin, lr.min_margin);
    ++tried;
    if (margin > a.margin) {
      margin_ok = true;
      break;
    }
  }

  std::vector<std::pair<std::string, Tensor>> plist;
  for (const Param& p : model.params()) plist.emplace_back(p.name, p.tensor);

  GradCheckOptions gopt;
  gopt.h = a.h;
  gopt.tol = a.tol;
  gopt.max_per_param = a.max_per_param;
  gopt.subsample_seed = cfg.seed;
  const GradCheckReport rep =
      check_gradients([&] { return msm_step(model, batch, plan).total; }, plist, gopt);

  json j;
  j["pass"] = rep.pass;
  j["tol"] = a.tol;
  j["max_rel_err"] = rep.max_rel_err;
  j["param_groups"] = plist.size();
  j["groups_checked"] = rep.entries.size();
  j["elements_checked"] = rep.checked;
  j["worst"] = {{"param", rep.worst_param},
                {"index", rep.worst_index},
                {"analytic", rep.worst_analytic},
                {"finite_difference", rep.worst_fd}};
  j["tie_margin"] = {{"threshold", a.margin},
                     {"achieved", finite_or(margin, 1.0)},
                     {"attempts", tried},
                     {"satisfied", margin_ok}};
  json entries = json::array();
  for (const GradCheckEntry& e : rep.entries) {
    entries.push_back({{"param", e.param},
                       {"checked", e.checked},
                       {"max_rel_err", e.max_rel_err},
                       {"worst_index", e.worst_index},
                       {"analytic", e.worst_analytic},
                       {"finite_difference", e.worst_fd}});
  }
  j["groups"] = entries;
  emit(j, a.report);
  return rep.pass ? kExitOk : kExitFail;
}

// ---------------------------------------------------------------------------
// router-stats
// ---------------------------------------------------------------------------

struct RouterStatsArgs {
  std::string checkpoint;
  int samples = 64;
  int batch = 16;
  std::string report;
};

int run_router_stats(const RouterStatsArgs& a) {
  if (a.samples < 1) throw std::invalid_argument("router-stats: --samples must be >= 1");
  if (a.batch < 1) throw std::invalid_argument("router-stats: --batch must be >= 1");
  LoadedModel lm = load_model(a.checkpoint);
  const ModelConfig& cfg = lm.cfg;

  bool any_soft = false;
  for (const LayerSpec& s : cfg.layer_specs()) any_soft |= s.mode == FfnMode::Soft;
  if (!any_soft) {
    throw std::invalid_argument(
        "router-stats: this model has no learned-router layers (every FFN is shared or "
        "hard-routed), so there are no routing statistics to report");
  }

  // Training-distribution samples, no masking, no augmentation: the natural
  // operating point of the router.
  shapeworld::Vocab vocab;
  const shapeworld::CorpusOptions copt = corpus_options(cfg, cfg.corpus_start);
  std::vector<shapeworld::Sample> samples;
  samples.reserve(static_cast<std::size_t>(a.samples));
  for (int i = 0; i < a.samples; ++i) {
    samples.push_back(shapeworld::make_sample(cfg.seed, cfg.corpus_start + i, copt, vocab));
  }

  struct Acc {
    int layer = -1;
    std::vector<double> f, p, f_img, f_txt;
    double aux = 0.0;
    double min_margin = std::numeric_limits<double>::infinity();
  };
  std::vector<Acc> accs;

  for (int from = 0; from < a.samples; from += a.batch) {
    const int b = std::min(a.batch, a.samples - from);
    std::vector<const shapeworld::Sample*> ptrs;
    for (int s = 0; s < b; ++s) ptrs.push_back(&samples[static_cast<std::size_t>(from + s)]);
    const shapeworld::Batch batch =
        shapeworld::make_batch(ptrs, cfg.image_size, cfg.image_size, cfg.max_tokens, cfg.patch);

    const int pdim = batch.P * batch.P * batch.C;
    Tensor patches = Tensor::from_floats({batch.B * batch.N, pdim}, batch.patches,
                                         cfg.compute_dtype());
    const SeqBatch fused = concat_seq(embed_image(lm.model, patches, b),
                                      embed_text(lm.model, batch.token_ids, b));
    const EncodeResult res = encoder_forward(lm.model, fused);

    const double w = static_cast<double>(b) / static_cast<double>(a.samples);
    for (const LayerRouting& lr : res.routing) {
      Acc* acc = nullptr;
      for (Acc& c : accs) {
        if (c.layer == lr.layer) acc = &c;
      }
      if (!acc) {
        accs.push_back(Acc{lr.layer,
                           std::vector<double>(lr.load.size(), 0.0),
                           std::vector<double>(lr.load.size(), 0.0),
                           std::vector<double>(lr.load.size(), 0.0),
                           std::vector<double>(lr.load.size(), 0.0), 0.0,
                           std::numeric_limits<double>::infinity()});
        acc = &accs.back();
      }
      for (std::size_t i = 0; i < lr.load.size(); ++i) {
        acc->f[i] += w * lr.load[i];
        acc->p[i] += w * lr.importance[i];
        acc->f_img[i] += w * lr.load_img[i];
        acc->f_txt[i] += w * lr.load_txt[i];
      }
      acc->aux += w * lr.aux;
      acc->min_margin = std::min(acc->min_margin, lr.min_margin);
    }
  }

  json layers = json::array();
  for (const Acc& acc : accs) {
    const std::size_t n = acc.f.size();
    double mean = 0.0;
    for (double v : acc.f) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : acc.f) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    // Coefficient of variation of the load distribution: 0 = perfectly
    // balanced, sqrt(N-1) = full collapse onto one expert.
    const double cv = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
    layers.push_back({{"layer", acc.layer},
                      {"f", acc.f},
                      {"p", acc.p},
                      {"f_img", acc.f_img},
                      {"f_txt", acc.f_txt},
                      {"aux", acc.aux},
                      {"min_margin", finite_or(acc.min_margin, 1.0)},
                      {"balance_cv", cv}});
  }

  json j;
  j["checkpoint"] = a.checkpoint;
  j["step"] = lm.meta.step;
  j["samples"] = a.samples;
  j["batch"] = a.batch;
  j["experts"] = cfg.experts;
  j["top_k"] = cfg.top_k;
  j["layers"] = layers;
  emit(j, a.report);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// probe grounding | retrieval
// ---------------------------------------------------------------------------

struct GroundingArgs {
  std::string checkpoint;
  int samples = 64;
  int batch = 16;
  std::int64_t index_base = kHeldOutIndexBase;
  std::string report;
};

int run_probe_grounding(const GroundingArgs& a) {
  LoadedModel lm = load_model(a.checkpoint);
  GroundingOptions opt;
  opt.samples = a.samples;
  opt.batch = a.batch;
  opt.index_base = a.index_base;
  const GroundingReport r = grounding_probe(lm.model, opt);

  shapeworld::Vocab vocab;
  json j;
  j["checkpoint"] = a.checkpoint;
  j["step"] = lm.meta.step;
  j["samples"] = r.samples;
  j["positions"] = r.positions;
  j["acc_true"] = r.acc_true;
  j["acc_blank"] = r.acc_blank;
  j["acc_shuffled"] = r.acc_shuffled;
  j["prior"] = r.prior;
  j["chance"] = 1.0 / static_cast<double>(vocab.color_ids().size());
  j["margin_vs_blank"] = r.acc_true - r.acc_blank;
  j["margin_vs_shuffled"] = r.acc_true - r.acc_shuffled;
  emit(j, a.report);
  return kExitOk;
}

struct RetrievalArgs {
  std::string checkpoint;
  int pairs = 256;
  int batch = 16;
  int shortlist = 8;
  std::int64_t index_base = kHeldOutIndexBase;
  std::string report;
};

int run_probe_retrieval(const RetrievalArgs& a) {
  LoadedModel lm = load_model(a.checkpoint);
  RetrievalOptions opt;
  opt.pairs = a.pairs;
  opt.batch = a.batch;
  opt.index_base = a.index_base;
  opt.shortlist = a.shortlist;
  const RetrievalReport r = retrieval_probe(lm.model, opt);

  json j;
  j["checkpoint"] = a.checkpoint;
  j["step"] = lm.meta.step;
  j["pairs"] = r.pairs;
  j["shortlist"] = a.shortlist;
  j["reranked"] = r.reranked;
  j["r1_i2t"] = r.r1_i2t;
  j["r5_i2t"] = r.r5_i2t;
  j["r1_t2i"] = r.r1_t2i;
  j["r5_t2i"] = r.r5_t2i;
  j["chance_r1"] = 1.0 / static_cast<double>(r.pairs);
  emit(j, a.report);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
  ConfigArgs cfg;
  int steps = 20;
  int warmup = 3;
  std::string tasks = "msm,msm+itc,msm+itm,msm+itc+itm";
  std::string csv;
  std::string report;
};

int run_bench_cmd(const BenchArgs& a) {
  const ModelConfig cfg = a.cfg.resolve();
  BenchOptions opt;
  opt.steps = a.steps;
  opt.warmup = a.warmup;
  opt.tasks = split(a.tasks, ',');
  const BenchReport rep = run_bench(cfg, opt);

  json tasks = json::array();
  for (const BenchTask& t : rep.tasks) {
    tasks.push_back({{"name", t.name},
                     {"steps_per_sec", t.steps_per_sec},
                     {"tokens_per_sec", t.tokens_per_sec},
                     {"mean_step_ms", t.mean_step_ms},
                     {"tokens_per_step", t.tokens_per_step},
                     {"ratio_vs_msm", t.ratio_vs_msm}});
  }
  json j;
  j["batch"] = cfg.batch;
  j["threads"] = rep.threads;
  j["deterministic"] = false;  // pinned off for the measurement
  j["steps"] = a.steps;
  j["warmup"] = a.warmup;
  j["peak_bytes"] = rep.peak_bytes;
  j["short_run_warning"] = rep.short_run_warning;
  j["note"] = rep.note;
  j["tasks"] = tasks;
  emit(j, a.report);

  if (!a.csv.empty()) {
    std::ofstream os(a.csv);
    if (!os) throw std::runtime_error("cannot write CSV to '" + a.csv + "'");
    os.precision(12);
    os << "name,steps_per_sec,tokens_per_sec,mean_step_ms,tokens_per_step,ratio_vs_msm\n";
    for (const BenchTask& t : rep.tasks) {
      os << t.name << ',' << t.steps_per_sec << ',' << t.tokens_per_sec << ','
         << t.mean_step_ms << ',' << t.tokens_per_step << ',' << t.ratio_vs_msm << "\n";
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepArgs {
  ConfigArgs cfg;
  std::string grid;
  std::string out = "sweep";
  std::string csv;
  bool verbose = false;
};

int run_sweep_cmd(const SweepArgs& a) {
  const ModelConfig cfg = a.cfg.resolve();
  SweepOptions opt;
  opt.grid = a.grid;
  opt.out_dir = a.out;
  opt.quiet = !a.verbose;
  const SweepReport rep = run_sweep(cfg, opt);

  json runs = json::array();
  for (const SweepRun& r : rep.runs) {
    json ov = json::object();
    for (const auto& [k, v] : r.overrides) ov[k] = v;
    runs.push_back({{"run", r.index},
                    {"dir", r.dir},
                    {"overrides", ov},
                    {"final_step", r.summary.final_step},
                    {"final_total", r.summary.final_total},
                    {"final_mlm", r.summary.final_mlm},
                    {"final_mim", r.summary.final_mim},
                    {"mean_tokens_per_sec", r.summary.mean_tokens_per_sec}});
  }
  json j;
  j["out_dir"] = a.out;
  j["runs"] = runs;
  emit(j, "");

  if (!a.csv.empty()) {
    std::ofstream os(a.csv);
    if (!os) throw std::runtime_error("cannot write CSV to '" + a.csv + "'");
    os.precision(12);
    os << "run,dir,overrides,final_step,final_total,final_mlm,final_mim,mean_tokens_per_sec\n";
    for (const SweepRun& r : rep.runs) {
      std::string ov;
      for (const auto& [k, v] : r.overrides) {
        if (!ov.empty()) ov += ' ';
        ov += k + "=" + v;
      }
      os << r.index << ',' << r.dir << ',' << ov << ',' << r.summary.final_step << ','
         << r.summary.final_total << ',' << r.summary.final_mlm << ',' << r.summary.final_mim
         << ',' << r.summary.mean_tokens_per_sec << "\n";
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"eve: deterministic multimodal mixture-of-experts trainer on synthetic "
               "shape scenes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "eve 0.1.0");
  int exit_code = kExitOk;

  // data gen
  auto* data = app.add_subcommand("data", "dataset utilities");
  data->require_subcommand(1);
  DataGenArgs dg;
  auto* gen = data->add_subcommand("gen", "generate an image-caption corpus file");
  gen->add_option("--count", dg.count, "number of pairs")->check(CLI::PositiveNumber);
  gen->add_option("--size", dg.size, "image height and width")->check(CLI::PositiveNumber);
  gen->add_option("--max-tokens", dg.max_tokens, "caption token capacity")
      ->check(CLI::PositiveNumber);
  gen->add_option("--grid", dg.grid, "scene grid side length")->check(CLI::PositiveNumber);
  gen->add_option("--seed", dg.seed, "corpus seed");
  gen->add_option("--start", dg.start, "first sample index (disjoint ranges = disjoint splits)")
      ->check(CLI::NonNegativeNumber);
  gen->add_flag("--no-relations", dg.no_relations, "single-object captions only");
  gen->add_option("--out", dg.out, "output corpus file")->required();
  gen->callback([&] { exit_code = run_data_gen(dg); });

  // train
  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "run pre-training or the contrastive fine-tune");
  ta.cfg.attach(tr);
  tr->add_option("--out", ta.out, "output directory (logs, checkpoints)");
  tr->add_option("--resume", ta.resume, "checkpoint to continue from (strict load)");
  tr->add_option("--init", ta.init,
                 "checkpoint to seed the weights from (tolerant load, fresh optimizer)");
  tr->add_option("--objective", ta.objective, "pretrain | contrastive")
      ->check(CLI::IsMember({"pretrain", "contrastive"}));
  tr->add_option("--stop-after", ta.stop_after,
                 "stop this invocation after N steps (0 = run the full schedule)")
      ->check(CLI::NonNegativeNumber);
  tr->add_flag("--quiet", ta.quiet, "suppress per-step console logging");
  tr->callback([&] { exit_code = run_train(ta); });

  // gradcheck
  GradcheckArgs ga;
  auto* gc = app.add_subcommand(
      "gradcheck", "compare reverse-mode gradients against central finite differences");
  ga.cfg.attach(gc);
  gc->add_option("--init", ga.init,
                 "checkpoint to take the weights from (tolerant load; a trained router has "
                 "clear top-k margins where a fresh one is near-uniform)");
  gc->add_option("--batch", ga.batch, "batch size for the checked step")
      ->check(CLI::PositiveNumber);
  gc->add_option("--max-per-param", ga.max_per_param,
                 "elements checked per parameter group (-1 = all)");
  gc->add_option("--tol", ga.tol, "max acceptable relative error")
      ->check(CLI::PositiveNumber);
  gc->add_option("--fd-step", ga.h, "central-difference step size")
      ->check(CLI::PositiveNumber);
  gc->add_option("--margin", ga.margin, "minimum top-k routing margin at the sample point")
      ->check(CLI::PositiveNumber);
  gc->add_option("--attempts", ga.attempts, "evaluation-point redraws before giving up")
      ->check(CLI::PositiveNumber);
  gc->add_option("--report", ga.report, "also write the JSON report to this file");
  gc->callback([&] { exit_code = run_gradcheck(ga); });

  // router-stats
  RouterStatsArgs ra;
  auto* rs = app.add_subcommand("router-stats",
                                "expert load, importance and balance for a checkpoint");
  rs->add_option("--checkpoint", ra.checkpoint, "trained model checkpoint")->required();
  rs->add_option("--samples", ra.samples, "evaluation samples")->check(CLI::PositiveNumber);
  rs->add_option("--batch", ra.batch, "evaluation batch size")->check(CLI::PositiveNumber);
  rs->add_option("--report", ra.report, "also write the JSON report to this file");
  rs->callback([&] { exit_code = run_router_stats(ra); });

  // probe grounding | retrieval
  auto* probe = app.add_subcommand("probe", "held-out evaluation probes");
  probe->require_subcommand(1);
  GroundingArgs pga;
  auto* pg = probe->add_subcommand(
      "grounding", "recover masked colour words with and without the paired image");
  pg->add_option("--checkpoint", pga.checkpoint, "trained model checkpoint")->required();
  pg->add_option("--samples", pga.samples, "held-out captions to probe")
      ->check(CLI::PositiveNumber);
  pg->add_option("--batch", pga.batch, "evaluation batch size")->check(CLI::PositiveNumber);
  pg->add_option("--index-base", pga.index_base, "first held-out sample index")
      ->check(CLI::NonNegativeNumber);
  pg->add_option("--report", pga.report, "also write the JSON report to this file");
  pg->callback([&] { exit_code = run_probe_grounding(pga); });

  RetrievalArgs pra;
  auto* pr = probe->add_subcommand(
      "retrieval", "rank held-out pairs by similarity, rerank with the matching head");
  pr->add_option("--checkpoint", pra.checkpoint, "trained model checkpoint")->required();
  pr->add_option("--pairs", pra.pairs, "held-out pair count")->check(CLI::PositiveNumber);
  pr->add_option("--batch", pra.batch, "unimodal encoding batch size")
      ->check(CLI::PositiveNumber);
  pr->add_option("--shortlist", pra.shortlist,
                 "rerank depth (0 = similarity ranking only, no matching head needed)")
      ->check(CLI::NonNegativeNumber);
  pr->add_option("--index-base", pra.index_base, "first held-out sample index")
      ->check(CLI::NonNegativeNumber);
  pr->add_option("--report", pra.report, "also write the JSON report to this file");
  pr->callback([&] { exit_code = run_probe_retrieval(pra); });

  // bench
  BenchArgs ba;
  auto* be = app.add_subcommand("bench", "full-step throughput across task sets");
  ba.cfg.attach(be);
  be->add_option("--steps", ba.steps, "measured steps per task")->check(CLI::PositiveNumber);
  be->add_option("--warmup", ba.warmup, "untimed steps before measurement")
      ->check(CLI::NonNegativeNumber);
  be->add_option("--tasks", ba.tasks, "comma-separated task sets, e.g. msm,msm+itc+itm");
  be->add_option("--csv", ba.csv, "also write per-task rows as CSV");
  be->add_option("--report", ba.report, "also write the JSON report to this file");
  be->callback([&] { exit_code = run_bench_cmd(ba); });

  // sweep
  SweepArgs sa;
  auto* sw = app.add_subcommand("sweep", "train every point of a config grid");
  sa.cfg.attach(sw);
  sw->add_option("--grid", sa.grid,
                 "cartesian grid 'key=v1|v2;key2=w1|w2' over config keys")
      ->required();
  sw->add_option("--out", sa.out, "sweep output directory");
  sw->add_option("--csv", sa.csv, "also write per-run rows as CSV");
  sw->add_flag("--verbose", sa.verbose, "per-step console logging for each run");
  sw->callback([&] { exit_code = run_sweep_cmd(sa); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the parse error
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFail;
  }
  return exit_code;
}
