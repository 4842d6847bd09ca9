#include "eve/bench.hpp"

#include <chrono>
#include <sstream>
#include <stdexcept>

#include "eve/objectives.hpp"
#include "eve/optim.hpp"
#include "eve/runtime.hpp"
#include "eve/trainer.hpp"

namespace eve {

namespace {

// "msm", "msm+itc", ... -> config flags. Order-insensitive; msm mandatory.
void apply_task(ModelConfig& cfg, const std::string& name) {
  bool msm = false;
  cfg.enable_itc = false;
  cfg.enable_itm = false;
  std::stringstream ss(name);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "msm") {
      msm = true;
    } else if (part == "itc") {
      cfg.enable_itc = true;
    } else if (part == "itm") {
      cfg.enable_itm = true;
    } else {
      throw std::invalid_argument("bench: unknown task component '" + part + "' in '" + name +
                                  "'");
    }
  }
  if (!msm) throw std::invalid_argument("bench: task '" + name + "' lacks the msm base");
}

struct DeterministicOff {
  bool prev = runtime::deterministic();
  DeterministicOff() { runtime::set_deterministic(false); }
  ~DeterministicOff() { runtime::set_deterministic(prev); }
};

}  // namespace

BenchReport run_bench(const ModelConfig& cfg_in, const BenchOptions& opt) {
  if (opt.steps < 1) throw std::invalid_argument("bench: needs at least one measured step");
  if (opt.warmup < 0) throw std::invalid_argument("bench: negative warmup");
  if (opt.tasks.empty()) throw std::invalid_argument("bench: no tasks");

  BenchReport rep;
  rep.short_run_warning = opt.steps < 100;
  rep.note =
      "all tasks run the same batch size, so the contrastive terms see identical in-batch "
      "negative counts; timing differences reflect added computation, not objective "
      "difficulty, and per-step times at other batch sizes do not scale linearly";

  memstat::reset_peak();
  shapeworld::Vocab vocab;

  // Benchmarks measure the fast path: deterministic mode off regardless of
  // the config, restored when the run finishes.
  const DeterministicOff det_guard;
  runtime::set_threads(cfg_in.threads);
  rep.threads = runtime::threads();

  for (const std::string& name : opt.tasks) {
    ModelConfig cfg = cfg_in;
    apply_task(cfg, name);
    validate(cfg);

    EveModel model(cfg, vocab.size(), cfg.seed);
    AdamW adam(model.params(),
               AdamW::Options{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
    LrSchedule sched{cfg.warmup, cfg.steps, cfg.peak_lr, cfg.floor_lr};
    const std::vector<shapeworld::Sample> corpus = build_corpus(cfg, vocab);

    double measured_secs = 0.0;
    for (int t = 1; t <= opt.warmup + opt.steps; ++t) {
      const auto t0 = std::chrono::steady_clock::now();
      const shapeworld::Batch batch = assemble_batch(cfg, vocab, corpus, t);
      const MaskPlan plan = sample_masks(cfg, batch, cfg.seed, t);
      StepLosses losses = msm_step(model, batch, plan);
      backward(losses.total);
      adam.clip_global_norm(cfg.clip_norm);
      adam.step(sched.at(t));
      adam.zero_grad();
      if (t > opt.warmup) {
        measured_secs +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
    }

    BenchTask task;
    task.name = name;
    task.tokens_per_step = step_token_count(cfg, /*finetune=*/false);
    task.mean_step_ms = measured_secs * 1000.0 / opt.steps;
    task.steps_per_sec = measured_secs > 0.0 ? opt.steps / measured_secs : 0.0;
    task.tokens_per_sec = task.steps_per_sec * static_cast<double>(task.tokens_per_step);
    rep.tasks.push_back(std::move(task));
  }

  double msm_sps = 0.0;
  for (const BenchTask& t : rep.tasks) {
    if (t.name == "msm") msm_sps = t.steps_per_sec;
  }
  if (msm_sps > 0.0) {
    for (BenchTask& t : rep.tasks) {
      t.ratio_vs_msm = t.steps_per_sec > 0.0 ? msm_sps / t.steps_per_sec : 0.0;
    }
  }

  rep.peak_bytes = memstat::peak_bytes();
  return rep;
}

}  // namespace eve
