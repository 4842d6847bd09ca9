#include "eve/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "eve/checkpoint.hpp"
#include "eve/runtime.hpp"
#include "json.hpp"

namespace eve {

shapeworld::CorpusOptions corpus_options(const ModelConfig& cfg, std::int64_t start_index) {
  shapeworld::CorpusOptions opt;
  opt.image_size = cfg.image_size;
  opt.max_tokens = cfg.max_tokens;
  opt.allow_relations = cfg.relation_captions;
  opt.start_index = start_index;
  opt.grid = cfg.grid;
  return opt;
}

// Token positions pushed through the encoder in one step, for the throughput
// metric. Mirrors the pass structure of the objective.
std::int64_t step_token_count(const ModelConfig& cfg, bool finetune) {
  const std::int64_t b = cfg.batch;
  const std::int64_t n_img = cfg.patches_per_image();
  const std::int64_t n_txt = cfg.max_tokens;
  const std::int64_t img_len = n_img + 1;
  const std::int64_t txt_len = n_txt + 1;

  std::int64_t toks = 0;
  if (!finetune) {
    std::int64_t masked = static_cast<std::int64_t>(std::floor(cfg.mask_ratio_img * n_img));
    masked = std::max<std::int64_t>(1, std::min(masked, n_img - 1));
    const std::int64_t kept_len = (n_img - masked) + 1;
    if (cfg.simultaneous_masking) {
      toks += b * (kept_len + txt_len);
    } else {
      toks += b * (kept_len + txt_len);  // reconstruction pass
      toks += b * (img_len + txt_len);   // token-prediction pass
    }
  }
  if (finetune || cfg.enable_itc) toks += b * img_len + b * txt_len;
  if (finetune || cfg.enable_itm) toks += 2 * b * (img_len + txt_len);
  return toks;
}

namespace {

using nlohmann::json;

json routing_json(std::int64_t step, const LayerRouting& lr) {
  json j;
  j["step"] = step;
  j["layer"] = lr.layer;
  j["f"] = lr.load;
  j["p"] = lr.importance;
  j["f_img"] = lr.load_img;
  j["f_txt"] = lr.load_txt;
  j["aux"] = lr.aux;
  // JSON has no infinity; clamp the no-constraint case (top_k == experts)
  j["min_margin"] = std::isinf(lr.min_margin) ? 1.0 : lr.min_margin;
  return j;
}

}  // namespace

std::vector<shapeworld::Sample> build_corpus(const ModelConfig& cfg,
                                             const shapeworld::Vocab& vocab) {
  std::vector<shapeworld::Sample> out;
  out.reserve(static_cast<std::size_t>(cfg.corpus_count));
  const shapeworld::CorpusOptions opt = corpus_options(cfg, cfg.corpus_start);
  for (int i = 0; i < cfg.corpus_count; ++i) {
    out.push_back(shapeworld::make_sample(cfg.seed, cfg.corpus_start + i, opt, vocab));
  }
  return out;
}

std::vector<std::int64_t> batch_indices(const ModelConfig& cfg, std::int64_t step) {
  Rng rng = Rng::from_seed(cfg.seed).stream("batch").derive(step);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(cfg.batch));
  for (int i = 0; i < cfg.batch; ++i) {
    idx[static_cast<std::size_t>(i)] = rng.uniform_int(cfg.corpus_count);
  }
  return idx;
}

shapeworld::Batch assemble_batch(const ModelConfig& cfg, const shapeworld::Vocab& vocab,
                                 const std::vector<shapeworld::Sample>& corpus,
                                 std::int64_t step) {
  if (corpus.size() < static_cast<std::size_t>(cfg.corpus_count)) {
    throw std::invalid_argument("assemble_batch: corpus smaller than corpus_count");
  }
  const std::vector<std::int64_t> idx = batch_indices(cfg, step);
  Rng flip_rng = Rng::from_seed(cfg.seed).stream("flip").derive(step);

  std::vector<shapeworld::Sample> flipped;  // storage for augmented copies
  flipped.reserve(idx.size());
  std::vector<const shapeworld::Sample*> ptrs;
  ptrs.reserve(idx.size());
  for (std::size_t slot = 0; slot < idx.size(); ++slot) {
    const shapeworld::Sample& base = corpus[static_cast<std::size_t>(idx[slot])];
    const bool flip =
        cfg.flip_augment && flip_rng.derive(static_cast<std::int64_t>(slot)).uniform() < 0.5;
    if (flip) {
      shapeworld::Sample s = base;
      shapeworld::hflip_image(s.image, cfg.image_size, cfg.image_size);
      shapeworld::hflip_caption(vocab, s.ids);
      flipped.push_back(std::move(s));
      ptrs.push_back(&flipped.back());
    } else {
      ptrs.push_back(&base);
    }
  }
  return shapeworld::make_batch(ptrs, cfg.image_size, cfg.image_size, cfg.max_tokens, cfg.patch);
}

TrainSummary train(const ModelConfig& cfg_in, const TrainOptions& topt) {
  ModelConfig cfg = cfg_in;
  validate(cfg);
  runtime::set_deterministic(cfg.deterministic);
  runtime::set_threads(cfg.threads);

  const bool finetune = topt.objective == "contrastive";
  if (!finetune && topt.objective != "pretrain") {
    throw std::invalid_argument("train: objective must be 'pretrain' or 'contrastive'");
  }
  if (finetune && (!cfg.enable_itc || !cfg.enable_itm)) {
    throw std::invalid_argument(
        "train: the contrastive objective needs enable_itc and enable_itm");
  }

  shapeworld::Vocab vocab;
  EveModel model(cfg, vocab.size(), cfg.seed);
  AdamW opt(model.params(),
            AdamW::Options{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
  LrSchedule sched{cfg.warmup, cfg.steps, cfg.peak_lr, cfg.floor_lr};

  if (!topt.resume.empty() && !topt.init.empty()) {
    throw std::invalid_argument(
        "train: resume and init are mutually exclusive (resume continues a run, init only "
        "seeds the weights)");
  }
  std::int64_t start_step = 1;
  if (!topt.resume.empty()) {
    CheckpointMeta meta = load_checkpoint(topt.resume, model, &opt);
    start_step = meta.step + 1;
  } else if (!topt.init.empty()) {
    load_checkpoint(topt.init, model, /*opt=*/nullptr, /*allow_missing=*/true);
  }

  std::filesystem::create_directories(topt.out_dir);
  const auto mode = !topt.resume.empty() ? std::ios::app : std::ios::trunc;
  std::ofstream metrics(topt.out_dir + "/metrics.jsonl", mode);
  std::ofstream router(topt.out_dir + "/router_stats.jsonl", mode);
  if (!metrics || !router) {
    throw std::runtime_error("train: cannot write logs under " + topt.out_dir);
  }

  const std::vector<shapeworld::Sample> corpus = build_corpus(cfg, vocab);
  const std::int64_t step_tokens = step_token_count(cfg, finetune);

  TrainSummary summary;
  double tok_rate_sum = 0.0;

  auto abort_run = [&](std::int64_t step, const StepLosses& losses, const std::string& why) {
    json j;
    j["step"] = step;
    j["reason"] = why;
    j["mlm_loss"] = losses.mlm;
    j["mim_loss"] = losses.mim;
    j["itc_loss"] = losses.itc;
    j["itm_loss"] = losses.itm;
    j["aux_loss"] = losses.aux;
    std::ofstream ab(topt.out_dir + "/abort.json", std::ios::trunc);
    ab << j.dump(2) << "\n";
    throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " + why +
                             " (diagnostics in " + topt.out_dir + "/abort.json)");
  };

  summary.final_step = start_step - 1;
  for (std::int64_t t = start_step; t <= cfg.steps; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    shapeworld::Batch batch = assemble_batch(cfg, vocab, corpus, t);

    StepLosses losses;
    try {
      if (finetune) {
        losses = contrastive_step(model, batch);
      } else {
        MaskPlan plan = sample_masks(cfg, batch, cfg.seed, t);
        losses = msm_step(model, batch, plan);
      }
    } catch (const std::domain_error& e) {
      // Numeric kernels reject non-finite inputs; a diverged model hits this
      // before the loss itself turns non-finite.
      abort_run(t, losses, std::string("forward pass failed: ") + e.what());
    }
    const double total = losses.total.item();
    if (!std::isfinite(total)) abort_run(t, losses, "non-finite loss");

    backward(losses.total);
    const double grad_norm = opt.clip_global_norm(cfg.clip_norm);
    if (!std::isfinite(grad_norm)) abort_run(t, losses, "non-finite gradient norm");
    const double lr = sched.at(t);
    opt.step(lr);
    opt.zero_grad();

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double tok_rate = secs > 0.0 ? static_cast<double>(step_tokens) / secs : 0.0;
    tok_rate_sum += tok_rate;
    ++summary.steps_run;

    StepRecord rec;
    rec.step = t;
    rec.mlm = losses.mlm;
    rec.mim = losses.mim;
    rec.itc = losses.itc;
    rec.itm = losses.itm;
    rec.aux = losses.aux;
    rec.total = total;
    rec.lr = lr;
    rec.grad_norm = grad_norm;
    rec.tokens_per_sec = tok_rate;
    rec.routing = losses.routing;

    json j;
    j["step"] = t;
    j["mlm_loss"] = rec.mlm;
    j["mim_loss"] = rec.mim;
    j["itc_loss"] = rec.itc;
    j["itm_loss"] = rec.itm;
    j["aux_loss"] = rec.aux;
    j["total"] = rec.total;
    j["lr"] = rec.lr;
    j["grad_norm"] = rec.grad_norm;
    j["tokens_per_sec"] = rec.tokens_per_sec;
    metrics << j.dump() << "\n";

    if (cfg.router_stats_every > 0 &&
        (t % cfg.router_stats_every == 0 || t == cfg.steps)) {
      for (const LayerRouting& lr_stats : rec.routing) {
        router << routing_json(t, lr_stats).dump() << "\n";
      }
    }
    if (!topt.quiet && cfg.log_every > 0 && (t % cfg.log_every == 0 || t == cfg.steps)) {
      std::cout << "step " << t << "/" << cfg.steps << "  total " << rec.total << "  mlm "
                << rec.mlm << "  mim " << rec.mim << "  itc " << rec.itc << "  itm " << rec.itm
                << "  aux " << rec.aux << "  lr " << rec.lr << "  tok/s "
                << static_cast<std::int64_t>(rec.tokens_per_sec) << "\n";
    }
    if (cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 && t != cfg.steps) {
      save_checkpoint(topt.out_dir + "/checkpoint_" + std::to_string(t) + ".evek", model, &opt,
                      t);
    }
    if (topt.on_step) topt.on_step(rec);

    summary.final_step = t;
    summary.final_total = rec.total;
    summary.final_mlm = rec.mlm;
    summary.final_mim = rec.mim;

    if (topt.stop_after > 0 && summary.steps_run >= topt.stop_after) break;
  }

  metrics.flush();
  router.flush();
  summary.final_checkpoint = topt.out_dir + "/checkpoint_final.evek";
  save_checkpoint(summary.final_checkpoint, model, &opt, summary.final_step);
  summary.mean_tokens_per_sec =
      summary.steps_run > 0 ? tok_rate_sum / summary.steps_run : 0.0;
  return summary;
}

}  // namespace eve
