#include "eve/probes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "eve/encoder.hpp"
#include "eve/objectives.hpp"
#include "eve/ops.hpp"
#include "eve/tensor.hpp"

namespace eve {

namespace {

std::vector<shapeworld::Sample> probe_samples(const ModelConfig& cfg,
                                              const shapeworld::Vocab& vocab, int count,
                                              std::int64_t index_base) {
  const shapeworld::CorpusOptions opt = corpus_options(cfg, index_base);
  std::vector<shapeworld::Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(shapeworld::make_sample(cfg.seed, index_base + i, opt, vocab));
  }
  return out;
}

shapeworld::Batch batch_of(const ModelConfig& cfg, const std::vector<shapeworld::Sample>& samples,
                           int from, int count) {
  std::vector<const shapeworld::Sample*> ptrs;
  ptrs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) ptrs.push_back(&samples[static_cast<std::size_t>(from + i)]);
  return shapeworld::make_batch(ptrs, cfg.image_size, cfg.image_size, cfg.max_tokens, cfg.patch);
}

// Argmax per row with ties to the lower id, compared against the targets.
int correct_predictions(const Tensor& pred, const std::vector<int>& targets) {
  const int v = pred.dim(1);
  int correct = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    int best = 0;
    double best_val = pred.flat(static_cast<std::int64_t>(r) * v);
    for (int d = 1; d < v; ++d) {
      const double x = pred.flat(static_cast<std::int64_t>(r) * v + d);
      if (x > best_val) {
        best_val = x;
        best = d;
      }
    }
    if (best == targets[r]) ++correct;
  }
  return correct;
}

// Every sample's patches replaced by the next sample's (same roll the
// matching loss uses for its negatives).
void roll_images(shapeworld::Batch& batch) {
  const std::size_t per =
      static_cast<std::size_t>(batch.N) * batch.P * batch.P * batch.C;
  std::vector<float> rolled(batch.patches.size());
  for (int s = 0; s < batch.B; ++s) {
    const int src = (s + 1) % batch.B;
    std::copy(batch.patches.begin() + static_cast<std::ptrdiff_t>(src * per),
              batch.patches.begin() + static_cast<std::ptrdiff_t>((src + 1) * per),
              rolled.begin() + static_cast<std::ptrdiff_t>(s * per));
  }
  batch.patches = std::move(rolled);
}

// Unimodal CLS states for every sample, l2-normalized, on the host.
std::vector<std::vector<double>> encode_cls(const EveModel& m,
                                            const std::vector<shapeworld::Sample>& samples,
                                            int batch_size, bool image_side) {
  const ModelConfig& cfg = m.config();
  const int len = (image_side ? cfg.patches_per_image() : cfg.max_tokens) + 1;
  const int d = cfg.dim;
  std::vector<std::vector<double>> out;
  out.reserve(samples.size());
  for (int from = 0; from < static_cast<int>(samples.size());) {
    const int b = std::min(batch_size, static_cast<int>(samples.size()) - from);
    const shapeworld::Batch batch = batch_of(cfg, samples, from, b);
    const EncodeResult enc =
        image_side ? encode_image_only(m, batch) : encode_text_only(m, batch);
    for (int s = 0; s < b; ++s) {
      std::vector<double> row(static_cast<std::size_t>(d));
      double sq = 0.0;
      for (int j = 0; j < d; ++j) {
        row[static_cast<std::size_t>(j)] =
            enc.states.flat(static_cast<std::int64_t>(s) * len * d + j);
        sq += row[static_cast<std::size_t>(j)] * row[static_cast<std::size_t>(j)];
      }
      const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
      for (double& x : row) x *= inv;
      out.push_back(std::move(row));
    }
    from += b;
  }
  return out;
}

// Matching-head logits for already-paired samples (one fused pass).
std::vector<double> match_logits(const EveModel& m, const shapeworld::Batch& batch) {
  const ModelConfig& cfg = m.config();
  const int pdim = batch.P * batch.P * batch.C;
  Tensor patches =
      Tensor::from_floats({batch.B * batch.N, pdim}, batch.patches, cfg.compute_dtype());
  SeqBatch img = embed_image(m, patches, batch.B, {});
  std::vector<int> ids(batch.token_ids.begin(), batch.token_ids.end());
  SeqBatch txt = embed_text(m, ids, batch.B);
  SeqBatch fused = concat_seq(img, txt);
  EncodeResult enc = encoder_forward(m, fused);
  std::vector<int> rows(static_cast<std::size_t>(batch.B));
  for (int s = 0; s < batch.B; ++s) rows[static_cast<std::size_t>(s)] = s * fused.len + img.len;
  Tensor logits = add_bias(matmul(gather_rows(enc.states, rows), m.itm_w), m.itm_b);
  std::vector<double> out(static_cast<std::size_t>(batch.B));
  for (int s = 0; s < batch.B; ++s) out[static_cast<std::size_t>(s)] = logits.flat(s);
  return out;
}

// One retrieval direction with matching-head reranking. `pair_batch` builds
// the fused candidate pairs for a query; returns (hits@1, hits@5) over all
// queries.
template <typename PairBatchFn>
std::pair<int, int> reranked_direction(const EveModel& m,
                                       const std::vector<std::vector<double>>& scores,
                                       int shortlist, PairBatchFn pair_batch) {
  int h1 = 0, h5 = 0;
  for (int q = 0; q < static_cast<int>(scores.size()); ++q) {
    std::vector<int> cand = rank_candidates(scores[static_cast<std::size_t>(q)], shortlist);
    const std::vector<double> logits = match_logits(m, pair_batch(q, cand));
    const std::vector<int> order = rank_candidates(logits, -1);
    std::vector<int> reranked(cand.size());
    for (std::size_t c = 0; c < cand.size(); ++c) {
      reranked[c] = cand[static_cast<std::size_t>(order[c])];
    }
    for (std::size_t r = 0; r < reranked.size(); ++r) {
      if (reranked[r] == q) {
        if (r == 0) ++h1;
        if (r < 5) ++h5;
        break;
      }
    }
  }
  return {h1, h5};
}

}  // namespace

GroundingReport grounding_probe(const EveModel& m, const GroundingOptions& opt) {
  const ModelConfig& cfg = m.config();
  if (opt.samples < 2 || opt.batch < 2) {
    throw std::invalid_argument("grounding probe needs at least two samples and a batch of two");
  }
  shapeworld::Vocab vocab;
  std::unordered_set<int> probed_words(vocab.color_ids().begin(), vocab.color_ids().end());

  const std::vector<shapeworld::Sample> samples =
      probe_samples(cfg, vocab, opt.samples, opt.index_base);

  GroundingReport rep;
  rep.samples = opt.samples;
  int correct_true = 0, correct_blank = 0, correct_shuffled = 0;
  std::map<int, int> target_counts;

  for (int from = 0; from < opt.samples;) {
    int b = std::min(opt.batch, opt.samples - from);
    // The shuffled condition pairs each caption with the next image in the
    // batch, so a trailing singleton would silently see its own image again.
    if (opt.samples - from - b == 1) --b;
    shapeworld::Batch batch = batch_of(cfg, samples, from, b);

    MaskPlan plan;
    plan.img.resize(static_cast<std::size_t>(b));
    plan.txt.resize(static_cast<std::size_t>(b));
    for (int s = 0; s < b; ++s) {
      for (int j = 0; j < batch.n; ++j) {
        const std::size_t at = static_cast<std::size_t>(s) * batch.n + j;
        if (batch.token_valid[at] && probed_words.count(batch.token_ids[at])) {
          plan.txt[static_cast<std::size_t>(s)].push_back(j);
        }
      }
    }

    const PassOut truth = run_mlm(m, batch, plan);
    correct_true += correct_predictions(truth.pred, truth.targets);
    rep.positions += static_cast<int>(truth.targets.size());
    for (int id : truth.targets) ++target_counts[id];

    shapeworld::Batch blank = batch;
    std::fill(blank.patches.begin(), blank.patches.end(), 0.0f);
    const PassOut dark = run_mlm(m, blank, plan);
    correct_blank += correct_predictions(dark.pred, dark.targets);

    shapeworld::Batch shuffled = batch;
    roll_images(shuffled);
    const PassOut wrong = run_mlm(m, shuffled, plan);
    correct_shuffled += correct_predictions(wrong.pred, wrong.targets);

    from += b;
  }

  if (rep.positions == 0) throw std::logic_error("no colour word found to probe");
  const double inv = 1.0 / rep.positions;
  rep.acc_true = correct_true * inv;
  rep.acc_blank = correct_blank * inv;
  rep.acc_shuffled = correct_shuffled * inv;
  int majority = 0;
  for (const auto& [id, count] : target_counts) majority = std::max(majority, count);
  rep.prior = majority * inv;
  return rep;
}

std::vector<int> rank_candidates(const std::vector<double>& scores, int k) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return scores[static_cast<std::size_t>(a)] >
                                              scores[static_cast<std::size_t>(b)]; });
  if (k >= 0 && k < static_cast<int>(idx.size())) idx.resize(static_cast<std::size_t>(k));
  return idx;
}

RetrievalReport recall_from_sim(const std::vector<std::vector<double>>& sim) {
  const int n = static_cast<int>(sim.size());
  RetrievalReport rep;
  rep.pairs = n;
  if (n == 0) return rep;
  int h1i = 0, h5i = 0, h1t = 0, h5t = 0;
  for (int i = 0; i < n; ++i) {
    const std::vector<int> order = rank_candidates(sim[static_cast<std::size_t>(i)], -1);
    for (int r = 0; r < n; ++r) {
      if (order[static_cast<std::size_t>(r)] == i) {
        if (r == 0) ++h1i;
        if (r < 5) ++h5i;
        break;
      }
    }
  }
  for (int j = 0; j < n; ++j) {
    std::vector<double> col(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = sim[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    const std::vector<int> order = rank_candidates(col, -1);
    for (int r = 0; r < n; ++r) {
      if (order[static_cast<std::size_t>(r)] == j) {
        if (r == 0) ++h1t;
        if (r < 5) ++h5t;
        break;
      }
    }
  }
  const double inv = 1.0 / n;
  rep.r1_i2t = h1i * inv;
  rep.r5_i2t = h5i * inv;
  rep.r1_t2i = h1t * inv;
  rep.r5_t2i = h5t * inv;
  return rep;
}

RetrievalReport retrieval_probe(const EveModel& m, const RetrievalOptions& opt) {
  const ModelConfig& cfg = m.config();
  if (opt.pairs < 2) throw std::invalid_argument("retrieval probe needs at least two pairs");
  if (opt.shortlist < 0 || opt.shortlist > opt.pairs) {
    throw std::invalid_argument("retrieval shortlist must lie in [0, pairs]");
  }
  shapeworld::Vocab vocab;
  const std::vector<shapeworld::Sample> samples =
      probe_samples(cfg, vocab, opt.pairs, opt.index_base);

  const auto img_cls = encode_cls(m, samples, opt.batch, /*image_side=*/true);
  const auto txt_cls = encode_cls(m, samples, opt.batch, /*image_side=*/false);

  const int n = opt.pairs;
  std::vector<std::vector<double>> sim(static_cast<std::size_t>(n),
                                       std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < img_cls[static_cast<std::size_t>(i)].size(); ++d) {
        dot += img_cls[static_cast<std::size_t>(i)][d] * txt_cls[static_cast<std::size_t>(j)][d];
      }
      sim[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = dot;
    }
  }

  if (opt.shortlist == 0) {
    RetrievalReport rep = recall_from_sim(sim);
    rep.pairs = n;
    return rep;
  }
  if (!m.itm_w.defined()) {
    throw std::logic_error(
        "retrieval probe: checkpoint has no matching head to rerank with; fine-tune with "
        "enable_itm, or pass shortlist 0 for a similarity-only ranking");
  }

  // Image query, text candidates.
  const auto [h1i, h5i] = reranked_direction(
      m, sim, opt.shortlist, [&](int q, const std::vector<int>& cand) {
        std::vector<shapeworld::Sample> pairs;
        pairs.reserve(cand.size());
        for (int c : cand) {
          shapeworld::Sample p;
          p.image = samples[static_cast<std::size_t>(q)].image;
          p.ids = samples[static_cast<std::size_t>(c)].ids;
          pairs.push_back(std::move(p));
        }
        return batch_of(cfg, pairs, 0, static_cast<int>(pairs.size()));
      });

  // Text query, image candidates (scores are similarity columns).
  std::vector<std::vector<double>> sim_t(static_cast<std::size_t>(n),
                                         std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      sim_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] =
          sim[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  }
  const auto [h1t, h5t] = reranked_direction(
      m, sim_t, opt.shortlist, [&](int q, const std::vector<int>& cand) {
        std::vector<shapeworld::Sample> pairs;
        pairs.reserve(cand.size());
        for (int c : cand) {
          shapeworld::Sample p;
          p.image = samples[static_cast<std::size_t>(c)].image;
          p.ids = samples[static_cast<std::size_t>(q)].ids;
          pairs.push_back(std::move(p));
        }
        return batch_of(cfg, pairs, 0, static_cast<int>(pairs.size()));
      });

  RetrievalReport rep;
  rep.pairs = n;
  rep.reranked = true;
  const double inv = 1.0 / n;
  rep.r1_i2t = h1i * inv;
  rep.r5_i2t = h5i * inv;
  rep.r1_t2i = h1t * inv;
  rep.r5_t2i = h5t * inv;
  return rep;
}

}  // namespace eve
