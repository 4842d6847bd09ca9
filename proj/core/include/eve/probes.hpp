#pragma once

#include <cstdint>
#include <vector>

#include "eve/model.hpp"
#include "eve/shapeworld.hpp"
#include "eve/trainer.hpp"

namespace eve {

// ---------------------------------------------------------------------------
// Grounding probe
//
// Hides every colour word of held-out captions and asks the token head to
// recover them. With the colour gone from the text, the image is the only
// evidence (shape words stay visible, so the model knows *which* object is
// meant but not what colour it is). Top-1 accuracy is measured under three
// image conditions — the paired image, an all-black image, and the
// neighbouring sample's image — and compared against the majority-class
// prior over the probed positions. A model that reads the image beats the
// prior under the true condition and collapses towards it under the other
// two; chance level is one in the number of colour words.
// ---------------------------------------------------------------------------

struct GroundingOptions {
  int samples = 64;
  int batch = 16;
  std::int64_t index_base = kHeldOutIndexBase;  // probe set disjoint from training
};

struct GroundingReport {
  int samples = 0;
  int positions = 0;       // probed caption positions over all samples
  double acc_true = 0.0;   // paired image
  double acc_blank = 0.0;  // all-zero image
  double acc_shuffled = 0.0;  // image of the next sample in the batch
  double prior = 0.0;      // majority-class baseline over the probed positions
};

GroundingReport grounding_probe(const EveModel& m, const GroundingOptions& opt);

// ---------------------------------------------------------------------------
// Retrieval probe
//
// Ranks held-out pairs both ways (image-to-text and text-to-image) by the
// cosine similarity of the unimodal CLS states, then re-scores the top of
// each candidate list with a fused forward pass per pair and re-orders it by
// the matching logit. Reranking needs the matching head; a checkpoint
// without one is an error unless the shortlist is set to 0 (pure similarity
// ranking, for diagnostics).
// ---------------------------------------------------------------------------

struct RetrievalOptions {
  int pairs = 256;
  int batch = 16;  // unimodal encoding batch
  std::int64_t index_base = kHeldOutIndexBase;
  // Rerank depth for the matching head; 0 keeps the pure similarity ranking.
  int shortlist = 8;
};

struct RetrievalReport {
  int pairs = 0;
  bool reranked = false;
  double r1_i2t = 0.0, r5_i2t = 0.0;  // recall@1 / recall@5, image queries
  double r1_t2i = 0.0, r5_t2i = 0.0;  // text queries
};

RetrievalReport retrieval_probe(const EveModel& m, const RetrievalOptions& opt);

// Candidate indices ordered by score descending, ties to the lower index,
// truncated to k (k < 0 or beyond the end keeps the full ordering).
std::vector<int> rank_candidates(const std::vector<double>& scores, int k);

// Recall directly from a similarity matrix sim[i][j] = <img_i, txt_j>, full
// ranking and no reranking. The model-free core of the probe, shared with the
// tests.
RetrievalReport recall_from_sim(const std::vector<std::vector<double>>& sim);

}  // namespace eve
