#pragma once

#include <cstdint>
#include <vector>

#include "eve/encoder.hpp"
#include "eve/model.hpp"
#include "eve/shapeworld.hpp"
#include "eve/tensor.hpp"

namespace eve {

// Which patches / caption positions are hidden from the encoder this step.
// Counts are floor(ratio * available) clamped to leave at least one masked and
// one visible patch, and at least one masked caption token. CLS and PAD
// positions are never masked.
struct MaskPlan {
  std::vector<std::vector<int>> img;  // masked patch indices per sample, ascending
  std::vector<std::vector<int>> txt;  // masked caption positions per sample, ascending
};

// Pure function of (seed, step, sample): resuming at step t reproduces the
// exact plan an uninterrupted run would draw.
MaskPlan sample_masks(const ModelConfig& cfg, const shapeworld::Batch& batch, std::uint64_t seed,
                      std::int64_t step);

// One encoder pass worth of objective output. `loss` excludes the balance
// term; `aux` is the pass's balance loss (constant zero if no routed layers).
// `pred` exposes the head outputs over the masked rows (MLM: one logit row
// per masked position, in per-sample plan order; MIM: one pixel row per
// masked patch) for probes and information-flow tests.
struct PassOut {
  Tensor loss;
  Tensor aux;
  std::vector<LayerRouting> routing;
  Tensor pred;
  std::vector<int> targets;  // MLM target ids aligned with pred rows
};

// Masked image modeling: encoder sees kept patches plus the full caption;
// a light decoder with mask tokens and its own positional table reconstructs
// pixels; MSE over masked patches only.
PassOut run_mim(const EveModel& m, const shapeworld::Batch& batch, const MaskPlan& plan);

// Masked language modeling: encoder sees the full image plus the caption with
// masked positions replaced by [MASK]; cross-entropy over masked positions.
PassOut run_mlm(const EveModel& m, const shapeworld::Batch& batch, const MaskPlan& plan);

// Combined masked-signal step. Default: two passes (MIM then MLM) whose
// balance losses are averaged. With cfg.simultaneous_masking, a single pass
// with both maskings feeds both heads.
struct StepLosses {
  Tensor total;  // mlm + mim (+ itc + itm when enabled) + averaged balance
  double mlm = 0.0;
  double mim = 0.0;
  double itc = 0.0;
  double itm = 0.0;
  double aux = 0.0;
  std::vector<LayerRouting> routing;  // averaged over the passes of this step
};
StepLosses msm_step(const EveModel& m, const shapeworld::Batch& batch, const MaskPlan& plan);

// Contrastive loss from already-encoded CLS states (rows are samples). States
// are l2-normalized here; `temp` is the learnable scalar temperature.
Tensor itc_from_cls(const Tensor& img_cls, const Tensor& txt_cls, const Tensor& temp);

// Full contrastive pass: two unimodal encodings, symmetric InfoNCE over the
// in-batch similarity matrix. Requires batch >= 2.
PassOut itc_pass(const EveModel& m, const shapeworld::Batch& batch);

// Image-text matching: each caption is paired with its own image (label 1)
// and with the next sample's image (label 0); binary cross-entropy on a
// linear head over the fused text CLS state.
PassOut itm_pass(const EveModel& m, const shapeworld::Batch& batch);

// Fine-tuning step for the retrieval heads: ITC + ITM + averaged balance.
StepLosses contrastive_step(const EveModel& m, const shapeworld::Batch& batch);

// Unimodal helpers shared with the probes.
EncodeResult encode_image_only(const EveModel& m, const shapeworld::Batch& batch);
EncodeResult encode_text_only(const EveModel& m, const shapeworld::Batch& batch);
// CLS rows of a flattened (b*len, d) sequence.
std::vector<int> cls_rows(int b, int len);

}  // namespace eve
