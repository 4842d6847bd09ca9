#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "eve/model.hpp"
#include "eve/ops.hpp"
#include "eve/tensor.hpp"

namespace eve {

// A batch of token sequences in flattened layout: row b*len + p of `x` is
// position p of sample b. `valid` marks rows that may serve as attention keys
// (padding rows are embedded and routed but never attended to). `tags` gives
// each position's modality.
struct SeqBatch {
  Tensor x;  // (b*len, dim)
  std::vector<std::uint8_t> valid;
  std::vector<Tag> tags;
  int b = 0;
  int len = 0;
};

// Diagnostics for one learned-router layer on one forward pass.
struct LayerRouting {
  int layer = -1;
  std::vector<double> load;        // f_i: fraction of dispatched slots per expert
  std::vector<double> importance;  // p_i: mean gate probability per expert
  std::vector<double> load_img;    // load distribution restricted to image rows
  std::vector<double> load_txt;    // load distribution restricted to text rows
  double aux = 0.0;
  // Smallest gap between the k-th and (k+1)-th gate probability over all
  // routed tokens; infinite when k equals the expert count. Near-zero values
  // flag top-k ties, where finite-difference gradients are invalid.
  double min_margin = std::numeric_limits<double>::infinity();
};

struct EncodeResult {
  Tensor states;                      // (b*len, dim) after the final layer norm
  std::vector<LayerRouting> routing;  // one entry per learned-router layer
  Tensor aux;                         // scalar mean of per-layer balance losses
};

// --- Embedding (Eq. 1-3) ---

// Projects patches and assembles [CLS; kept patches] per sample, adding
// positional rows (slot 0 for CLS, slot j+1 for patch j) and the image type
// embedding. `patches` is (b*n_patches, patch_dim) and is treated as constant.
// If `keep` is empty every patch is visible; otherwise keep[s] lists the
// visible patch indices of sample s in ascending order (equal lengths).
SeqBatch embed_image(const EveModel& m, const Tensor& patches, int b,
                     const std::vector<std::vector<int>>& keep = {});

// Embeds token ids (already [MASK]-substituted where masked) and assembles
// [CLS; tokens] with positional and type embeddings. `ids` is b*max_tokens
// row-major; PAD positions are embedded but flagged invalid.
SeqBatch embed_text(const EveModel& m, const std::vector<int>& ids, int b);

// Concatenates per-sample: [image positions; text positions].
SeqBatch concat_seq(const SeqBatch& img, const SeqBatch& txt);

// --- Transformer ---

// One pre-LN block: x + Attn(LN(x)), then the FFN sublayer according to the
// layer's mode. `stats`, when non-null, receives routing diagnostics for
// learned-router layers; `aux_out` receives the layer's balance loss tensor.
Tensor block_forward(const Tensor& x, const LayerParams& lp, const SeqBatch& sb, int heads,
                     double alpha, bool modality_bias, LayerRouting* stats, Tensor* aux_out);

// Full encoder: all blocks then the final layer norm (identity when the
// config has depth 0). Balance losses of learned-router layers are averaged
// into `aux`; if none exist `aux` is a constant zero.
EncodeResult encoder_forward(const EveModel& m, const SeqBatch& in);

// Decoder trunk: runs the (shared-FFN) decoder blocks and final layer norm
// over an already-assembled (b*(n_patches+1), dec_dim) sequence.
Tensor decoder_forward(const EveModel& m, const Tensor& x, int b);

// --- Modality-aware FFN internals (Eq. 4-7) ---
namespace moe {

// Two-layer GELU FFN.
Tensor ffn_forward(const Tensor& x, const ExpertParams& e);

// Gate probabilities g = softmax((x + b_m) W), (rows, n_experts). The
// modality embedding enters the router input only, never the expert input.
Tensor gate_probs(const Tensor& x, const LayerParams& lp, const std::vector<Tag>& tags,
                  bool modality_bias);

// Per-row top-k expert ids in ascending order; ties keep the lower index.
std::vector<std::vector<int>> topk_select(const Tensor& gates, int k);

// Gather/dispatch/combine: each row is sent to its top-k experts (experts
// processed in ascending id order), outputs are weighted by the (full-softmax,
// unrenormalized) gate values and summed. Fills load statistics if given.
Tensor dispatch_combine(const Tensor& x, const Tensor& gates, const LayerParams& lp, int k,
                        const std::vector<Tag>& tags, LayerRouting* stats);

// Balance loss alpha * N * sum_i f_i * p_i with f constant and p
// differentiable. `load` must be the f vector from dispatch_combine.
Tensor aux_loss(const Tensor& gates, const std::vector<double>& load, double alpha);

// Fixed modality routing: image rows through expert 0, text rows through
// expert 1, weight 1.0, no balance loss.
Tensor hard_route(const Tensor& x, const LayerParams& lp, const std::vector<Tag>& tags);

}  // namespace moe

}  // namespace eve
