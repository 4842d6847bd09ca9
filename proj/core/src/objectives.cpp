#include "eve/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "eve/rng.hpp"

namespace eve {

namespace {

void check_batch(const ModelConfig& cfg, const shapeworld::Batch& batch) {
  if (batch.B <= 0) throw std::invalid_argument("batch is empty");
  if (batch.N != cfg.patches_per_image() || batch.P != cfg.patch || batch.C != 3) {
    throw std::invalid_argument("batch patch layout does not match the model config");
  }
  if (batch.n != cfg.max_tokens) {
    throw std::invalid_argument("batch token capacity does not match the model config");
  }
}

int clamp_count(double ratio, int available, int max_allowed) {
  int c = static_cast<int>(std::floor(ratio * available));
  if (c < 1) c = 1;
  if (c > max_allowed) c = max_allowed;
  return c;
}

// Gathers the target pixels of the masked patches as a constant tensor in the
// model dtype, optionally normalizing each patch to zero mean / unit variance.
Tensor masked_patch_targets(const shapeworld::Batch& batch, const MaskPlan& plan, DType dt,
                            bool normalize) {
  const int pdim = batch.P * batch.P * batch.C;
  std::int64_t rows = 0;
  for (const auto& v : plan.img) rows += static_cast<std::int64_t>(v.size());
  Tensor t = Tensor::zeros({static_cast<int>(rows), pdim}, dt, /*requires_grad=*/false);
  std::int64_t r = 0;
  for (int s = 0; s < batch.B; ++s) {
    for (int mi : plan.img[static_cast<std::size_t>(s)]) {
      const float* src =
          batch.patches.data() + (static_cast<std::size_t>(s) * batch.N + mi) * pdim;
      if (normalize) {
        double mean = 0.0;
        for (int i = 0; i < pdim; ++i) mean += src[i];
        mean /= pdim;
        double var = 0.0;
        for (int i = 0; i < pdim; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= pdim;
        const double inv = 1.0 / std::sqrt(var + 1e-6);
        for (int i = 0; i < pdim; ++i) t.set_flat(r * pdim + i, (src[i] - mean) * inv);
      } else {
        for (int i = 0; i < pdim; ++i) t.set_flat(r * pdim + i, src[i]);
      }
      ++r;
    }
  }
  return t;
}

struct FusedPass {
  SeqBatch fused;
  EncodeResult enc;
  int img_len = 0;  // per-sample image positions (CLS + visible patches)
  std::vector<std::vector<int>> keep;  // visible patch indices (empty: all)
};

// Encodes one fused pass. `mask_img` hides the planned patches from the
// encoder; `mask_txt` substitutes [MASK] at the planned caption positions.
FusedPass encode_fused(const EveModel& m, const shapeworld::Batch& batch, const MaskPlan* plan,
                       bool mask_img, bool mask_txt) {
  const ModelConfig& cfg = m.config();
  const int b = batch.B;
  const int n_patches = batch.N;
  const int pdim = batch.P * batch.P * batch.C;

  FusedPass fp;
  if (mask_img) {
    if (!plan || static_cast<int>(plan->img.size()) != b) {
      throw std::invalid_argument("mask plan does not cover the batch");
    }
    fp.keep.resize(static_cast<std::size_t>(b));
    std::vector<std::uint8_t> masked(static_cast<std::size_t>(n_patches));
    for (int s = 0; s < b; ++s) {
      std::fill(masked.begin(), masked.end(), 0);
      for (int mi : plan->img[static_cast<std::size_t>(s)]) {
        if (mi < 0 || mi >= n_patches) throw std::out_of_range("masked patch index out of range");
        masked[static_cast<std::size_t>(mi)] = 1;
      }
      for (int j = 0; j < n_patches; ++j) {
        if (!masked[static_cast<std::size_t>(j)]) fp.keep[static_cast<std::size_t>(s)].push_back(j);
      }
      if (fp.keep[static_cast<std::size_t>(s)].empty()) {
        throw std::invalid_argument("mask plan leaves no visible patch");
      }
    }
  }

  Tensor patches = Tensor::from_floats({b * n_patches, pdim}, batch.patches, cfg.compute_dtype());
  SeqBatch img = embed_image(m, patches, b, fp.keep);

  std::vector<int> ids(batch.token_ids.begin(), batch.token_ids.end());
  if (mask_txt) {
    if (!plan || static_cast<int>(plan->txt.size()) != b) {
      throw std::invalid_argument("mask plan does not cover the batch");
    }
    for (int s = 0; s < b; ++s) {
      for (int tp : plan->txt[static_cast<std::size_t>(s)]) {
        const std::size_t at = static_cast<std::size_t>(s) * batch.n + tp;
        if (tp < 0 || tp >= batch.n || !batch.token_valid[at]) {
          throw std::out_of_range("masked caption position is not a real token");
        }
        ids[at] = shapeworld::Vocab::kMask;
      }
    }
  }
  SeqBatch txt = embed_text(m, ids, b);

  fp.img_len = img.len;
  fp.fused = concat_seq(img, txt);
  fp.enc = encoder_forward(m, fp.fused);
  return fp;
}

void mim_loss_into(const EveModel& m, const FusedPass& fp, const shapeworld::Batch& batch,
                   const MaskPlan& plan, PassOut& out) {
  const ModelConfig& cfg = m.config();
  const int b = batch.B;
  const int n_patches = batch.N;
  const int dd = cfg.dec_dim;
  const int li = fp.img_len;
  const int fl = fp.fused.len;
  const int dl = n_patches + 1;

  // Project the encoder's visible image states (CLS plus kept patches) into
  // the decoder width; the caption states stay out of the decoder.
  std::vector<int> vis_rows;
  vis_rows.reserve(static_cast<std::size_t>(b) * li);
  for (int s = 0; s < b; ++s) {
    for (int p = 0; p < li; ++p) vis_rows.push_back(s * fl + p);
  }
  Tensor vis = add_bias(matmul(gather_rows(fp.enc.states, vis_rows), m.dec.proj_w), m.dec.proj_b);

  // Mask tokens everywhere, then overwrite the slots of visible positions.
  std::vector<int> slots;
  slots.reserve(vis_rows.size());
  for (int s = 0; s < b; ++s) {
    slots.push_back(s * dl);  // CLS keeps slot 0
    if (fp.keep.empty()) {
      for (int j = 0; j < n_patches; ++j) slots.push_back(s * dl + j + 1);
    } else {
      for (int j : fp.keep[static_cast<std::size_t>(s)]) slots.push_back(s * dl + j + 1);
    }
  }
  Tensor seq = scatter_rows(tile_rows(reshape(m.dec.mask_token, {1, dd}), b * dl), slots, vis);
  seq = reshape(add_broadcast0(reshape(seq, {b, dl, dd}), m.dec.pos), {b * dl, dd});

  Tensor pred = add_bias(matmul(decoder_forward(m, seq, b), m.dec.head_w), m.dec.head_b);

  std::vector<int> mrows;
  for (int s = 0; s < b; ++s) {
    for (int mi : plan.img[static_cast<std::size_t>(s)]) mrows.push_back(s * dl + mi + 1);
  }
  if (mrows.empty()) throw std::invalid_argument("mask plan has no masked patch");
  Tensor targets =
      masked_patch_targets(batch, plan, cfg.compute_dtype(), cfg.normalize_pix_targets);
  out.pred = gather_rows(pred, mrows);
  out.loss = mse(out.pred, targets);
}

void mlm_loss_into(const EveModel& m, const FusedPass& fp, const shapeworld::Batch& batch,
                   const MaskPlan& plan, PassOut& out) {
  const int b = batch.B;
  const int li = fp.img_len;
  const int fl = fp.fused.len;

  std::vector<int> rows;
  std::vector<int> targets;
  for (int s = 0; s < b; ++s) {
    for (int tp : plan.txt[static_cast<std::size_t>(s)]) {
      rows.push_back(s * fl + li + 1 + tp);  // text CLS sits at position li
      targets.push_back(batch.token_ids[static_cast<std::size_t>(s) * batch.n + tp]);
    }
  }
  if (rows.empty()) throw std::invalid_argument("mask plan has no masked caption position");

  Tensor h = gelu(add_bias(matmul(gather_rows(fp.enc.states, rows), m.mlm_w1), m.mlm_b1));
  out.pred = add_bias(matmul(h, m.mlm_w2), m.mlm_b2);
  out.targets = targets;
  out.loss = cross_entropy_rows(out.pred, targets, std::vector<double>(targets.size(), 1.0));
}

std::vector<LayerRouting> average_routing(const std::vector<std::vector<LayerRouting>>& passes) {
  std::vector<LayerRouting> out;
  for (const auto& pass : passes) {
    for (const LayerRouting& lr : pass) {
      LayerRouting* slot = nullptr;
      for (LayerRouting& o : out) {
        if (o.layer == lr.layer) slot = &o;
      }
      if (!slot) {
        out.push_back(lr);
        auto zero = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
        zero(out.back().load);
        zero(out.back().importance);
        zero(out.back().load_img);
        zero(out.back().load_txt);
        out.back().aux = 0.0;
        out.back().min_margin = std::numeric_limits<double>::infinity();
        slot = &out.back();
      }
      for (std::size_t i = 0; i < lr.load.size(); ++i) {
        slot->load[i] += lr.load[i];
        slot->importance[i] += lr.importance[i];
        slot->load_img[i] += lr.load_img[i];
        slot->load_txt[i] += lr.load_txt[i];
      }
      slot->aux += lr.aux;
      // the margin is a worst-case diagnostic, so passes combine by min, not mean
      slot->min_margin = std::min(slot->min_margin, lr.min_margin);
    }
  }
  const double inv = passes.empty() ? 1.0 : 1.0 / static_cast<double>(passes.size());
  for (LayerRouting& o : out) {
    for (double& v : o.load) v *= inv;
    for (double& v : o.importance) v *= inv;
    for (double& v : o.load_img) v *= inv;
    for (double& v : o.load_txt) v *= inv;
    o.aux *= inv;
  }
  return out;
}

}  // namespace

MaskPlan sample_masks(const ModelConfig& cfg, const shapeworld::Batch& batch, std::uint64_t seed,
                      std::int64_t step) {
  check_batch(cfg, batch);
  MaskPlan plan;
  plan.img.resize(static_cast<std::size_t>(batch.B));
  plan.txt.resize(static_cast<std::size_t>(batch.B));
  Rng base = Rng::from_seed(seed).stream("masks").derive(step);
  for (int s = 0; s < batch.B; ++s) {
    Rng rs = base.derive(s);
    const int n_img = clamp_count(cfg.mask_ratio_img, batch.N, batch.N - 1);
    Rng ri = rs.stream("img");
    plan.img[static_cast<std::size_t>(s)] = ri.sample_without_replacement(batch.N, n_img);

    int valid = 0;
    for (int j = 0; j < batch.n; ++j) {
      valid += batch.token_valid[static_cast<std::size_t>(s) * batch.n + j] ? 1 : 0;
    }
    if (valid < 1) throw std::invalid_argument("sample has an empty caption");
    const int n_txt = clamp_count(cfg.mask_ratio_txt, valid, valid);
    Rng rt = rs.stream("txt");
    plan.txt[static_cast<std::size_t>(s)] = rt.sample_without_replacement(valid, n_txt);
  }
  return plan;
}

PassOut run_mim(const EveModel& m, const shapeworld::Batch& batch, const MaskPlan& plan) {
  check_batch(m.config(), batch);
  FusedPass fp = encode_fused(m, batch, &plan, /*mask_img=*/true, /*mask_txt=*/false);
  PassOut out;
  mim_loss_into(m, fp, batch, plan, out);
  out.aux = fp.enc.aux;
  out.routing = fp.enc.routing;
  return out;
}

PassOut run_mlm(const EveModel& m, const shapeworld::Batch& batch, const MaskPlan& plan) {
  check_batch(m.config(), batch);
  FusedPass fp = encode_fused(m, batch, &plan, /*mask_img=*/false, /*mask_txt=*/true);
  PassOut out;
  mlm_loss_into(m, fp, batch, plan, out);
  out.aux = fp.enc.aux;
  out.routing = fp.enc.routing;
  return out;
}

StepLosses msm_step(const EveModel& m, const shapeworld::Batch& batch, const MaskPlan& plan) {
  check_batch(m.config(), batch);
  const ModelConfig& cfg = m.config();
  StepLosses out;

  // hidden-signal passes (shared encoding in the simultaneous variant)
  std::vector<Tensor> losses;
  std::vector<Tensor> auxes;
  std::vector<std::vector<LayerRouting>> routings;
  if (cfg.simultaneous_masking) {
    FusedPass fp = encode_fused(m, batch, &plan, /*mask_img=*/true, /*mask_txt=*/true);
    PassOut mim, mlm;
    mim_loss_into(m, fp, batch, plan, mim);
    mlm_loss_into(m, fp, batch, plan, mlm);
    out.mim = mim.loss.item();
    out.mlm = mlm.loss.item();
    losses = {mlm.loss, mim.loss};
    auxes = {fp.enc.aux};
    routings = {fp.enc.routing};
  } else {
    PassOut mim = run_mim(m, batch, plan);
    PassOut mlm = run_mlm(m, batch, plan);
    out.mim = mim.loss.item();
    out.mlm = mlm.loss.item();
    losses = {mlm.loss, mim.loss};
    auxes = {mim.aux, mlm.aux};
    routings = {mim.routing, mlm.routing};
  }

  // optional retrieval heads join the same step
  if (cfg.enable_itc) {
    PassOut itc = itc_pass(m, batch);
    out.itc = itc.loss.item();
    losses.push_back(itc.loss);
    auxes.push_back(itc.aux);
    routings.push_back(itc.routing);
  }
  if (cfg.enable_itm) {
    PassOut itm = itm_pass(m, batch);
    out.itm = itm.loss.item();
    losses.push_back(itm.loss);
    auxes.push_back(itm.aux);
    routings.push_back(itm.routing);
  }

  Tensor aux = auxes[0];
  for (std::size_t i = 1; i < auxes.size(); ++i) aux = add(aux, auxes[i]);
  aux = scalar_mul(aux, 1.0 / static_cast<double>(auxes.size()));
  out.aux = aux.item();
  out.routing = average_routing(routings);

  Tensor total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  out.total = add(total, aux);
  return out;
}

Tensor itc_from_cls(const Tensor& img_cls, const Tensor& txt_cls, const Tensor& temp) {
  const int b = static_cast<int>(img_cls.dim(0));
  if (b < 2) throw std::invalid_argument("contrastive loss needs a batch of at least 2");
  if (txt_cls.dim(0) != b) throw std::invalid_argument("contrastive batch sizes differ");
  Tensor sim = matmul(l2_normalize_rows(img_cls), transpose2d(l2_normalize_rows(txt_cls)));
  Tensor scaled = mul_scalar_tensor(sim, recip(temp));
  std::vector<int> diag(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) diag[static_cast<std::size_t>(i)] = i;
  const std::vector<double> w(static_cast<std::size_t>(b), 1.0);
  Tensor i2t = cross_entropy_rows(scaled, diag, w);
  Tensor t2i = cross_entropy_rows(transpose2d(scaled), diag, w);
  return scalar_mul(add(i2t, t2i), 0.5);
}

EncodeResult encode_image_only(const EveModel& m, const shapeworld::Batch& batch) {
  check_batch(m.config(), batch);
  const int pdim = batch.P * batch.P * batch.C;
  Tensor patches = Tensor::from_floats({batch.B * batch.N, pdim}, batch.patches,
                                       m.config().compute_dtype());
  SeqBatch img = embed_image(m, patches, batch.B, {});
  return encoder_forward(m, img);
}

EncodeResult encode_text_only(const EveModel& m, const shapeworld::Batch& batch) {
  check_batch(m.config(), batch);
  std::vector<int> ids(batch.token_ids.begin(), batch.token_ids.end());
  SeqBatch txt = embed_text(m, ids, batch.B);
  return encoder_forward(m, txt);
}

std::vector<int> cls_rows(int b, int len) {
  std::vector<int> rows(static_cast<std::size_t>(b));
  for (int s = 0; s < b; ++s) rows[static_cast<std::size_t>(s)] = s * len;
  return rows;
}

PassOut itc_pass(const EveModel& m, const shapeworld::Batch& batch) {
  if (!m.itc_temp.defined()) throw std::logic_error("model was built without the contrastive head");
  if (batch.B < 2) throw std::invalid_argument("contrastive loss needs a batch of at least 2");
  EncodeResult img = encode_image_only(m, batch);
  EncodeResult txt = encode_text_only(m, batch);
  const int img_len = m.config().patches_per_image() + 1;
  const int txt_len = m.config().max_tokens + 1;
  Tensor icls = gather_rows(img.states, cls_rows(batch.B, img_len));
  Tensor tcls = gather_rows(txt.states, cls_rows(batch.B, txt_len));
  PassOut out;
  out.loss = itc_from_cls(icls, tcls, m.itc_temp);
  out.aux = scalar_mul(add(img.aux, txt.aux), 0.5);
  out.routing = average_routing({img.routing, txt.routing});
  return out;
}

PassOut itm_pass(const EveModel& m, const shapeworld::Batch& batch) {
  if (!m.itm_w.defined()) throw std::logic_error("model was built without the matching head");
  if (batch.B < 2) throw std::invalid_argument("matching loss needs a batch of at least 2");
  const ModelConfig& cfg = m.config();
  const int b = batch.B;
  const int pdim = batch.P * batch.P * batch.C;

  // 2b fused pairs: b positives, then b negatives pairing each caption with
  // the next sample's image.
  std::vector<float> patches2(batch.patches.size() * 2);
  std::copy(batch.patches.begin(), batch.patches.end(), patches2.begin());
  const std::size_t per = static_cast<std::size_t>(batch.N) * pdim;
  for (int s = 0; s < b; ++s) {
    const int src = (s + 1) % b;
    std::copy(batch.patches.begin() + static_cast<std::ptrdiff_t>(src * per),
              batch.patches.begin() + static_cast<std::ptrdiff_t>((src + 1) * per),
              patches2.begin() + static_cast<std::ptrdiff_t>((b + s) * per));
  }
  std::vector<int> ids2(static_cast<std::size_t>(2 * b) * batch.n);
  for (int s = 0; s < 2 * b; ++s) {
    const int src = s % b;
    for (int j = 0; j < batch.n; ++j) {
      ids2[static_cast<std::size_t>(s) * batch.n + j] =
          batch.token_ids[static_cast<std::size_t>(src) * batch.n + j];
    }
  }

  Tensor patches = Tensor::from_floats({2 * b * batch.N, pdim}, patches2, cfg.compute_dtype());
  SeqBatch img = embed_image(m, patches, 2 * b, {});
  SeqBatch txt = embed_text(m, ids2, 2 * b);
  SeqBatch fused = concat_seq(img, txt);
  EncodeResult enc = encoder_forward(m, fused);

  // Text CLS of sample s sits at position img.len within its block.
  std::vector<int> rows(static_cast<std::size_t>(2 * b));
  for (int s = 0; s < 2 * b; ++s) rows[static_cast<std::size_t>(s)] = s * fused.len + img.len;
  Tensor logits = add_bias(matmul(gather_rows(enc.states, rows), m.itm_w), m.itm_b);
  std::vector<double> labels(static_cast<std::size_t>(2 * b), 0.0);
  for (int s = 0; s < b; ++s) labels[static_cast<std::size_t>(s)] = 1.0;

  PassOut out;
  out.loss = bce_with_logits(logits, labels);
  out.aux = enc.aux;
  out.routing = enc.routing;
  return out;
}

StepLosses contrastive_step(const EveModel& m, const shapeworld::Batch& batch) {
  PassOut itc = itc_pass(m, batch);
  PassOut itm = itm_pass(m, batch);
  Tensor aux = scalar_mul(add(itc.aux, itm.aux), 0.5);
  StepLosses out;
  out.itc = itc.loss.item();
  out.itm = itm.loss.item();
  out.aux = aux.item();
  out.routing = average_routing({itc.routing, itm.routing});
  out.total = add(add(itc.loss, itm.loss), aux);
  return out;
}

}  // namespace eve
