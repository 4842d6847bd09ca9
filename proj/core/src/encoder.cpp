#include "eve/encoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "eve/shapeworld.hpp"

namespace eve {

namespace {

// Interleaves per-sample blocks: row s*len + p of the result takes row
// block_row(s, p) of `cat`.
template <typename Fn>
Tensor interleave(const Tensor& cat, int b, int len, Fn block_row) {
  std::vector<int> order(static_cast<std::size_t>(b) * len);
  for (int s = 0; s < b; ++s) {
    for (int p = 0; p < len; ++p) {
      order[static_cast<std::size_t>(s) * len + p] = block_row(s, p);
    }
  }
  return gather_rows(cat, order);
}

}  // namespace

SeqBatch embed_image(const EveModel& m, const Tensor& patches, int b,
                     const std::vector<std::vector<int>>& keep) {
  const ModelConfig& cfg = m.config();
  const int n_patches = cfg.patches_per_image();
  const int pdim = cfg.patch_dim();
  const int d = cfg.dim;
  if (b <= 0) throw std::invalid_argument("embed_image: batch must be positive");
  if (patches.rank() != 2 || patches.dim(0) != static_cast<std::int64_t>(b) * n_patches ||
      patches.dim(1) != pdim) {
    throw std::invalid_argument("embed_image: patches must be (batch*" +
                                std::to_string(n_patches) + ", " + std::to_string(pdim) +
                                "), got " + shape_str(patches.shape()));
  }
  if (!keep.empty() && static_cast<int>(keep.size()) != b) {
    throw std::invalid_argument("embed_image: keep lists must cover every sample");
  }

  const int kcount = keep.empty() ? n_patches : static_cast<int>(keep[0].size());
  if (kcount < 1 || kcount > n_patches) {
    throw std::invalid_argument("embed_image: visible patch count out of range");
  }

  Tensor kept = patches;
  std::vector<int> pos_idx;
  pos_idx.reserve(static_cast<std::size_t>(b) * kcount);
  if (keep.empty()) {
    for (int s = 0; s < b; ++s) {
      for (int j = 0; j < n_patches; ++j) pos_idx.push_back(j + 1);
    }
  } else {
    std::vector<int> flat;
    flat.reserve(static_cast<std::size_t>(b) * kcount);
    for (int s = 0; s < b; ++s) {
      if (static_cast<int>(keep[s].size()) != kcount) {
        throw std::invalid_argument("embed_image: keep lists must have equal lengths");
      }
      int prev = -1;
      for (int j : keep[s]) {
        if (j <= prev || j >= n_patches) {
          throw std::invalid_argument("embed_image: keep indices must be ascending and in range");
        }
        prev = j;
        flat.push_back(s * n_patches + j);
        pos_idx.push_back(j + 1);
      }
    }
    kept = gather_rows(patches, flat);
  }

  Tensor proj = add_bias(matmul(kept, m.patch_w), m.patch_b);
  proj = add(proj, gather_rows(m.i_pos, pos_idx));
  Tensor cls = tile_rows(add(reshape(m.i_cls, {1, d}), slice(m.i_pos, 0, 0, 1)), b);

  const int len = kcount + 1;
  Tensor cat = concat({cls, proj}, 0);
  Tensor seq = interleave(cat, b, len, [&](int s, int p) {
    return p == 0 ? s : b + s * kcount + (p - 1);
  });

  SeqBatch sb;
  sb.x = add_bias(seq, m.i_type);
  sb.b = b;
  sb.len = len;
  sb.valid.assign(static_cast<std::size_t>(b) * len, 1);
  sb.tags.assign(static_cast<std::size_t>(b) * len, Tag::Image);
  return sb;
}

SeqBatch embed_text(const EveModel& m, const std::vector<int>& ids, int b) {
  const ModelConfig& cfg = m.config();
  const int n = cfg.max_tokens;
  const int d = cfg.dim;
  if (b <= 0) throw std::invalid_argument("embed_text: batch must be positive");
  if (ids.size() != static_cast<std::size_t>(b) * n) {
    throw std::invalid_argument("embed_text: expected batch*" + std::to_string(n) +
                                " token ids, got " + std::to_string(ids.size()));
  }
  for (int id : ids) {
    if (id < 0 || id >= m.vocab()) {
      throw std::out_of_range("embed_text: token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(m.vocab()));
    }
  }

  Tensor tok = gather_rows(m.token_emb, ids);
  std::vector<int> pos_idx(static_cast<std::size_t>(b) * n);
  for (int s = 0; s < b; ++s) {
    for (int j = 0; j < n; ++j) pos_idx[static_cast<std::size_t>(s) * n + j] = j + 1;
  }
  tok = add(tok, gather_rows(m.t_pos, pos_idx));
  Tensor cls = tile_rows(add(reshape(m.t_cls, {1, d}), slice(m.t_pos, 0, 0, 1)), b);

  const int len = n + 1;
  Tensor cat = concat({cls, tok}, 0);
  Tensor seq = interleave(cat, b, len, [&](int s, int p) {
    return p == 0 ? s : b + s * n + (p - 1);
  });

  SeqBatch sb;
  sb.x = add_bias(seq, m.t_type);
  sb.b = b;
  sb.len = len;
  sb.valid.resize(static_cast<std::size_t>(b) * len);
  sb.tags.assign(static_cast<std::size_t>(b) * len, Tag::Text);
  for (int s = 0; s < b; ++s) {
    sb.valid[static_cast<std::size_t>(s) * len] = 1;  // CLS
    for (int j = 0; j < n; ++j) {
      sb.valid[static_cast<std::size_t>(s) * len + 1 + j] =
          ids[static_cast<std::size_t>(s) * n + j] != shapeworld::Vocab::kPad ? 1 : 0;
    }
  }
  return sb;
}

SeqBatch concat_seq(const SeqBatch& img, const SeqBatch& txt) {
  if (img.b != txt.b) throw std::invalid_argument("concat_seq: batch sizes differ");
  const int b = img.b;
  const int li = img.len;
  const int lt = txt.len;
  const int len = li + lt;

  Tensor cat = concat({img.x, txt.x}, 0);
  SeqBatch sb;
  sb.x = interleave(cat, b, len, [&](int s, int p) {
    return p < li ? s * li + p : b * li + s * lt + (p - li);
  });
  sb.b = b;
  sb.len = len;
  sb.valid.resize(static_cast<std::size_t>(b) * len);
  sb.tags.resize(static_cast<std::size_t>(b) * len);
  for (int s = 0; s < b; ++s) {
    for (int p = 0; p < len; ++p) {
      const std::size_t dst = static_cast<std::size_t>(s) * len + p;
      if (p < li) {
        sb.valid[dst] = img.valid[static_cast<std::size_t>(s) * li + p];
        sb.tags[dst] = img.tags[static_cast<std::size_t>(s) * li + p];
      } else {
        sb.valid[dst] = txt.valid[static_cast<std::size_t>(s) * lt + (p - li)];
        sb.tags[dst] = txt.tags[static_cast<std::size_t>(s) * lt + (p - li)];
      }
    }
  }
  return sb;
}

namespace {

Tensor attention(const Tensor& x, const AttnParams& ap, const SeqBatch& sb, int heads) {
  const int b = sb.b;
  const int len = sb.len;
  const int d = static_cast<int>(x.dim(1));
  if (d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  const int dh = d / heads;

  Tensor h = layer_norm(x, ap.ln_g, ap.ln_b);
  Tensor q = add_bias(matmul(h, ap.wq), ap.bq);
  Tensor k = add_bias(matmul(h, ap.wk), ap.bk);
  Tensor v = add_bias(matmul(h, ap.wv), ap.bv);

  q = permute(reshape(q, {b, len, heads, dh}), {0, 2, 1, 3});   // (b, h, len, dh)
  Tensor kt = permute(reshape(k, {b, len, heads, dh}), {0, 2, 3, 1});  // (b, h, dh, len)
  v = permute(reshape(v, {b, len, heads, dh}), {0, 2, 1, 3});

  Tensor scores = scalar_mul(bmm(q, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  scores = mask_invalid_keys(scores, sb.valid, b);
  Tensor att = bmm(softmax(scores, 3), v);  // (b, h, len, dh)
  att = reshape(permute(att, {0, 2, 1, 3}), {b * len, d});
  return add_bias(matmul(att, ap.wo), ap.bo);
}

}  // namespace

Tensor block_forward(const Tensor& x, const LayerParams& lp, const SeqBatch& sb, int heads,
                     double alpha, bool modality_bias, LayerRouting* stats, Tensor* aux_out) {
  Tensor a = add(x, attention(x, lp.attn, sb, heads));
  Tensor h = layer_norm(a, lp.ln2_g, lp.ln2_b);
  Tensor y;
  switch (lp.mode) {
    case FfnMode::Shared:
      y = moe::ffn_forward(h, lp.experts[0]);
      break;
    case FfnMode::Hard:
      y = moe::hard_route(h, lp, sb.tags);
      break;
    case FfnMode::Soft: {
      LayerRouting local;
      Tensor gates = moe::gate_probs(h, lp, sb.tags, modality_bias);
      y = moe::dispatch_combine(h, gates, lp, lp.top_k, sb.tags, &local);
      Tensor aux = moe::aux_loss(gates, local.load, alpha);
      local.aux = aux.item();
      if (stats) *stats = local;
      if (aux_out) *aux_out = aux;
      break;
    }
  }
  return add(a, y);
}

EncodeResult encoder_forward(const EveModel& m, const SeqBatch& in) {
  const ModelConfig& cfg = m.config();
  EncodeResult res;
  Tensor x = in.x;
  std::vector<Tensor> auxes;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const bool soft = m.layers[i].mode == FfnMode::Soft;
    LayerRouting st;
    Tensor aux;
    x = block_forward(x, m.layers[i], in, cfg.heads, cfg.aux_alpha, cfg.modality_bias,
                      soft ? &st : nullptr, soft ? &aux : nullptr);
    if (soft) {
      st.layer = static_cast<int>(i);
      res.routing.push_back(st);
      auxes.push_back(aux);
    }
  }
  if (!m.layers.empty()) x = layer_norm(x, m.final_ln_g, m.final_ln_b);
  res.states = x;
  if (auxes.empty()) {
    res.aux = Tensor::zeros({1}, x.dtype(), /*requires_grad=*/false);
  } else {
    Tensor s = auxes[0];
    for (std::size_t j = 1; j < auxes.size(); ++j) s = add(s, auxes[j]);
    res.aux = scalar_mul(s, 1.0 / static_cast<double>(auxes.size()));
  }
  return res;
}

Tensor decoder_forward(const EveModel& m, const Tensor& x, int b) {
  const ModelConfig& cfg = m.config();
  const int len = cfg.patches_per_image() + 1;
  if (x.rank() != 2 || x.dim(0) != static_cast<std::int64_t>(b) * len ||
      x.dim(1) != cfg.dec_dim) {
    throw std::invalid_argument("decoder_forward: expected (batch*" + std::to_string(len) + ", " +
                                std::to_string(cfg.dec_dim) + "), got " + shape_str(x.shape()));
  }
  SeqBatch meta;
  meta.b = b;
  meta.len = len;
  meta.valid.assign(static_cast<std::size_t>(b) * len, 1);
  meta.tags.assign(static_cast<std::size_t>(b) * len, Tag::Image);

  Tensor h = x;
  for (const LayerParams& blk : m.dec.blocks) {
    h = block_forward(h, blk, meta, cfg.heads, 0.0, false, nullptr, nullptr);
  }
  if (!m.dec.blocks.empty()) h = layer_norm(h, m.dec.ln_g, m.dec.ln_b);
  return h;
}

}  // namespace eve
