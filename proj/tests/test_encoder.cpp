#include <cmath>
#include <cstring>
#include <set>
#include <vector>

#include "doctest.h"
#include "eve/encoder.hpp"
#include "eve/model.hpp"
#include "eve/ops.hpp"
#include "eve/rng.hpp"
#include "eve/shapeworld.hpp"

using namespace eve;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.image_size = 32;  // 16 patches of 8x8
  cfg.patch = 8;
  cfg.max_tokens = 8;
  cfg.dim = 32;
  cfg.heads = 4;
  cfg.depth = 2;
  cfg.ffn_mult = 2;
  cfg.layers = "1:hard,2:soft";
  cfg.experts = 4;
  cfg.top_k = 2;
  cfg.dec_dim = 16;
  cfg.dec_depth = 1;
  validate(cfg);
  return cfg;
}

shapeworld::Batch small_batch(const ModelConfig& cfg, int b, std::uint64_t seed = 5) {
  shapeworld::Vocab v;
  shapeworld::CorpusOptions opt;
  opt.image_size = cfg.image_size;
  opt.max_tokens = cfg.max_tokens;
  shapeworld::Corpus corpus = shapeworld::generate_corpus(b, seed, opt);
  std::vector<const shapeworld::Sample*> ptrs;
  for (const auto& s : corpus.samples) ptrs.push_back(&s);
  return shapeworld::make_batch(ptrs, cfg.image_size, cfg.image_size, cfg.max_tokens, cfg.patch);
}

Tensor batch_patches(const ModelConfig& cfg, const shapeworld::Batch& batch) {
  return Tensor::from_floats({batch.B * batch.N, batch.P * batch.P * batch.C}, batch.patches,
                             cfg.compute_dtype());
}

}  // namespace

TEST_CASE("parameter registry: determinism, names and decay policy") {
  ModelConfig cfg = small_cfg();
  shapeworld::Vocab v;
  EveModel a(cfg, v.size(), 9);
  EveModel b(cfg, v.size(), 9);
  EveModel c(cfg, v.size(), 10);

  REQUIRE(a.params().size() == b.params().size());
  bool any_diff_c = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& pa = a.params()[i];
    const auto& pb = b.params()[i];
    CHECK(pa.name == pb.name);
    CHECK(pa.tensor.shape() == pb.tensor.shape());
    for (std::int64_t j = 0; j < pa.tensor.numel(); ++j) {
      REQUIRE(pa.tensor.flat(j) == pb.tensor.flat(j));
    }
    const auto& pc = c.params()[i];
    for (std::int64_t j = 0; j < pa.tensor.numel(); ++j) {
      any_diff_c = any_diff_c || pa.tensor.flat(j) != pc.tensor.flat(j);
    }
  }
  CHECK(any_diff_c);  // a different seed draws different weights

  // decay policy: norms, biases and the temperature are exempt
  for (const auto& p : a.params()) {
    const std::string& n = p.name;
    const bool is_norm = n.find(".ln") != std::string::npos || n.find("_ln") != std::string::npos;
    const bool is_bias = n.size() >= 2 && (n.rfind(".b") == n.size() - 2) &&
                         n.find(".b_img") == std::string::npos;
    const bool is_vec_bias =
        n.rfind(".b1") != std::string::npos || n.rfind(".b2") != std::string::npos ||
        n.rfind(".bq") != std::string::npos || n.rfind(".bk") != std::string::npos ||
        n.rfind(".bv") != std::string::npos || n.rfind(".bo") != std::string::npos;
    if (is_norm || is_bias || is_vec_bias) {
      CHECK_MESSAGE(!p.decay, n);
    }
  }
  CHECK(a.param("embed.patch.w").decay);
  CHECK(a.param("layer1.router.b_img").decay == false);
  CHECK_THROWS_AS(a.param("no.such.param"), std::out_of_range);
  CHECK(a.param_count() > 0);

  // output projections are scaled down relative to inputs
  auto stddev = [](const Tensor& t) {
    double m = 0.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) m += t.flat(i);
    m /= static_cast<double>(t.numel());
    double var = 0.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      var += (t.flat(i) - m) * (t.flat(i) - m);
    }
    return std::sqrt(var / static_cast<double>(t.numel()));
  };
  const double s_in = stddev(a.param("layer0.attn.wq").tensor);
  const double s_out = stddev(a.param("layer0.attn.wo").tensor);
  CHECK(s_out < s_in * 0.75);
  CHECK(s_out == doctest::Approx(0.02 / std::sqrt(2.0 * cfg.depth)).epsilon(0.25));
}

TEST_CASE("image embedding layout with and without masking") {
  ModelConfig cfg = small_cfg();
  shapeworld::Vocab v;
  EveModel m(cfg, v.size(), 1);
  const int b = 2;
  shapeworld::Batch batch = small_batch(cfg, b);
  Tensor patches = batch_patches(cfg, batch);

  SeqBatch full = embed_image(m, patches, b);
  CHECK(full.len == batch.N + 1);
  CHECK(full.x.dim(0) == b * (batch.N + 1));
  CHECK(full.x.dim(1) == cfg.dim);
  for (auto f : full.valid) CHECK(f == 1);
  for (auto t : full.tags) CHECK(t == Tag::Image);

  // visible-patch rows of a masked embedding equal the corresponding rows of
  // the full embedding, bit for bit
  std::vector<std::vector<int>> keep = {{0, 3, 7, 9}, {2, 3, 4, 15}};
  SeqBatch part = embed_image(m, patches, b, keep);
  CHECK(part.len == 5);
  for (int s = 0; s < b; ++s) {
    // CLS row
    for (int c = 0; c < cfg.dim; ++c) {
      REQUIRE(part.x.flat(static_cast<std::int64_t>(s) * 5 * cfg.dim + c) ==
              full.x.flat(static_cast<std::int64_t>(s) * (batch.N + 1) * cfg.dim + c));
    }
    for (int j = 0; j < 4; ++j) {
      const std::int64_t pr = (static_cast<std::int64_t>(s) * 5 + 1 + j) * cfg.dim;
      const std::int64_t fr =
          (static_cast<std::int64_t>(s) * (batch.N + 1) + 1 + keep[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)]) *
          cfg.dim;
      for (int c = 0; c < cfg.dim; ++c) REQUIRE(part.x.flat(pr + c) == full.x.flat(fr + c));
    }
  }

  CHECK_THROWS(embed_image(m, patches, b, {{3, 1}, {0, 1}}));   // not ascending
  CHECK_THROWS(embed_image(m, patches, b, {{0, 99}, {0, 1}}));  // out of range
  CHECK_THROWS(embed_image(m, patches, b, {{0, 1}}));           // missing sample
}

TEST_CASE("text embedding marks padding invalid") {
  ModelConfig cfg = small_cfg();
  shapeworld::Vocab v;
  EveModel m(cfg, v.size(), 1);
  // caption of 4 tokens, rest PAD
  std::vector<int> ids(static_cast<std::size_t>(cfg.max_tokens), shapeworld::Vocab::kPad);
  ids[0] = v.id("a");
  ids[1] = v.id("red");
  ids[2] = v.id("circle");
  ids[3] = v.id("above");
  SeqBatch txt = embed_text(m, ids, 1);
  CHECK(txt.len == cfg.max_tokens + 1);
  CHECK(txt.valid[0] == 1);  // CLS
  for (int j = 0; j < cfg.max_tokens; ++j) {
    CHECK(txt.valid[static_cast<std::size_t>(1 + j)] == (j < 4 ? 1 : 0));
  }
  for (auto t : txt.tags) CHECK(t == Tag::Text);
  CHECK_THROWS(embed_text(m, std::vector<int>(3, 0), 1));        // wrong length
  std::vector<int> bad = ids;
  bad[0] = v.size();
  CHECK_THROWS_AS(embed_text(m, bad, 1), std::out_of_range);     // unknown id
}

TEST_CASE("fused concat keeps image-first per-sample order") {
  ModelConfig cfg = small_cfg();
  shapeworld::Vocab v;
  EveModel m(cfg, v.size(), 1);
  const int b = 2;
  shapeworld::Batch batch = small_batch(cfg, b);
  SeqBatch img = embed_image(m, batch_patches(cfg, batch), b);
  std::vector<int> ids(batch.token_ids.begin(), batch.token_ids.end());
  SeqBatch txt = embed_text(m, ids, b);
  SeqBatch fused = concat_seq(img, txt);

  CHECK(fused.len == img.len + txt.len);
  CHECK(fused.b == b);
  for (int s = 0; s < b; ++s) {
    for (int p = 0; p < fused.len; ++p) {
      const std::size_t at = static_cast<std::size_t>(s) * fused.len + p;
      if (p < img.len) {
        CHECK(fused.tags[at] == Tag::Image);
        // image rows are bitwise the image embedding's rows
        for (int c = 0; c < cfg.dim; ++c) {
          REQUIRE(fused.x.flat(static_cast<std::int64_t>(at) * cfg.dim + c) ==
                  img.x.flat((static_cast<std::int64_t>(s) * img.len + p) * cfg.dim + c));
        }
      } else {
        CHECK(fused.tags[at] == Tag::Text);
        CHECK(fused.valid[at] == txt.valid[static_cast<std::size_t>(s) * txt.len + (p - img.len)]);
      }
    }
  }
}

TEST_CASE("encoder with zeroed output projections reduces to the final norm") {
  ModelConfig cfg = small_cfg();
  cfg.layers = "all:shared";
  shapeworld::Vocab v;
  EveModel m(cfg, v.size(), 3);
  for (auto& lp : m.layers) {
    for (std::int64_t i = 0; i < lp.attn.wo.numel(); ++i) lp.attn.wo.set_flat(i, 0.0);
    for (auto& e : lp.experts) {
      for (std::int64_t i = 0; i < e.w2.numel(); ++i) e.w2.set_flat(i, 0.0);
    }
  }
  const int b = 2;
  shapeworld::Batch batch = small_batch(cfg, b);
  SeqBatch img = embed_image(m, batch_patches(cfg, batch), b);
  EncodeResult enc = encoder_forward(m, img);
  Tensor expect = layer_norm(img.x, m.final_ln_g, m.final_ln_b);
  for (std::int64_t i = 0; i < expect.numel(); ++i) {
    REQUIRE(enc.states.flat(i) == expect.flat(i));
  }
  CHECK(enc.routing.empty());
  CHECK(enc.aux.item() == 0.0);
}

TEST_CASE("depth-zero encoder is the identity") {
  ModelConfig cfg = small_cfg();
  cfg.depth = 0;
  cfg.layers = "all:shared";
  validate(cfg);
  shapeworld::Vocab v;
  EveModel m(cfg, v.size(), 3);
  CHECK(m.layers.empty());
  shapeworld::Batch batch = small_batch(cfg, 2);
  SeqBatch img = embed_image(m, batch_patches(cfg, batch), 2);
  EncodeResult enc = encoder_forward(m, img);
  for (std::int64_t i = 0; i < img.x.numel(); ++i) {
    REQUIRE(enc.states.flat(i) == img.x.flat(i));
  }
}

TEST_CASE("padding rows never leak into other positions") {
  ModelConfig cfg = small_cfg();
  shapeworld::Vocab v;
  EveModel m(cfg, v.size(), 4);
  const int b = 2;
  shapeworld::Batch batch = small_batch(cfg, b);
  std::vector<int> ids(batch.token_ids.begin(), batch.token_ids.end());

  SeqBatch img = embed_image(m, batch_patches(cfg, batch), b);
  SeqBatch fused = concat_seq(img, embed_text(m, ids, b));
  EncodeResult before = encoder_forward(m, fused);

  // corrupt the PAD token's embedding row; only PAD positions may change
  Tensor pad_row = m.token_emb;
  for (int c = 0; c < cfg.dim; ++c) {
    pad_row.set_flat(static_cast<std::int64_t>(shapeworld::Vocab::kPad) * cfg.dim + c,
                     7.5 + c);
  }
  SeqBatch img2 = embed_image(m, batch_patches(cfg, batch), b);
  SeqBatch fused2 = concat_seq(img2, embed_text(m, ids, b));
  EncodeResult after = encoder_forward(m, fused2);

  REQUIRE(before.states.numel() == after.states.numel());
  bool pad_changed = false;
  for (int s = 0; s < b; ++s) {
    for (int p = 0; p < fused.len; ++p) {
      const std::size_t at = static_cast<std::size_t>(s) * fused.len + p;
      bool same = true;
      for (int c = 0; c < cfg.dim; ++c) {
        same = same &&
               before.states.flat(static_cast<std::int64_t>(at) * cfg.dim + c) ==
                   after.states.flat(static_cast<std::int64_t>(at) * cfg.dim + c);
      }
      if (fused.valid[at]) {
        REQUIRE_MESSAGE(same, "sample ", s, " position ", p, " changed");
      } else {
        pad_changed = pad_changed || !same;
      }
    }
  }
  CHECK(pad_changed);  // the PAD rows themselves did move
}

TEST_CASE("a shared layer equals a one-expert learned router bit for bit") {
  ModelConfig shared_cfg = small_cfg();
  shared_cfg.layers = "all:shared";
  ModelConfig soft_cfg = small_cfg();
  soft_cfg.layers = "all:soft";
  soft_cfg.experts = 1;
  soft_cfg.top_k = 1;
  validate(soft_cfg);

  shapeworld::Vocab v;
  EveModel a(shared_cfg, v.size(), 6);
  EveModel b(soft_cfg, v.size(), 6);

  // align b's weights with a's (names differ only at the FFN)
  for (const auto& pa : a.params()) {
    std::string name = pa.name;
    const std::string needle = ".ffn.";
    std::size_t at = name.find(needle);
    if (at != std::string::npos && name.rfind("dec.", 0) != 0) {
      name.replace(at, needle.size(), ".expert0.");  // decoder blocks stay shared
    }
    const Param& pb = b.param(name);
    REQUIRE(pb.tensor.numel() == pa.tensor.numel());
    for (std::int64_t i = 0; i < pa.tensor.numel(); ++i) {
      pb.tensor.set_flat(i, pa.tensor.flat(i));
    }
  }

  const int bsz = 2;
  shapeworld::Batch batch = small_batch(shared_cfg, bsz);
  SeqBatch img_a = embed_image(a, batch_patches(shared_cfg, batch), bsz);
  SeqBatch img_b = embed_image(b, batch_patches(soft_cfg, batch), bsz);
  EncodeResult ra = encoder_forward(a, img_a);
  EncodeResult rb = encoder_forward(b, img_b);
  REQUIRE(ra.states.numel() == rb.states.numel());
  for (std::int64_t i = 0; i < ra.states.numel(); ++i) {
    REQUIRE(ra.states.flat(i) == rb.states.flat(i));
  }
  // the degenerate router is perfectly balanced: aux = alpha * 1 * 1 * 1
  // (up to f32 rounding of the slot-count normalization)
  CHECK(rb.aux.item() == doctest::Approx(soft_cfg.aux_alpha).epsilon(1e-6));
}

TEST_CASE("forward passes are reproducible and report routing") {
  ModelConfig cfg = small_cfg();
  shapeworld::Vocab v;
  EveModel m(cfg, v.size(), 8);
  const int b = 3;
  shapeworld::Batch batch = small_batch(cfg, b);
  std::vector<int> ids(batch.token_ids.begin(), batch.token_ids.end());
  SeqBatch fused = concat_seq(embed_image(m, batch_patches(cfg, batch), b),
                              embed_text(m, ids, b));

  EncodeResult r1 = encoder_forward(m, fused);
  EncodeResult r2 = encoder_forward(m, fused);
  for (std::int64_t i = 0; i < r1.states.numel(); ++i) {
    REQUIRE(r1.states.flat(i) == r2.states.flat(i));
  }
  REQUIRE(r1.routing.size() == 1);  // layer 2 is the learned router
  const LayerRouting& lr = r1.routing[0];
  CHECK(lr.layer == 1);
  REQUIRE(lr.load.size() == static_cast<std::size_t>(cfg.experts));
  double fsum = 0.0;
  for (double f : lr.load) fsum += f;
  CHECK(fsum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(lr.aux == doctest::Approx(r1.aux.item()).epsilon(1e-12));

  // near-zero-init router: load close to uniform, aux close to alpha
  for (double f : lr.load) CHECK(f == doctest::Approx(1.0 / cfg.experts).epsilon(0.8));
  CHECK(r1.aux.item() == doctest::Approx(cfg.aux_alpha).epsilon(0.05));
}

TEST_CASE("decoder trunk runs and respects widths") {
  ModelConfig cfg = small_cfg();
  shapeworld::Vocab v;
  EveModel m(cfg, v.size(), 2);
  const int b = 2;
  const int dl = cfg.patches_per_image() + 1;
  Tensor x = Tensor::zeros({b * dl, cfg.dec_dim}, cfg.compute_dtype());
  Rng rng = Rng::from_seed(77);
  for (std::int64_t i = 0; i < x.numel(); ++i) x.set_flat(i, rng.normal() * 0.5);
  Tensor y = decoder_forward(m, x, b);
  CHECK(y.dim(0) == b * dl);
  CHECK(y.dim(1) == cfg.dec_dim);
  CHECK_THROWS(decoder_forward(m, Tensor::zeros({5, cfg.dec_dim}), b));
}
