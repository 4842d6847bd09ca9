#include "eve/model.hpp"

#include <cmath>
#include <stdexcept>

#include "eve/rng.hpp"

namespace eve {

namespace {
constexpr double kInitSigma = 0.02;
}

Tensor EveModel::reg(const std::string& name, std::vector<int> shape, bool decay, double sigma,
                     double scale) {
  Tensor t = Tensor::zeros(shape, dt_, /*requires_grad=*/true);
  if (sigma > 0.0) {
    Rng rng = Rng::from_seed(init_seed_).stream("init").stream(name);
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      t.set_flat(i, rng.trunc_normal(sigma) * scale);
    }
  }
  params_.push_back(Param{name, t, decay});
  return t;
}

Tensor EveModel::reg_const(const std::string& name, std::vector<int> shape, bool decay,
                           double value) {
  Tensor t = Tensor::zeros(shape, dt_, /*requires_grad=*/true);
  if (value != 0.0) {
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) t.set_flat(i, value);
  }
  params_.push_back(Param{name, t, decay});
  return t;
}

LayerParams EveModel::make_block(const std::string& prefix, FfnMode mode, int experts_n, int top_k,
                                 int dim, int hidden, int depth_for_scale) {
  LayerParams lp;
  lp.mode = mode;
  lp.top_k = top_k;
  const double out_scale = 1.0 / std::sqrt(2.0 * std::max(1, depth_for_scale));

  lp.attn.ln_g = reg_const(prefix + ".ln1.g", {dim}, false, 1.0);
  lp.attn.ln_b = reg_const(prefix + ".ln1.b", {dim}, false, 0.0);
  lp.attn.wq = reg(prefix + ".attn.wq", {dim, dim}, true, kInitSigma);
  lp.attn.bq = reg_const(prefix + ".attn.bq", {dim}, false, 0.0);
  lp.attn.wk = reg(prefix + ".attn.wk", {dim, dim}, true, kInitSigma);
  lp.attn.bk = reg_const(prefix + ".attn.bk", {dim}, false, 0.0);
  lp.attn.wv = reg(prefix + ".attn.wv", {dim, dim}, true, kInitSigma);
  lp.attn.bv = reg_const(prefix + ".attn.bv", {dim}, false, 0.0);
  lp.attn.wo = reg(prefix + ".attn.wo", {dim, dim}, true, kInitSigma, out_scale);
  lp.attn.bo = reg_const(prefix + ".attn.bo", {dim}, false, 0.0);

  lp.ln2_g = reg_const(prefix + ".ln2.g", {dim}, false, 1.0);
  lp.ln2_b = reg_const(prefix + ".ln2.b", {dim}, false, 0.0);

  const int n_experts = (mode == FfnMode::Shared) ? 1 : experts_n;
  lp.experts.reserve(static_cast<std::size_t>(n_experts));
  for (int e = 0; e < n_experts; ++e) {
    const std::string ep = (mode == FfnMode::Shared)
                               ? prefix + ".ffn"
                               : prefix + ".expert" + std::to_string(e);
    ExpertParams xp;
    xp.w1 = reg(ep + ".w1", {dim, hidden}, true, kInitSigma);
    xp.b1 = reg_const(ep + ".b1", {hidden}, false, 0.0);
    xp.w2 = reg(ep + ".w2", {hidden, dim}, true, kInitSigma, out_scale);
    xp.b2 = reg_const(ep + ".b2", {dim}, false, 0.0);
    lp.experts.push_back(xp);
  }

  if (mode == FfnMode::Soft) {
    lp.router.w = reg(prefix + ".router.w", {dim, experts_n}, true, kInitSigma);
    if (cfg_.modality_bias) {
      lp.router.b_img = reg_const(prefix + ".router.b_img", {dim}, false, 0.0);
      lp.router.b_txt = reg_const(prefix + ".router.b_txt", {dim}, false, 0.0);
    }
  }
  return lp;
}

EveModel::EveModel(const ModelConfig& cfg, int vocab_size, std::uint64_t init_seed)
    : cfg_(cfg), vocab_(vocab_size), init_seed_(init_seed), dt_(cfg.compute_dtype()) {
  if (vocab_size < 4) throw std::invalid_argument("vocab size must cover PAD/CLS/MASK plus words");
  const int d = cfg_.dim;
  const int n_patches = cfg_.patches_per_image();
  const int pdim = cfg_.patch_dim();
  const int hidden = cfg_.ffn_mult * d;

  patch_w = reg("embed.patch.w", {pdim, d}, true, kInitSigma);
  patch_b = reg_const("embed.patch.b", {d}, false, 0.0);
  token_emb = reg("embed.token", {vocab_, d}, true, kInitSigma);
  i_cls = reg("embed.i_cls", {d}, true, kInitSigma);
  t_cls = reg("embed.t_cls", {d}, true, kInitSigma);
  i_type = reg("embed.i_type", {d}, true, kInitSigma);
  t_type = reg("embed.t_type", {d}, true, kInitSigma);
  i_pos = reg("embed.i_pos", {n_patches + 1, d}, true, kInitSigma);
  t_pos = reg("embed.t_pos", {cfg_.max_tokens + 1, d}, true, kInitSigma);

  const std::vector<LayerSpec> specs = cfg_.layer_specs();
  layers.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    layers.push_back(make_block("layer" + std::to_string(i), s.mode, s.experts, s.top_k, d, hidden,
                                cfg_.depth));
  }
  final_ln_g = reg_const("final_ln.g", {d}, false, 1.0);
  final_ln_b = reg_const("final_ln.b", {d}, false, 0.0);

  const int dd = cfg_.dec_dim;
  dec.proj_w = reg("dec.proj.w", {d, dd}, true, kInitSigma);
  dec.proj_b = reg_const("dec.proj.b", {dd}, false, 0.0);
  dec.mask_token = reg("dec.mask_token", {dd}, true, kInitSigma);
  dec.pos = reg("dec.pos", {n_patches + 1, dd}, true, kInitSigma);
  dec.blocks.reserve(static_cast<std::size_t>(cfg_.dec_depth));
  for (int i = 0; i < cfg_.dec_depth; ++i) {
    dec.blocks.push_back(make_block("dec.layer" + std::to_string(i), FfnMode::Shared, 1, 1, dd,
                                    cfg_.ffn_mult * dd, cfg_.dec_depth));
  }
  dec.ln_g = reg_const("dec.ln.g", {dd}, false, 1.0);
  dec.ln_b = reg_const("dec.ln.b", {dd}, false, 0.0);
  dec.head_w = reg("dec.head.w", {dd, pdim}, true, kInitSigma);
  dec.head_b = reg_const("dec.head.b", {pdim}, false, 0.0);

  mlm_w1 = reg("mlm.w1", {d, d}, true, kInitSigma);
  mlm_b1 = reg_const("mlm.b1", {d}, false, 0.0);
  mlm_w2 = reg("mlm.w2", {d, vocab_}, true, kInitSigma);
  mlm_b2 = reg_const("mlm.b2", {vocab_}, false, 0.0);

  if (cfg_.enable_itc) {
    itc_temp = reg_const("itc.temp", {1}, false, 0.07);
  }
  if (cfg_.enable_itm) {
    itm_w = reg("itm.w", {d, 1}, true, kInitSigma);
    itm_b = reg_const("itm.b", {1}, false, 0.0);
  }
}

const Param& EveModel::param(const std::string& name) const {
  for (const Param& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

std::int64_t EveModel::param_count() const {
  std::int64_t n = 0;
  for (const Param& p : params_) n += p.tensor.numel();
  return n;
}

}  // namespace eve
