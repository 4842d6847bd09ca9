#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eve/config.hpp"
#include "eve/tensor.hpp"

namespace eve {

// Per-position modality of the concatenated sequence.
enum class Tag : std::uint8_t { Image = 0, Text = 1 };

struct Param {
  std::string name;
  Tensor tensor;
  bool decay = true;  // layer-norm parameters and biases are exempt
};

struct AttnParams {
  Tensor ln_g, ln_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct ExpertParams {
  Tensor w1, b1;  // D x (mult*D)
  Tensor w2, b2;  // (mult*D) x D
};

struct RouterParams {
  Tensor w;              // D x N gating matrix
  Tensor b_img, b_txt;   // modality embeddings, init zero
};

struct LayerParams {
  FfnMode mode = FfnMode::Shared;
  int top_k = 1;
  AttnParams attn;
  Tensor ln2_g, ln2_b;
  std::vector<ExpertParams> experts;
  RouterParams router;  // populated only in Soft mode
};

struct DecoderParams {
  Tensor proj_w, proj_b;  // D -> D_dec
  Tensor mask_token;      // (D_dec)
  Tensor pos;             // (N+1) x D_dec
  std::vector<LayerParams> blocks;  // Shared-FFN blocks at width D_dec
  Tensor ln_g, ln_b;
  Tensor head_w, head_b;  // D_dec -> P*P*3
};

// All learnable state of the model plus a stable, named parameter registry.
// Construction draws every initial value from seed-derived streams keyed by
// parameter name, so two models built from (config, seed) are identical.
class EveModel {
 public:
  EveModel(const ModelConfig& cfg, int vocab_size, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  int vocab() const { return vocab_; }

  // Embedding tables (Eq. 1-3 parameters).
  Tensor patch_w, patch_b;  // (P*P*3) x D, (D)
  Tensor token_emb;         // V x D
  Tensor i_cls, t_cls;      // (D)
  Tensor i_type, t_type;    // (D)
  Tensor i_pos;             // (N+1) x D
  Tensor t_pos;             // (n+1) x D

  std::vector<LayerParams> layers;
  Tensor final_ln_g, final_ln_b;

  DecoderParams dec;

  Tensor mlm_w1, mlm_b1;  // D x D
  Tensor mlm_w2, mlm_b2;  // D x V

  // Optional heads (allocated only when the config enables them).
  Tensor itc_temp;        // scalar temperature, init 0.07
  Tensor itm_w, itm_b;    // D x 1, (1)

  const std::vector<Param>& params() const { return params_; }
  const Param& param(const std::string& name) const;  // throws if unknown
  std::int64_t param_count() const;

 private:
  Tensor reg(const std::string& name, std::vector<int> shape, bool decay, double sigma,
             double scale = 1.0);
  Tensor reg_const(const std::string& name, std::vector<int> shape, bool decay, double value);
  LayerParams make_block(const std::string& prefix, FfnMode mode, int experts_n, int top_k,
                         int dim, int hidden, int depth_for_scale);

  ModelConfig cfg_;
  int vocab_ = 0;
  std::uint64_t init_seed_ = 0;
  DType dt_ = DType::F32;
  std::vector<Param> params_;
};

}  // namespace eve
