#pragma once

#include <cstdint>
#include <vector>

#include "eve/model.hpp"
#include "eve/tensor.hpp"

namespace eve {

// Linear warmup to the peak, then cosine decay to the floor. Steps are
// 1-based: lr(warmup) == peak, lr(total) == floor, lr beyond total stays at
// the floor.
struct LrSchedule {
  int warmup = 0;
  int total = 1;
  double peak = 1e-3;
  double floor = 0.0;

  double at(std::int64_t step) const;
};

// Decoupled weight-decay Adam over the model's parameter registry. Parameters
// flagged decay=false (norms, biases, temperature) skip the decay term.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.05;
  };

  AdamW(std::vector<Param> params, Options opt);

  // Scales every gradient so the global l2 norm is at most max_norm.
  // Returns the pre-clip norm. No-op (returning the norm) if already within.
  double clip_global_norm(double max_norm);

  // One update from the accumulated gradients; missing grads count as zero.
  void step(double lr);

  void zero_grad();

  std::int64_t t() const { return t_; }
  const std::vector<Param>& params() const { return params_; }
  const Options& options() const { return opt_; }

  // Moment buffers in registry order, exposed for checkpointing.
  const std::vector<Tensor>& m_state() const { return m_; }
  const std::vector<Tensor>& v_state() const { return v_; }
  void restore(std::int64_t t, const std::vector<Tensor>& m, const std::vector<Tensor>& v);

 private:
  std::vector<Param> params_;
  Options opt_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace eve
