#include "eve/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace eve {

double LrSchedule::at(std::int64_t step) const {
  if (step <= 0) return 0.0;
  if (warmup > 0 && step <= warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (step >= total) return floor;
  const double span = static_cast<double>(total - warmup);
  const double into = static_cast<double>(step - warmup);
  constexpr double kPi = 3.14159265358979323846;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(kPi * into / span));
}

AdamW::AdamW(std::vector<Param> params, Options opt) : params_(std::move(params)), opt_(opt) {
  if (!(opt_.beta1 >= 0.0 && opt_.beta1 < 1.0) || !(opt_.beta2 >= 0.0 && opt_.beta2 < 1.0)) {
    throw std::invalid_argument("adamw: betas must lie in [0, 1)");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Param& p : params_) {
    // moments always in f64 so the update math has one precision
    m_.push_back(Tensor::zeros(p.tensor.shape(), DType::F64));
    v_.push_back(Tensor::zeros(p.tensor.shape(), DType::F64));
  }
}

double AdamW::clip_global_norm(double max_norm) {
  double sq = 0.0;
  for (const Param& p : params_) {
    if (!p.tensor.has_grad()) continue;
    const std::int64_t n = p.tensor.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      const double g = p.tensor.grad_flat(i);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const Param& p : params_) {
      if (!p.tensor.has_grad()) continue;
      Tensor g = p.tensor.grad();
      const std::int64_t n = g.numel();
      for (std::int64_t i = 0; i < n; ++i) g.set_flat(i, g.flat(i) * scale);
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Param& p = params_[i];
    Tensor m = m_[i];
    Tensor v = v_[i];
    const std::int64_t n = p.tensor.numel();
    const bool has_grad = p.tensor.has_grad();
    for (std::int64_t j = 0; j < n; ++j) {
      const double g = has_grad ? p.tensor.grad_flat(j) : 0.0;
      const double mj = opt_.beta1 * m.flat(j) + (1.0 - opt_.beta1) * g;
      const double vj = opt_.beta2 * v.flat(j) + (1.0 - opt_.beta2) * g * g;
      m.set_flat(j, mj);
      v.set_flat(j, vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      double update = mhat / (std::sqrt(vhat) + opt_.eps);
      const double theta = p.tensor.flat(j);
      if (p.decay) update += opt_.weight_decay * theta;
      p.tensor.set_flat(j, theta - lr * update);
    }
  }
}

void AdamW::zero_grad() {
  for (const Param& p : params_) {
    if (p.tensor.has_grad()) p.tensor.zero_grad();
  }
}

void AdamW::restore(std::int64_t t, const std::vector<Tensor>& m, const std::vector<Tensor>& v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw std::invalid_argument("adamw: restored moment count does not match parameters");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (m[i].numel() != params_[i].tensor.numel() || v[i].numel() != params_[i].tensor.numel()) {
      throw std::invalid_argument("adamw: restored moment shape mismatch at " + params_[i].name);
    }
    for (std::int64_t j = 0; j < m[i].numel(); ++j) {
      m_[i].set_flat(j, m[i].flat(j));
      v_[i].set_flat(j, v[i].flat(j));
    }
  }
  t_ = t;
}

}  // namespace eve
