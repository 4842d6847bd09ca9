#include "eve/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "eve/rng.hpp"

namespace eve {

double grad_rel_err(double analytic, double fd) {
  double denom = std::max({std::abs(analytic), std::abs(fd), 1e-3});
  return std::abs(analytic - fd) / denom;
}

GradCheckReport check_gradients(const std::function<Tensor()>& make_loss,
                                const std::vector<std::pair<std::string, Tensor>>& params,
                                const GradCheckOptions& opt) {
  GradCheckReport report;

  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) {
      throw std::invalid_argument("check_gradients: parameter '" + name +
                                  "' does not require grad");
    }
    p.ensure_grad();
    p.zero_grad();
  }

  Tensor loss = make_loss();
  backward(loss);

  Rng pick = Rng::from_seed(opt.subsample_seed).stream("gradcheck-subsample");
  std::size_t param_index = 0;
  for (const auto& [name, p] : params) {
    GradCheckEntry entry;
    entry.param = name;
    std::int64_t n = p.numel();

    std::vector<int> indices;
    if (opt.max_per_param > 0 && n > opt.max_per_param) {
      indices = pick.derive(param_index).sample_without_replacement(
          static_cast<int>(n), static_cast<int>(opt.max_per_param));
    } else {
      indices.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) indices[static_cast<std::size_t>(i)] = static_cast<int>(i);
    }

    Tensor mut = p;  // shared node; set_flat mutates the leaf in place
    for (int i : indices) {
      double saved = mut.flat(i);
      mut.set_flat(i, saved + opt.h);
      double lp = make_loss().item();
      mut.set_flat(i, saved - opt.h);
      double lm = make_loss().item();
      mut.set_flat(i, saved);

      double fd = (lp - lm) / (2.0 * opt.h);
      double analytic = p.grad_flat(i);
      double err = grad_rel_err(analytic, fd);
      ++entry.checked;
      if (err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = i;
        entry.worst_analytic = analytic;
        entry.worst_fd = fd;
      }
    }

    report.checked += entry.checked;
    if (entry.max_rel_err > report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_param = entry.param;
      report.worst_index = entry.worst_index;
      report.worst_analytic = entry.worst_analytic;
      report.worst_fd = entry.worst_fd;
    }
    report.entries.push_back(std::move(entry));
    ++param_index;
  }

  report.pass = report.max_rel_err <= opt.tol;
  return report;
}

}  // namespace eve
