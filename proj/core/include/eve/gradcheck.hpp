#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "eve/tensor.hpp"

namespace eve {

struct GradCheckOptions {
  double h = 1e-5;          // central-difference step
  double tol = 1e-4;        // max acceptable relative error
  std::int64_t max_per_param = -1;  // subsample cap per parameter (-1 = all)
  std::uint64_t subsample_seed = 0;
};

struct GradCheckEntry {
  std::string param;
  std::int64_t checked = 0;
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
};

struct GradCheckReport {
  bool pass = true;
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
  std::vector<GradCheckEntry> entries;
};

// Relative error used throughout: |a - b| / max(|a|, |b|, 1e-3). The floor
// keeps near-zero gradients from blowing up the ratio.
double grad_rel_err(double analytic, double fd);

// Compares reverse-mode gradients of make_loss() against central finite
// differences, element by element, for every listed parameter. make_loss must
// rebuild its graph from the parameters' current data on each call; gradients
// are taken from one backward() sweep, finite differences from two extra
// forward evaluations per checked element. Parameters should be F64 leaves
// for the default tolerance to be meaningful.
GradCheckReport check_gradients(const std::function<Tensor()>& make_loss,
                                const std::vector<std::pair<std::string, Tensor>>& params,
                                const GradCheckOptions& opt = {});

}  // namespace eve
