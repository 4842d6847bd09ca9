#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "eve/encoder.hpp"

namespace eve::moe {

Tensor ffn_forward(const Tensor& x, const ExpertParams& e) {
  return add_bias(matmul(gelu(add_bias(matmul(x, e.w1), e.b1)), e.w2), e.b2);
}

Tensor gate_probs(const Tensor& x, const LayerParams& lp, const std::vector<Tag>& tags,
                  bool modality_bias) {
  if (!lp.router.w.node_ptr()) throw std::logic_error("gate_probs: layer has no router");
  const int d = static_cast<int>(x.dim(1));
  Tensor in = x;
  if (modality_bias) {
    if (!lp.router.b_img.node_ptr() || !lp.router.b_txt.node_ptr()) {
      throw std::logic_error("gate_probs: modality embeddings not allocated");
    }
    if (tags.size() != static_cast<std::size_t>(x.dim(0))) {
      throw std::invalid_argument("gate_probs: one modality tag per row required");
    }
    Tensor table = concat({reshape(lp.router.b_img, {1, d}), reshape(lp.router.b_txt, {1, d})}, 0);
    std::vector<int> ti(tags.size());
    for (std::size_t i = 0; i < tags.size(); ++i) ti[i] = tags[i] == Tag::Text ? 1 : 0;
    in = add(x, gather_rows(table, ti));
  }
  return softmax(matmul(in, lp.router.w), 1);
}

std::vector<std::vector<int>> topk_select(const Tensor& gates, int k) {
  const int t_count = static_cast<int>(gates.dim(0));
  const int n = static_cast<int>(gates.dim(1));
  if (k < 1 || k > n) {
    throw std::invalid_argument("topk_select: k=" + std::to_string(k) + " with " +
                                std::to_string(n) + " experts");
  }
  std::vector<std::vector<int>> sel(static_cast<std::size_t>(t_count));
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int t = 0; t < t_count; ++t) {
    std::iota(idx.begin(), idx.end(), 0);
    // stable sort by descending probability: equal values keep ascending index
    // order, so ties resolve to the lower expert id.
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return gates.flat(static_cast<std::int64_t>(t) * n + a) >
             gates.flat(static_cast<std::int64_t>(t) * n + b);
    });
    sel[t].assign(idx.begin(), idx.begin() + k);
    std::sort(sel[t].begin(), sel[t].end());
  }
  return sel;
}

Tensor dispatch_combine(const Tensor& x, const Tensor& gates, const LayerParams& lp, int k,
                        const std::vector<Tag>& tags, LayerRouting* stats) {
  const int t_count = static_cast<int>(x.dim(0));
  const int d = static_cast<int>(x.dim(1));
  const int n = static_cast<int>(gates.dim(1));
  if (gates.dim(0) != t_count) throw std::invalid_argument("dispatch_combine: rows mismatch");
  if (static_cast<int>(lp.experts.size()) != n) {
    throw std::invalid_argument("dispatch_combine: expert count does not match gate width");
  }
  if (tags.size() != static_cast<std::size_t>(t_count)) {
    throw std::invalid_argument("dispatch_combine: one modality tag per row required");
  }

  const auto sel = topk_select(gates, k);
  std::vector<std::vector<int>> rows_of(static_cast<std::size_t>(n));
  std::vector<std::int64_t> img_count(static_cast<std::size_t>(n), 0);
  std::vector<std::int64_t> txt_count(static_cast<std::size_t>(n), 0);
  for (int t = 0; t < t_count; ++t) {
    for (int e : sel[t]) {
      rows_of[static_cast<std::size_t>(e)].push_back(t);
      (tags[static_cast<std::size_t>(t)] == Tag::Image ? img_count : txt_count)[e] += 1;
    }
  }

  Tensor out = Tensor::zeros({t_count, d}, x.dtype(), /*requires_grad=*/false);
  for (int e = 0; e < n; ++e) {
    const std::vector<int>& rows = rows_of[static_cast<std::size_t>(e)];
    if (rows.empty()) continue;
    Tensor ye = ffn_forward(gather_rows(x, rows), lp.experts[static_cast<std::size_t>(e)]);
    Tensor ge = select_gate(gates, rows, std::vector<int>(rows.size(), e));
    out = index_add(out, rows, mul_rows(ye, ge));
  }

  if (stats) {
    stats->load.assign(static_cast<std::size_t>(n), 0.0);
    stats->importance.assign(static_cast<std::size_t>(n), 0.0);
    stats->load_img.assign(static_cast<std::size_t>(n), 0.0);
    stats->load_txt.assign(static_cast<std::size_t>(n), 0.0);
    const double slots = static_cast<double>(t_count) * k;
    std::int64_t img_rows = 0;
    for (Tag tg : tags) img_rows += tg == Tag::Image ? 1 : 0;
    const double img_slots = static_cast<double>(img_rows) * k;
    const double txt_slots = static_cast<double>(t_count - img_rows) * k;
    for (int e = 0; e < n; ++e) {
      stats->load[e] = static_cast<double>(rows_of[static_cast<std::size_t>(e)].size()) / slots;
      if (img_slots > 0) stats->load_img[e] = static_cast<double>(img_count[e]) / img_slots;
      if (txt_slots > 0) stats->load_txt[e] = static_cast<double>(txt_count[e]) / txt_slots;
      double col = 0.0;
      for (int t = 0; t < t_count; ++t) col += gates.flat(static_cast<std::int64_t>(t) * n + e);
      stats->importance[e] = col / static_cast<double>(t_count);
    }
    stats->min_margin = std::numeric_limits<double>::infinity();
    if (k < n) {
      std::vector<double> row(static_cast<std::size_t>(n));
      for (int t = 0; t < t_count; ++t) {
        for (int e = 0; e < n; ++e) row[e] = gates.flat(static_cast<std::int64_t>(t) * n + e);
        std::nth_element(row.begin(), row.begin() + (k - 1), row.end(), std::greater<>());
        const double kth = row[static_cast<std::size_t>(k - 1)];
        const double next = *std::max_element(row.begin() + k, row.end());
        stats->min_margin = std::min(stats->min_margin, kth - next);
      }
    }
  }
  return out;
}

Tensor aux_loss(const Tensor& gates, const std::vector<double>& load, double alpha) {
  const int t_count = static_cast<int>(gates.dim(0));
  const int n = static_cast<int>(gates.dim(1));
  if (load.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("aux_loss: load vector must have one entry per expert");
  }
  Tensor f = Tensor::zeros({1, n}, gates.dtype(), /*requires_grad=*/false);
  for (int e = 0; e < n; ++e) f.set_flat(e, load[static_cast<std::size_t>(e)]);
  // alpha * N * sum_i f_i p_i  ==  alpha * N / T * sum_{t,i} f_i g[t,i]
  return scalar_mul(sum_all(mul(gates, tile_rows(f, t_count))),
                    alpha * static_cast<double>(n) / static_cast<double>(t_count));
}

Tensor hard_route(const Tensor& x, const LayerParams& lp, const std::vector<Tag>& tags) {
  if (lp.experts.size() < 2) throw std::logic_error("hard_route: needs an expert per modality");
  const int t_count = static_cast<int>(x.dim(0));
  const int d = static_cast<int>(x.dim(1));
  if (tags.size() != static_cast<std::size_t>(t_count)) {
    throw std::invalid_argument("hard_route: one modality tag per row required");
  }
  std::vector<int> img, txt;
  for (int t = 0; t < t_count; ++t) {
    (tags[static_cast<std::size_t>(t)] == Tag::Image ? img : txt).push_back(t);
  }
  Tensor out = Tensor::zeros({t_count, d}, x.dtype(), /*requires_grad=*/false);
  if (!img.empty()) out = scatter_rows(out, img, ffn_forward(gather_rows(x, img), lp.experts[0]));
  if (!txt.empty()) out = scatter_rows(out, txt, ffn_forward(gather_rows(x, txt), lp.experts[1]));
  return out;
}

}  // namespace eve::moe
