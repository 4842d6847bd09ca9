#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "eve/tensor.hpp"

namespace eve {

// Elementwise and scalar arithmetic. Binary ops require identical shapes and
// dtypes; broadcasting is limited to bias-add and the leading-axis helper.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor scalar_add(const Tensor& a, double s);
Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s);  // s is a scalar tensor
Tensor recip(const Tensor& a);
Tensor gelu(const Tensor& a);

// b has the length of the last dimension and is added to every slice.
Tensor add_bias(const Tensor& x, const Tensor& b);
// e matches x's trailing dimensions and is added to every leading slice.
Tensor add_broadcast0(const Tensor& x, const Tensor& e);

// Dense products. matmul is strictly 2-D; bmm batches over all leading
// dimensions, which must match between operands.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor bmm(const Tensor& a, const Tensor& b);

// Structure. reshape shares storage; permute materializes.
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor transpose2d(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

// Row indexing on 2-D tensors. Indices are host-side constants.
// gather_rows accumulates duplicate indices in backward; scatter_rows
// overwrites (indices must be unique); index_add accumulates.
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor scatter_rows(const Tensor& base, const std::vector<int>& idx, const Tensor& rows);
Tensor index_add(const Tensor& base, const std::vector<int>& idx, const Tensor& rows);
Tensor tile_rows(const Tensor& row, int count);

// Normalization and attention helpers.
Tensor softmax(const Tensor& x, int axis);
// scores is (..., Lk); key_valid holds groups*Lk flags and each group covers
// an equal share of the leading rows. Invalid keys receive a large negative
// additive bias before softmax.
Tensor mask_invalid_keys(const Tensor& scores, const std::vector<std::uint8_t>& key_valid,
                         int groups);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& x);

// Row scaling for gated expert combination: x is (K, D), s is (K, 1).
Tensor mul_rows(const Tensor& x, const Tensor& s);
// Pulls gates[tok[i], expert[i]] into a (K, 1) column, differentiably.
Tensor select_gate(const Tensor& gates, const std::vector<int>& tok,
                   const std::vector<int>& expert);

// Reductions and losses (all return scalars except where noted).
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Weighted mean of per-row negative log-likelihoods: sum(w * nll) / sum(w).
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<double>& weights);
Tensor cross_entropy(const Tensor& logits, int target);
Tensor mse(const Tensor& pred, const Tensor& target);
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& labels);

namespace testing {
// Multiplies the gelu backward pass; used by gradient-checker sensitivity
// tests to prove a wrong derivative is detected. Leave at 1.0 otherwise.
extern double gelu_derivative_scale;
}  // namespace testing

namespace detail {
double gelu_scalar(double x);  // shared with the naive MoE reference in tests
}  // namespace detail

}  // namespace eve
