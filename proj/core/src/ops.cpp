#include "eve/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "eve/runtime.hpp"

namespace eve {

namespace testing {
double gelu_derivative_scale = 1.0;
}

namespace {

using i64 = std::int64_t;

template <typename T>
T* dptr(Node* n) { return n->data->as<T>().data(); }
template <typename T>
const T* cdptr(const Node* n) { return n->data->as<T>().data(); }
template <typename T>
T* gptr(Node* n) { return n->grad->as<T>().data(); }

Node* parent(Node& self, std::size_t i) { return self.parents[i].node(); }

// A parent participates in accumulation only if backward() allocated its grad.
bool wants_grad(Node& self, std::size_t i) {
  Node* p = parent(self, i);
  return p->requires_grad && p->grad != nullptr;
}

template <typename F>
void with_dtype(DType dt, F&& f) {
  if (dt == DType::F32) {
    f.template operator()<float>();
  } else {
    f.template operator()<double>();
  }
}

Tensor make_op(std::vector<int> shape, DType dt, std::vector<Tensor> parents,
               const char* name, std::function<void(Node&)> backprop) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  auto n = std::make_shared<Node>();
  n->dtype = dt;
  i64 numel = 1;
  for (int d : shape) numel *= d;
  n->data = Storage::make(dt, static_cast<std::size_t>(numel));
  n->shape = std::move(shape);
  n->requires_grad = rg;
  n->op = name;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) {
    throw std::invalid_argument(std::string(op) + ": dtype mismatch " +
                                std::string(dtype_name(a.dtype())) + " vs " + dtype_name(b.dtype()));
  }
}

std::vector<i64> row_major_strides(const std::vector<int>& shape) {
  std::vector<i64> s(shape.size());
  i64 acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = acc;
    acc *= shape[static_cast<std::size_t>(i)];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dense product kernels. All kernels accumulate (C += ...) and run each
// output element's reduction in ascending-k order, so results are identical
// across thread counts and batch groupings.
// ---------------------------------------------------------------------------

template <typename T>
void mm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  runtime::parallel_for(m, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) {
      const T* ai = a + i * k;
      T* ci = c + i * n;
      for (i64 kk = 0; kk < k; ++kk) {
        T av = ai[kk];
        const T* bk = b + kk * n;
        for (i64 j = 0; j < n; ++j) ci[j] += av * bk[j];
      }
    }
  });
}

// C(m,n) += A(m,k) · B(n,k)^T. Materializes B^T so the inner loop runs over
// contiguous memory: per output element the reduction is still k-ascending.
template <typename T>
void mm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  std::vector<T> bt(static_cast<std::size_t>(k * n));
  for (i64 j = 0; j < n; ++j) {
    const T* bj = b + j * k;
    for (i64 kk = 0; kk < k; ++kk) bt[static_cast<std::size_t>(kk * n + j)] = bj[kk];
  }
  mm_nn(a, bt.data(), c, m, k, n);
}

// C(k,n) += A(m,k)^T · B(m,n)
template <typename T>
void mm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  runtime::parallel_for(k, [&](i64 lo, i64 hi) {
    for (i64 kk = lo; kk < hi; ++kk) {
      T* ck = c + kk * n;
      for (i64 i = 0; i < m; ++i) {
        T av = a[i * k + kk];
        const T* bi = b + i * n;
        for (i64 j = 0; j < n; ++j) ck[j] += av * bi[j];
      }
    }
  });
}

void check_matmul_shapes(const char* op, const Tensor& a, const Tensor& b, int min_rank) {
  check_same_dtype(op, a, b);
  if (a.rank() < min_rank || b.rank() < min_rank) {
    throw std::invalid_argument(std::string(op) + ": operands must have rank >= " +
                                std::to_string(min_rank));
  }
}

}  // namespace

namespace detail {
double gelu_scalar(double x) {
  return x * 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  check_same_dtype("add", a, b);
  Tensor out = make_op(a.shape(), a.dtype(), {a, b}, "add", [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      i64 n = static_cast<i64>(self.data->numel());
      for (std::size_t p = 0; p < 2; ++p) {
        if (!wants_grad(self, p)) continue;
        T* gp = gptr<T>(parent(self, p));
        for (i64 i = 0; i < n; ++i) gp[i] += g[i];
      }
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* pc = out.data<T>();
    i64 n = out.numel();
    for (i64 i = 0; i < n; ++i) pc[i] = pa[i] + pb[i];
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  check_same_dtype("sub", a, b);
  Tensor out = make_op(a.shape(), a.dtype(), {a, b}, "sub", [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      i64 n = static_cast<i64>(self.data->numel());
      if (wants_grad(self, 0)) {
        T* ga = gptr<T>(parent(self, 0));
        for (i64 i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (wants_grad(self, 1)) {
        T* gb = gptr<T>(parent(self, 1));
        for (i64 i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* pc = out.data<T>();
    for (i64 i = 0; i < out.numel(); ++i) pc[i] = pa[i] - pb[i];
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  check_same_dtype("mul", a, b);
  Tensor out = make_op(a.shape(), a.dtype(), {a, b}, "mul", [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      const T* pa = cdptr<T>(parent(self, 0));
      const T* pb = cdptr<T>(parent(self, 1));
      i64 n = static_cast<i64>(self.data->numel());
      if (wants_grad(self, 0)) {
        T* ga = gptr<T>(parent(self, 0));
        for (i64 i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
      }
      if (wants_grad(self, 1)) {
        T* gb = gptr<T>(parent(self, 1));
        for (i64 i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
      }
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* pc = out.data<T>();
    for (i64 i = 0; i < out.numel(); ++i) pc[i] = pa[i] * pb[i];
  });
  return out;
}

Tensor scalar_mul(const Tensor& a, double s) {
  Tensor out = make_op(a.shape(), a.dtype(), {a}, "scalar_mul", [s](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      T* ga = gptr<T>(parent(self, 0));
      T sv = static_cast<T>(s);
      for (i64 i = 0; i < static_cast<i64>(self.data->numel()); ++i) ga[i] += g[i] * sv;
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    T* pc = out.data<T>();
    T sv = static_cast<T>(s);
    for (i64 i = 0; i < out.numel(); ++i) pc[i] = pa[i] * sv;
  });
  return out;
}

Tensor scalar_add(const Tensor& a, double s) {
  Tensor out = make_op(a.shape(), a.dtype(), {a}, "scalar_add", [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      T* ga = gptr<T>(parent(self, 0));
      for (i64 i = 0; i < static_cast<i64>(self.data->numel()); ++i) ga[i] += g[i];
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    T* pc = out.data<T>();
    T sv = static_cast<T>(s);
    for (i64 i = 0; i < out.numel(); ++i) pc[i] = pa[i] + sv;
  });
  return out;
}

Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s) {
  check_same_dtype("mul_scalar_tensor", a, s);
  if (s.numel() != 1) {
    throw std::invalid_argument("mul_scalar_tensor: scale must be a scalar tensor, got " +
                                shape_str(s.shape()));
  }
  Tensor out = make_op(a.shape(), a.dtype(), {a, s}, "mul_scalar_tensor", [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      const T* pa = cdptr<T>(parent(self, 0));
      T sv = cdptr<T>(parent(self, 1))[0];
      i64 n = static_cast<i64>(self.data->numel());
      if (wants_grad(self, 0)) {
        T* ga = gptr<T>(parent(self, 0));
        for (i64 i = 0; i < n; ++i) ga[i] += g[i] * sv;
      }
      if (wants_grad(self, 1)) {
        T* gs = gptr<T>(parent(self, 1));
        T acc = 0;
        for (i64 i = 0; i < n; ++i) acc += g[i] * pa[i];
        gs[0] += acc;
      }
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    T sv = s.data<T>()[0];
    T* pc = out.data<T>();
    for (i64 i = 0; i < out.numel(); ++i) pc[i] = pa[i] * sv;
  });
  return out;
}

Tensor recip(const Tensor& a) {
  Tensor out = make_op(a.shape(), a.dtype(), {a}, "recip", [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      const T* pa = cdptr<T>(parent(self, 0));
      T* ga = gptr<T>(parent(self, 0));
      for (i64 i = 0; i < static_cast<i64>(self.data->numel()); ++i) {
        ga[i] += -g[i] / (pa[i] * pa[i]);
      }
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    T* pc = out.data<T>();
    for (i64 i = 0; i < out.numel(); ++i) pc[i] = T(1) / pa[i];
  });
  return out;
}

Tensor gelu(const Tensor& a) {
  Tensor out = make_op(a.shape(), a.dtype(), {a}, "gelu", [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      const T* pa = cdptr<T>(parent(self, 0));
      T* ga = gptr<T>(parent(self, 0));
      const double hook = testing::gelu_derivative_scale;
      const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (i64 i = 0; i < static_cast<i64>(self.data->numel()); ++i) {
        double x = static_cast<double>(pa[i]);
        double phi_cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
        double phi_pdf = std::exp(-0.5 * x * x) * inv_sqrt2pi;
        ga[i] += g[i] * static_cast<T>((phi_cdf + x * phi_pdf) * hook);
      }
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    T* pc = out.data<T>();
    for (i64 i = 0; i < out.numel(); ++i) {
      pc[i] = static_cast<T>(detail::gelu_scalar(static_cast<double>(pa[i])));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast adds
// ---------------------------------------------------------------------------

Tensor add_bias(const Tensor& x, const Tensor& b) {
  check_same_dtype("add_bias", x, b);
  int c = x.dim(x.rank() - 1);
  if (b.rank() != 1 || b.dim(0) != c) {
    throw std::invalid_argument("add_bias: bias " + shape_str(b.shape()) +
                                " does not match last dimension of " + shape_str(x.shape()));
  }
  Tensor out = make_op(x.shape(), x.dtype(), {x, b}, "add_bias", [c](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      i64 n = static_cast<i64>(self.data->numel());
      i64 rows = n / c;
      if (wants_grad(self, 0)) {
        T* gx = gptr<T>(parent(self, 0));
        for (i64 i = 0; i < n; ++i) gx[i] += g[i];
      }
      if (wants_grad(self, 1)) {
        T* gb = gptr<T>(parent(self, 1));
        for (i64 r = 0; r < rows; ++r) {
          const T* gr = g + r * c;
          for (i64 j = 0; j < c; ++j) gb[j] += gr[j];
        }
      }
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>();
    const T* pb = b.data<T>();
    T* pc = out.data<T>();
    i64 rows = x.numel() / c;
    for (i64 r = 0; r < rows; ++r) {
      const T* xr = px + r * c;
      T* cr = pc + r * c;
      for (i64 j = 0; j < c; ++j) cr[j] = xr[j] + pb[j];
    }
  });
  return out;
}

Tensor add_broadcast0(const Tensor& x, const Tensor& e) {
  if (x.rank() < 2) throw std::invalid_argument("add_broadcast0: x must have rank >= 2");
  std::vector<int> trailing(x.shape().begin() + 1, x.shape().end());
  if (e.shape() != trailing) {
    throw std::invalid_argument("add_broadcast0: " + shape_str(e.shape()) +
                                " does not match trailing dims of " + shape_str(x.shape()));
  }
  int rest = 1;
  for (int d : trailing) rest *= d;
  Tensor flat = reshape(x, {x.dim(0), rest});
  Tensor summed = add_bias(flat, reshape(e, {rest}));
  return reshape(summed, x.shape());
}

// ---------------------------------------------------------------------------
// Products
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matmul_shapes("matmul", a, b, 2);
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: expected 2-D operands, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_op({m, n}, a.dtype(), {a, b}, "matmul", [m, k, n](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      const T* pa = cdptr<T>(parent(self, 0));
      const T* pb = cdptr<T>(parent(self, 1));
      if (wants_grad(self, 0)) mm_nt(g, pb, gptr<T>(parent(self, 0)), m, n, k);
      if (wants_grad(self, 1)) mm_tn(pa, g, gptr<T>(parent(self, 1)), m, k, n);
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    mm_nn(a.data<T>(), b.data<T>(), out.data<T>(), m, k, n);
  });
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  check_matmul_shapes("bmm", a, b, 3);
  if (a.rank() != b.rank()) {
    throw std::invalid_argument("bmm: rank mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  i64 batch = 1;
  for (int i = 0; i + 2 < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw std::invalid_argument("bmm: batch dims disagree: " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
    }
    batch *= a.dim(i);
  }
  int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  int k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2) {
    throw std::invalid_argument("bmm: inner dimensions disagree: " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out = make_op(out_shape, a.dtype(), {a, b}, "bmm", [batch, m, k, n](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      const T* pa = cdptr<T>(parent(self, 0));
      const T* pb = cdptr<T>(parent(self, 1));
      bool ga = wants_grad(self, 0), gb = wants_grad(self, 1);
      for (i64 bi = 0; bi < batch; ++bi) {
        const T* gb_ = g + bi * m * n;
        if (ga) mm_nt(gb_, pb + bi * k * n, gptr<T>(parent(self, 0)) + bi * m * k, m, n, k);
        if (gb) mm_tn(pa + bi * m * k, gb_, gptr<T>(parent(self, 1)) + bi * k * n, m, k, n);
      }
    });
  });
  with_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* pc = out.data<T>();
    for (i64 bi = 0; bi < batch; ++bi) {
      mm_nn(pa + bi * m * k, pb + bi * k * n, pc + bi * m * n, m, k, n);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  i64 n = 1;
  for (int d : shape) n *= d;
  if (n != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->dtype = x.dtype();
  node->data = x.node()->data;  // shared storage, no copy
  node->shape = std::move(shape);
  node->requires_grad = x.requires_grad();
  node->op = "reshape";
  if (node->requires_grad) {
    node->parents = {x};
    node->backprop = [](Node& self) {
      with_dtype(self.dtype, [&]<typename T>() {
        if (!wants_grad(self, 0)) return;
        const T* g = gptr<T>(&self);
        T* gx = gptr<T>(parent(self, 0));
        for (i64 i = 0; i < static_cast<i64>(self.data->numel()); ++i) gx[i] += g[i];
      });
    };
  }
  return Tensor(std::move(node));
}

namespace {

template <typename T>
void permute_copy(const T* in, T* out, const std::vector<int>& in_shape,
                  const std::vector<int>& perm, bool accumulate) {
  std::size_t r = in_shape.size();
  std::vector<int> out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
  auto in_strides = row_major_strides(in_shape);
  std::vector<i64> out_axis_in_stride(r);
  for (std::size_t i = 0; i < r; ++i) out_axis_in_stride[i] = in_strides[static_cast<std::size_t>(perm[i])];
  i64 total = 1;
  for (int d : in_shape) total *= d;
  std::vector<int> idx(r, 0);
  i64 in_off = 0;
  for (i64 o = 0; o < total; ++o) {
    if (accumulate) {
      out[o] += in[in_off];
    } else {
      out[o] = in[in_off];
    }
    // advance out multi-index (row-major), tracking the input offset
    for (int ax = static_cast<int>(r) - 1; ax >= 0; --ax) {
      auto a = static_cast<std::size_t>(ax);
      ++idx[a];
      in_off += out_axis_in_stride[a];
      if (idx[a] < out_shape[a]) break;
      in_off -= static_cast<i64>(idx[a]) * out_axis_in_stride[a];
      idx[a] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != x.rank()) {
    throw std::invalid_argument("permute: perm size " + std::to_string(perm.size()) +
                                " does not match rank of " + shape_str(x.shape()));
  }
  std::vector<bool> used(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= x.rank() || used[static_cast<std::size_t>(p)]) {
      throw std::invalid_argument("permute: invalid permutation");
    }
    used[static_cast<std::size_t>(p)] = true;
  }
  std::vector<int> out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<int> in_shape = x.shape();
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  Tensor out = make_op(out_shape, x.dtype(), {x}, "permute",
                       [out_shape, inv](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      permute_copy(gptr<T>(&self), gptr<T>(parent(self, 0)), out_shape, inv, true);
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    permute_copy(x.data<T>(), out.data<T>(), in_shape, perm, false);
  });
  return out;
}

Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose2d: expected 2-D tensor");
  return permute(x, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Tensor& first = parts[0];
  if (axis < 0 || axis >= first.rank()) throw std::invalid_argument("concat: axis out of range");
  int axis_total = 0;
  for (const auto& p : parts) {
    check_same_dtype("concat", first, p);
    if (p.rank() != first.rank()) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < first.rank(); ++i) {
      if (i != axis && p.dim(i) != first.dim(i)) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(first.shape()) +
                                    " vs " + shape_str(p.shape()));
      }
    }
    if (p.dim(axis) <= 0) throw std::invalid_argument("concat: empty segment");
    axis_total += p.dim(axis);
  }
  std::vector<int> out_shape = first.shape();
  out_shape[static_cast<std::size_t>(axis)] = axis_total;
  i64 outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  for (int i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);
  std::vector<i64> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  i64 out_width = axis_total * inner;

  Tensor out = make_op(out_shape, first.dtype(), parts, "concat",
                       [outer, widths, out_width](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      i64 off = 0;
      for (std::size_t p = 0; p < widths.size(); ++p) {
        if (wants_grad(self, p)) {
          T* gp = gptr<T>(parent(self, p));
          for (i64 o = 0; o < outer; ++o) {
            const T* src = g + o * out_width + off;
            T* dst = gp + o * widths[p];
            for (i64 j = 0; j < widths[p]; ++j) dst[j] += src[j];
          }
        }
        off += widths[p];
      }
    });
  });
  with_dtype(first.dtype(), [&]<typename T>() {
    T* pc = out.data<T>();
    i64 off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const T* src = parts[p].data<T>();
      for (i64 o = 0; o < outer; ++o) {
        T* dst = pc + o * out_width + off;
        const T* s = src + o * widths[p];
        for (i64 j = 0; j < widths[p]; ++j) dst[j] = s[j];
      }
      off += widths[p];
    }
  });
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("slice: axis out of range");
  if (start < 0 || len <= 0 || start + len > x.dim(axis)) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(x.shape()) + " axis " + std::to_string(axis));
  }
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  i64 outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  i64 in_width = x.dim(axis) * inner;
  i64 out_width = static_cast<i64>(len) * inner;
  i64 off = static_cast<i64>(start) * inner;

  Tensor out = make_op(out_shape, x.dtype(), {x}, "slice",
                       [outer, in_width, out_width, off](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      T* gx = gptr<T>(parent(self, 0));
      for (i64 o = 0; o < outer; ++o) {
        T* dst = gx + o * in_width + off;
        const T* src = g + o * out_width;
        for (i64 j = 0; j < out_width; ++j) dst[j] += src[j];
      }
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>();
    T* pc = out.data<T>();
    for (i64 o = 0; o < outer; ++o) {
      const T* src = px + o * in_width + off;
      T* dst = pc + o * out_width;
      for (i64 j = 0; j < out_width; ++j) dst[j] = src[j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row indexing
// ---------------------------------------------------------------------------

namespace {
void check_rows_2d(const char* op, const Tensor& x) {
  if (x.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " +
                                shape_str(x.shape()));
  }
}
void check_row_indices(const char* op, const std::vector<int>& idx, int rows) {
  for (int i : idx) {
    if (i < 0 || i >= rows) {
      throw std::out_of_range(std::string(op) + ": row index " + std::to_string(i) +
                              " out of range [0, " + std::to_string(rows) + ")");
    }
  }
}
}  // namespace

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  check_rows_2d("gather_rows", x);
  check_row_indices("gather_rows", idx, x.dim(0));
  int c = x.dim(1);
  int k = static_cast<int>(idx.size());
  Tensor out = make_op({k, c}, x.dtype(), {x}, "gather_rows", [idx, c](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      T* gx = gptr<T>(parent(self, 0));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        T* dst = gx + static_cast<i64>(idx[i]) * c;
        const T* src = g + static_cast<i64>(i) * c;
        for (int j = 0; j < c; ++j) dst[j] += src[j];
      }
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>();
    T* pc = out.data<T>();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = px + static_cast<i64>(idx[i]) * c;
      T* dst = pc + static_cast<i64>(i) * c;
      for (int j = 0; j < c; ++j) dst[j] = src[j];
    }
  });
  return out;
}

namespace {
void check_scatter_args(const char* op, const Tensor& base, const std::vector<int>& idx,
                        const Tensor& rows, bool require_unique) {
  check_rows_2d(op, base);
  check_rows_2d(op, rows);
  check_same_dtype(op, base, rows);
  if (rows.dim(0) != static_cast<int>(idx.size()) || rows.dim(1) != base.dim(1)) {
    throw std::invalid_argument(std::string(op) + ": rows " + shape_str(rows.shape()) +
                                " do not match " + std::to_string(idx.size()) +
                                " indices into " + shape_str(base.shape()));
  }
  check_row_indices(op, idx, base.dim(0));
  if (require_unique) {
    std::vector<int> sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw std::out_of_range(std::string(op) + ": duplicate row index");
    }
  }
}
}  // namespace

Tensor scatter_rows(const Tensor& base, const std::vector<int>& idx, const Tensor& rows) {
  check_scatter_args("scatter_rows", base, idx, rows, true);
  int c = base.dim(1);
  Tensor out = make_op(base.shape(), base.dtype(), {base, rows}, "scatter_rows",
                       [idx, c](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      if (wants_grad(self, 0)) {
        T* gb = gptr<T>(parent(self, 0));
        std::vector<std::uint8_t> overwritten(self.data->numel() / static_cast<std::size_t>(c), 0);
        for (int i : idx) overwritten[static_cast<std::size_t>(i)] = 1;
        i64 rows_n = static_cast<i64>(overwritten.size());
        for (i64 r = 0; r < rows_n; ++r) {
          if (overwritten[static_cast<std::size_t>(r)]) continue;
          const T* src = g + r * c;
          T* dst = gb + r * c;
          for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
      }
      if (wants_grad(self, 1)) {
        T* gr = gptr<T>(parent(self, 1));
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const T* src = g + static_cast<i64>(idx[i]) * c;
          T* dst = gr + static_cast<i64>(i) * c;
          for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
      }
    });
  });
  with_dtype(base.dtype(), [&]<typename T>() {
    const T* pb = base.data<T>();
    const T* pr = rows.data<T>();
    T* pc = out.data<T>();
    std::copy(pb, pb + base.numel(), pc);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = pr + static_cast<i64>(i) * c;
      T* dst = pc + static_cast<i64>(idx[i]) * c;
      for (int j = 0; j < c; ++j) dst[j] = src[j];
    }
  });
  return out;
}

Tensor index_add(const Tensor& base, const std::vector<int>& idx, const Tensor& rows) {
  check_scatter_args("index_add", base, idx, rows, false);
  int c = base.dim(1);
  Tensor out = make_op(base.shape(), base.dtype(), {base, rows}, "index_add",
                       [idx, c](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      if (wants_grad(self, 0)) {
        T* gb = gptr<T>(parent(self, 0));
        for (i64 i = 0; i < static_cast<i64>(self.data->numel()); ++i) gb[i] += g[i];
      }
      if (wants_grad(self, 1)) {
        T* gr = gptr<T>(parent(self, 1));
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const T* src = g + static_cast<i64>(idx[i]) * c;
          T* dst = gr + static_cast<i64>(i) * c;
          for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
      }
    });
  });
  with_dtype(base.dtype(), [&]<typename T>() {
    const T* pb = base.data<T>();
    const T* pr = rows.data<T>();
    T* pc = out.data<T>();
    std::copy(pb, pb + base.numel(), pc);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = pr + static_cast<i64>(i) * c;
      T* dst = pc + static_cast<i64>(idx[i]) * c;
      for (int j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor tile_rows(const Tensor& row, int count) {
  if (count <= 0) throw std::invalid_argument("tile_rows: count must be positive");
  int c = 0;
  if (row.rank() == 1) {
    c = row.dim(0);
  } else if (row.rank() == 2 && row.dim(0) == 1) {
    c = row.dim(1);
  } else {
    throw std::invalid_argument("tile_rows: expected (D) or (1, D), got " + shape_str(row.shape()));
  }
  Tensor out = make_op({count, c}, row.dtype(), {row}, "tile_rows", [count, c](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      T* gr = gptr<T>(parent(self, 0));
      for (int i = 0; i < count; ++i) {
        const T* src = g + static_cast<i64>(i) * c;
        for (int j = 0; j < c; ++j) gr[j] += src[j];
      }
    });
  });
  with_dtype(row.dtype(), [&]<typename T>() {
    const T* pr = row.data<T>();
    T* pc = out.data<T>();
    for (int i = 0; i < count; ++i) {
      std::copy(pr, pr + c, pc + static_cast<i64>(i) * c);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void softmax_rows(const T* x, T* y, i64 rows, i64 n) {
  for (i64 r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T* yr = y + r * n;
    T m = xr[0];
    for (i64 j = 1; j < n; ++j) m = std::max(m, xr[j]);
    T s = 0;
    for (i64 j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - m);
      s += yr[j];
    }
    T inv = T(1) / s;
    for (i64 j = 0; j < n; ++j) yr[j] *= inv;
  }
}

Tensor softmax_lastdim(const Tensor& x) {
  i64 n = x.dim(x.rank() - 1);
  Tensor out = make_op(x.shape(), x.dtype(), {x}, "softmax", [n](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      const T* y = cdptr<T>(&self);
      T* gx = gptr<T>(parent(self, 0));
      i64 rows = static_cast<i64>(self.data->numel()) / n;
      for (i64 r = 0; r < rows; ++r) {
        const T* gr = g + r * n;
        const T* yr = y + r * n;
        T dot = 0;
        for (i64 j = 0; j < n; ++j) dot += gr[j] * yr[j];
        T* gxr = gx + r * n;
        for (i64 j = 0; j < n; ++j) gxr[j] += (gr[j] - dot) * yr[j];
      }
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>();
    for (i64 i = 0; i < x.numel(); ++i) {
      if (!std::isfinite(static_cast<double>(px[i]))) {
        throw std::domain_error("softmax: non-finite input");
      }
    }
    softmax_rows(px, out.data<T>(), x.numel() / n, n);
  });
  return out;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax: axis out of range");
  if (axis == x.rank() - 1) return softmax_lastdim(x);
  std::vector<int> perm, inv;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) perm.push_back(i);
  }
  perm.push_back(axis);
  inv.resize(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return permute(softmax_lastdim(permute(x, perm)), inv);
}

Tensor mask_invalid_keys(const Tensor& scores, const std::vector<std::uint8_t>& key_valid,
                         int groups) {
  i64 lk = scores.dim(scores.rank() - 1);
  i64 rows = scores.numel() / lk;
  if (groups <= 0 || rows % groups != 0 ||
      static_cast<i64>(key_valid.size()) != groups * lk) {
    throw std::invalid_argument("mask_invalid_keys: validity size " +
                                std::to_string(key_valid.size()) + " does not cover " +
                                shape_str(scores.shape()) + " with " + std::to_string(groups) +
                                " groups");
  }
  i64 rows_per_group = rows / groups;
  Tensor out = make_op(scores.shape(), scores.dtype(), {scores}, "mask_invalid_keys",
                       [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      T* gx = gptr<T>(parent(self, 0));
      for (i64 i = 0; i < static_cast<i64>(self.data->numel()); ++i) gx[i] += g[i];
    });
  });
  with_dtype(scores.dtype(), [&]<typename T>() {
    const T* px = scores.data<T>();
    T* pc = out.data<T>();
    const T neg = static_cast<T>(-1e9);
    for (i64 gi = 0; gi < groups; ++gi) {
      const std::uint8_t* v = key_valid.data() + gi * lk;
      for (i64 r = 0; r < rows_per_group; ++r) {
        i64 base = (gi * rows_per_group + r) * lk;
        for (i64 j = 0; j < lk; ++j) {
          pc[base + j] = v[j] ? px[base + j] : px[base + j] + neg;
        }
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_same_dtype("layer_norm", x, gamma);
  check_same_dtype("layer_norm", x, beta);
  int c = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
    throw std::invalid_argument("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                                shape_str(beta.shape()) + " do not match last dimension of " +
                                shape_str(x.shape()));
  }
  i64 rows = x.numel() / c;
  // xhat and 1/sigma are saved for the backward pass.
  auto xhat_s = Storage::make(x.dtype(), static_cast<std::size_t>(x.numel()));
  auto inv_s = Storage::make(x.dtype(), static_cast<std::size_t>(rows));
  Tensor out = make_op(x.shape(), x.dtype(), {x, gamma, beta}, "layer_norm",
                       [c, rows, xhat_s, inv_s](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      const T* xhat = xhat_s->as<T>().data();
      const T* inv = inv_s->as<T>().data();
      const T* gam = cdptr<T>(parent(self, 1));
      bool wx = wants_grad(self, 0);
      bool wg = wants_grad(self, 1);
      bool wb = wants_grad(self, 2);
      T* gx = wx ? gptr<T>(parent(self, 0)) : nullptr;
      T* gg = wg ? gptr<T>(parent(self, 1)) : nullptr;
      T* gb = wb ? gptr<T>(parent(self, 2)) : nullptr;
      for (i64 r = 0; r < rows; ++r) {
        const T* gr = g + r * c;
        const T* xr = xhat + r * c;
        if (wg) {
          for (int j = 0; j < c; ++j) gg[j] += gr[j] * xr[j];
        }
        if (wb) {
          for (int j = 0; j < c; ++j) gb[j] += gr[j];
        }
        if (wx) {
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (int j = 0; j < c; ++j) {
            T dxh = gr[j] * gam[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xr[j];
          }
          mean_dxhat /= static_cast<T>(c);
          mean_dxhat_xhat /= static_cast<T>(c);
          T* gxr = gx + r * c;
          for (int j = 0; j < c; ++j) {
            T dxh = gr[j] * gam[j];
            gxr[j] += inv[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
          }
        }
      }
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>();
    const T* pg = gamma.data<T>();
    const T* pb = beta.data<T>();
    T* pc = out.data<T>();
    T* xhat = xhat_s->as<T>().data();
    T* inv = inv_s->as<T>().data();
    for (i64 r = 0; r < rows; ++r) {
      const T* xr = px + r * c;
      T mu = 0;
      for (int j = 0; j < c; ++j) mu += xr[j];
      mu /= static_cast<T>(c);
      T var = 0;
      for (int j = 0; j < c; ++j) {
        T d = xr[j] - mu;
        var += d * d;
      }
      var /= static_cast<T>(c);
      T iv = T(1) / std::sqrt(var + static_cast<T>(eps));
      inv[r] = iv;
      T* xh = xhat + r * c;
      T* cr = pc + r * c;
      for (int j = 0; j < c; ++j) {
        xh[j] = (xr[j] - mu) * iv;
        cr[j] = pg[j] * xh[j] + pb[j];
      }
    }
  });
  return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
  check_rows_2d("l2_normalize_rows", x);
  int c = x.dim(1);
  i64 rows = x.dim(0);
  auto norm_s = Storage::make(x.dtype(), static_cast<std::size_t>(rows));
  Tensor out = make_op(x.shape(), x.dtype(), {x}, "l2_normalize_rows",
                       [c, rows, norm_s](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      const T* y = cdptr<T>(&self);
      const T* rn = norm_s->as<T>().data();
      T* gx = gptr<T>(parent(self, 0));
      for (i64 r = 0; r < rows; ++r) {
        const T* gr = g + r * c;
        const T* yr = y + r * c;
        T dot = 0;
        for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
        T* gxr = gx + r * c;
        for (int j = 0; j < c; ++j) gxr[j] += (gr[j] - yr[j] * dot) / rn[r];
      }
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>();
    T* pc = out.data<T>();
    T* rn = norm_s->as<T>().data();
    for (i64 r = 0; r < rows; ++r) {
      const T* xr = px + r * c;
      T s = 0;
      for (int j = 0; j < c; ++j) s += xr[j] * xr[j];
      T nrm = std::sqrt(s + static_cast<T>(1e-24));
      rn[r] = nrm;
      T* cr = pc + r * c;
      for (int j = 0; j < c; ++j) cr[j] = xr[j] / nrm;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gating helpers
// ---------------------------------------------------------------------------

Tensor mul_rows(const Tensor& x, const Tensor& s) {
  check_rows_2d("mul_rows", x);
  check_same_dtype("mul_rows", x, s);
  if (s.rank() != 2 || s.dim(0) != x.dim(0) || s.dim(1) != 1) {
    throw std::invalid_argument("mul_rows: scale " + shape_str(s.shape()) +
                                " does not match rows of " + shape_str(x.shape()));
  }
  int c = x.dim(1);
  i64 rows = x.dim(0);
  Tensor out = make_op(x.shape(), x.dtype(), {x, s}, "mul_rows", [c, rows](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      const T* g = gptr<T>(&self);
      const T* px = cdptr<T>(parent(self, 0));
      const T* ps = cdptr<T>(parent(self, 1));
      if (wants_grad(self, 0)) {
        T* gx = gptr<T>(parent(self, 0));
        for (i64 r = 0; r < rows; ++r) {
          T sv = ps[r];
          const T* gr = g + r * c;
          T* gxr = gx + r * c;
          for (int j = 0; j < c; ++j) gxr[j] += gr[j] * sv;
        }
      }
      if (wants_grad(self, 1)) {
        T* gs = gptr<T>(parent(self, 1));
        for (i64 r = 0; r < rows; ++r) {
          const T* gr = g + r * c;
          const T* xr = px + r * c;
          T acc = 0;
          for (int j = 0; j < c; ++j) acc += gr[j] * xr[j];
          gs[r] += acc;
        }
      }
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>();
    const T* ps = s.data<T>();
    T* pc = out.data<T>();
    for (i64 r = 0; r < rows; ++r) {
      T sv = ps[r];
      const T* xr = px + r * c;
      T* cr = pc + r * c;
      for (int j = 0; j < c; ++j) cr[j] = xr[j] * sv;
    }
  });
  return out;
}

Tensor select_gate(const Tensor& gates, const std::vector<int>& tok,
                   const std::vector<int>& expert) {
  check_rows_2d("select_gate", gates);
  if (tok.size() != expert.size()) {
    throw std::invalid_argument("select_gate: token/expert index lengths differ");
  }
  int t = gates.dim(0), n = gates.dim(1);
  check_row_indices("select_gate", tok, t);
  check_row_indices("select_gate", expert, n);
  int k = static_cast<int>(tok.size());
  Tensor out = make_op({k, 1}, gates.dtype(), {gates}, "select_gate",
                       [tok, expert, n](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      const T* g = gptr<T>(&self);
      T* gg = gptr<T>(parent(self, 0));
      for (std::size_t i = 0; i < tok.size(); ++i) {
        gg[static_cast<i64>(tok[i]) * n + expert[i]] += g[i];
      }
    });
  });
  with_dtype(gates.dtype(), [&]<typename T>() {
    const T* pg = gates.data<T>();
    T* pc = out.data<T>();
    for (std::size_t i = 0; i < tok.size(); ++i) {
      pc[i] = pg[static_cast<i64>(tok[i]) * n + expert[i]];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  Tensor out = make_op({1}, x.dtype(), {x}, "sum_all", [](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      T g = gptr<T>(&self)[0];
      T* gx = gptr<T>(parent(self, 0));
      i64 n = static_cast<i64>(parent(self, 0)->data->numel());
      for (i64 i = 0; i < n; ++i) gx[i] += g;
    });
  });
  with_dtype(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>();
    T acc = 0;
    for (i64 i = 0; i < x.numel(); ++i) acc += px[i];
    out.data<T>()[0] = acc;
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  return scalar_mul(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<double>& weights) {
  check_rows_2d("cross_entropy", logits);
  i64 t = logits.dim(0);
  int v = logits.dim(1);
  if (static_cast<i64>(targets.size()) != t || static_cast<i64>(weights.size()) != t) {
    throw std::invalid_argument("cross_entropy: expected " + std::to_string(t) +
                                " targets/weights, got " + std::to_string(targets.size()) +
                                "/" + std::to_string(weights.size()));
  }
  double wsum = 0;
  for (i64 r = 0; r < t; ++r) {
    int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= v) {
      throw std::out_of_range("cross_entropy: target index " + std::to_string(y) +
                              " out of range for vocabulary of " + std::to_string(v));
    }
    if (weights[static_cast<std::size_t>(r)] < 0) {
      throw std::invalid_argument("cross_entropy: negative weight");
    }
    wsum += weights[static_cast<std::size_t>(r)];
  }
  if (wsum <= 0) throw std::invalid_argument("cross_entropy: all weights are zero");

  auto lse_s = Storage::make(logits.dtype(), static_cast<std::size_t>(t));
  Tensor out = make_op({1}, logits.dtype(), {logits}, "cross_entropy",
                       [targets, weights, wsum, v, t, lse_s](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      T g = gptr<T>(&self)[0];
      const T* x = cdptr<T>(parent(self, 0));
      const T* lse = lse_s->as<T>().data();
      T* gx = gptr<T>(parent(self, 0));
      for (i64 r = 0; r < t; ++r) {
        double w = weights[static_cast<std::size_t>(r)];
        if (w == 0) continue;
        T scale = g * static_cast<T>(w / wsum);
        const T* xr = x + r * v;
        T* gxr = gx + r * v;
        for (int j = 0; j < v; ++j) {
          T p = std::exp(xr[j] - lse[r]);
          gxr[j] += scale * (p - (j == targets[static_cast<std::size_t>(r)] ? T(1) : T(0)));
        }
      }
    });
  });
  with_dtype(logits.dtype(), [&]<typename T>() {
    const T* x = logits.data<T>();
    T* lse = lse_s->as<T>().data();
    double acc = 0;
    for (i64 r = 0; r < t; ++r) {
      const T* xr = x + r * v;
      T m = xr[0];
      for (int j = 1; j < v; ++j) m = std::max(m, xr[j]);
      T s = 0;
      for (int j = 0; j < v; ++j) s += std::exp(xr[j] - m);
      lse[r] = m + std::log(s);
      double nll = static_cast<double>(lse[r] - xr[targets[static_cast<std::size_t>(r)]]);
      acc += weights[static_cast<std::size_t>(r)] * nll;
    }
    out.data<T>()[0] = static_cast<T>(acc / wsum);
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, int target) {
  Tensor flat = logits;
  if (logits.rank() == 1) {
    flat = reshape(logits, {1, logits.dim(0)});
  } else if (logits.rank() != 2 || logits.dim(0) != 1) {
    throw std::invalid_argument("cross_entropy: expected (V) or (1, V) logits, got " +
                                shape_str(logits.shape()));
  }
  return cross_entropy_rows(flat, {target}, {1.0});
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  check_same_shape("mse", pred, target);
  check_same_dtype("mse", pred, target);
  i64 n = pred.numel();
  Tensor out = make_op({1}, pred.dtype(), {pred, target}, "mse", [n](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      T g = gptr<T>(&self)[0];
      const T* p = cdptr<T>(parent(self, 0));
      const T* q = cdptr<T>(parent(self, 1));
      T scale = g * T(2) / static_cast<T>(n);
      if (wants_grad(self, 0)) {
        T* gp = gptr<T>(parent(self, 0));
        for (i64 i = 0; i < n; ++i) gp[i] += scale * (p[i] - q[i]);
      }
      if (wants_grad(self, 1)) {
        T* gq = gptr<T>(parent(self, 1));
        for (i64 i = 0; i < n; ++i) gq[i] -= scale * (p[i] - q[i]);
      }
    });
  });
  with_dtype(pred.dtype(), [&]<typename T>() {
    const T* p = pred.data<T>();
    const T* q = target.data<T>();
    double acc = 0;
    for (i64 i = 0; i < n; ++i) {
      double d = static_cast<double>(p[i]) - static_cast<double>(q[i]);
      acc += d * d;
    }
    out.data<T>()[0] = static_cast<T>(acc / static_cast<double>(n));
  });
  return out;
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& labels) {
  i64 t = logits.numel();
  if (static_cast<i64>(labels.size()) != t) {
    throw std::invalid_argument("bce_with_logits: expected " + std::to_string(t) +
                                " labels, got " + std::to_string(labels.size()));
  }
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw std::invalid_argument("bce_with_logits: labels must be 0 or 1");
  }
  Tensor out = make_op({1}, logits.dtype(), {logits}, "bce_with_logits",
                       [labels, t](Node& self) {
    with_dtype(self.dtype, [&]<typename T>() {
      if (!wants_grad(self, 0)) return;
      T g = gptr<T>(&self)[0];
      const T* z = cdptr<T>(parent(self, 0));
      T* gz = gptr<T>(parent(self, 0));
      T scale = g / static_cast<T>(t);
      for (i64 i = 0; i < t; ++i) {
        double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(z[i])));
        gz[i] += scale * static_cast<T>(sig - labels[static_cast<std::size_t>(i)]);
      }
    });
  });
  with_dtype(logits.dtype(), [&]<typename T>() {
    const T* z = logits.data<T>();
    double acc = 0;
    for (i64 i = 0; i < t; ++i) {
      double zi = static_cast<double>(z[i]);
      // softplus(z) - y*z, computed stably
      double sp = std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi)));
      acc += sp - labels[static_cast<std::size_t>(i)] * zi;
    }
    out.data<T>()[0] = static_cast<T>(acc / static_cast<double>(t));
  });
  return out;
}

}  // namespace eve
