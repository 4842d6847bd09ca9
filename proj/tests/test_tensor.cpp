#include <doctest.h>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "eve/gradcheck.hpp"
#include "eve/ops.hpp"
#include "eve/rng.hpp"
#include "eve/tensor.hpp"

using namespace eve;

namespace {

Tensor t64(std::vector<int> shape, std::vector<double> vals, bool rg = false) {
  return Tensor::from_vec(std::move(shape), vals, DType::F64, rg);
}

Tensor random_t64(Rng& rng, std::vector<int> shape, bool rg = true, double scale = 1.0) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> vals(static_cast<std::size_t>(n));
  for (auto& v : vals) v = rng.normal() * scale;
  return Tensor::from_vec(std::move(shape), vals, DType::F64, rg);
}

void expect_close(const Tensor& t, const std::vector<double>& want, double tol = 1e-6) {
  REQUIRE(t.numel() == static_cast<std::int64_t>(want.size()));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    CHECK(t.flat(i) == doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(0).scale(1).epsilon(tol));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Construction and bookkeeping
// ---------------------------------------------------------------------------

TEST_CASE("factories produce the right shape, dtype and contents") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.shape() == std::vector<int>{2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.dtype() == DType::F32);
  for (int i = 0; i < 6; ++i) CHECK(z.flat(i) == 0.0);

  Tensor f = Tensor::full({2}, 1.5, DType::F64);
  CHECK(f.flat(0) == 1.5);
  CHECK(f.flat(1) == 1.5);

  Tensor s = Tensor::scalar(-2.0);
  CHECK(s.numel() == 1);
  CHECK(s.item() == doctest::Approx(-2.0));
}

TEST_CASE("non-positive dimensions are rejected") {
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({-1}), std::invalid_argument);
}

TEST_CASE("storage accounting tracks live bytes and the high-water mark") {
  std::int64_t before = memstat::current_bytes();
  memstat::reset_peak();
  {
    Tensor big = Tensor::zeros({256, 256}, DType::F64);
    CHECK(memstat::current_bytes() >= before + 256 * 256 * 8);
    CHECK(memstat::peak_bytes() >= before + 256 * 256 * 8);
  }
  CHECK(memstat::current_bytes() == before);
  CHECK(memstat::peak_bytes() >= before + 256 * 256 * 8);
}

TEST_CASE("dtype conversion round-trips values") {
  Tensor a = t64({3}, {1.5, -2.25, 0.125});
  Tensor f = a.to(DType::F32);
  CHECK(f.dtype() == DType::F32);
  Tensor back = f.to(DType::F64);
  expect_close(back, {1.5, -2.25, 0.125});
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST_CASE("matmul by the identity returns its input") {
  Tensor i2 = t64({2, 2}, {1, 0, 0, 1});
  Tensor v = t64({2, 1}, {3, 4});
  expect_close(matmul(i2, v), {3, 4});
}

TEST_CASE("matmul matches hand multiplication") {
  Tensor a = t64({2, 2}, {1, 2, 3, 4});
  Tensor b = t64({2, 1}, {5, 6});
  expect_close(matmul(a, b), {17, 39});
  Tensor c = t64({2, 2}, {5, 6, 7, 8});
  expect_close(matmul(a, c), {19, 22, 43, 50});
}

TEST_CASE("matmul rejects disagreeing inner dimensions, naming both shapes") {
  Tensor a = t64({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = t64({2, 2}, {1, 2, 3, 4});
  try {
    matmul(a, b);
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2x3)") != std::string::npos);
    CHECK(msg.find("(2x2)") != std::string::npos);
  }
}

TEST_CASE("matmul backward gives dA = dC*B^T and dB = A^T*dC") {
  Tensor a = t64({1, 2}, {1, 2}, true);
  Tensor b = t64({2, 1}, {1, 1}, true);
  Tensor loss = sum_all(matmul(a, b));
  backward(loss);
  CHECK(a.grad_flat(0) == doctest::Approx(1));
  CHECK(a.grad_flat(1) == doctest::Approx(1));
  CHECK(b.grad_flat(0) == doctest::Approx(1));
  CHECK(b.grad_flat(1) == doctest::Approx(2));
}

TEST_CASE("bmm multiplies each batch independently") {
  Tensor a = t64({2, 1, 2}, {1, 2, 3, 4});
  Tensor b = t64({2, 2, 1}, {1, 1, 1, 1});
  expect_close(bmm(a, b), {3, 7});
  Rng rng = Rng::from_seed(11);
  Tensor x = random_t64(rng, {3, 2, 4}, false);
  Tensor y = random_t64(rng, {3, 4, 2}, false);
  Tensor full = bmm(x, y);
  auto xv = x.to_vec();
  auto yv = y.to_vec();
  for (int bi = 0; bi < 3; ++bi) {
    Tensor xs = Tensor::from_vec({2, 4},
                                 std::vector<double>(xv.begin() + bi * 8, xv.begin() + bi * 8 + 8),
                                 DType::F64);
    Tensor ys = Tensor::from_vec({4, 2},
                                 std::vector<double>(yv.begin() + bi * 8, yv.begin() + bi * 8 + 8),
                                 DType::F64);
    Tensor ref = matmul(xs, ys);
    for (int i = 0; i < 4; ++i) {
      CHECK(full.flat(bi * 4 + i) == doctest::Approx(ref.flat(i)));
    }
  }
}

// ---------------------------------------------------------------------------
// softmax / layer_norm
// ---------------------------------------------------------------------------

TEST_CASE("softmax of uniform logits is uniform") {
  expect_close(softmax(t64({3}, {0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3});
}

TEST_CASE("softmax matches the closed form for [2,0]") {
  Tensor y = softmax(t64({2}, {2, 0}), 0);
  CHECK(y.flat(0) == doctest::Approx(0.8808).epsilon(1e-3));
  CHECK(y.flat(1) == doctest::Approx(0.1192).epsilon(1e-3));
}

TEST_CASE("softmax survives large logits without overflow") {
  Tensor y = softmax(t64({2}, {1000, 0}), 0);
  CHECK(std::isfinite(y.flat(0)));
  CHECK(y.flat(0) == doctest::Approx(1.0));
  CHECK(y.flat(1) == doctest::Approx(0.0));
}

TEST_CASE("softmax rows sum to one and lie in (0,1)") {
  Rng rng = Rng::from_seed(21);
  Tensor x = random_t64(rng, {5, 7}, false, 3.0);
  Tensor y = softmax(x, 1);
  for (int r = 0; r < 5; ++r) {
    double s = 0;
    for (int j = 0; j < 7; ++j) {
      double v = y.flat(r * 7 + j);
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("softmax over a non-trailing axis normalizes that axis") {
  Tensor x = t64({2, 2}, {0, 10, 0, 10});
  Tensor y = softmax(x, 0);
  CHECK(y.flat(0) == doctest::Approx(0.5));
  CHECK(y.flat(2) == doctest::Approx(0.5));
  CHECK(y.flat(1) == doctest::Approx(0.5));
}

TEST_CASE("softmax rejects non-finite input") {
  Tensor x = t64({2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(softmax(x, 0), std::domain_error);
}

TEST_CASE("layer_norm maps a constant row to beta") {
  Tensor x = t64({1, 4}, {5, 5, 5, 5});
  Tensor gamma = t64({4}, {1, 1, 1, 1});
  Tensor beta = t64({4}, {0, 0, 0, 0});
  Tensor y = layer_norm(x, gamma, beta);
  for (int i = 0; i < 4; ++i) CHECK(y.flat(i) == doctest::Approx(0.0).epsilon(1e-4));
}

TEST_CASE("layer_norm normalizes [1,3] to [-1,1]") {
  Tensor y = layer_norm(t64({1, 2}, {1, 3}), t64({2}, {1, 1}), t64({2}, {0, 0}));
  CHECK(y.flat(0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.flat(1) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("l2_normalize_rows produces unit rows preserving direction") {
  Tensor x = t64({2, 2}, {3, 4, 0, 2});
  Tensor y = l2_normalize_rows(x);
  CHECK(y.flat(0) == doctest::Approx(0.6));
  CHECK(y.flat(1) == doctest::Approx(0.8));
  CHECK(y.flat(2) == doctest::Approx(0.0));
  CHECK(y.flat(3) == doctest::Approx(1.0));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

TEST_CASE("cross_entropy of uniform logits is ln V") {
  Tensor logits = t64({4}, {0, 0, 0, 0});
  CHECK(cross_entropy(logits, 2).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("cross_entropy matches -log(0.8808) for [2,0] target 0") {
  CHECK(cross_entropy(t64({2}, {2, 0}), 0).item() == doctest::Approx(0.1269).epsilon(1e-3));
}

TEST_CASE("cross_entropy rejects out-of-range targets") {
  CHECK_THROWS_AS(cross_entropy(t64({3}, {0, 0, 0}), 3), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy(t64({3}, {0, 0, 0}), -1), std::out_of_range);
}

TEST_CASE("weighted cross_entropy averages only over weighted rows") {
  Tensor logits = t64({3, 2}, {2, 0, 0, 2, 5, 5});
  // row 2 has weight zero; rows 0 and 1 both have nll -log(0.8808)
  Tensor loss = cross_entropy_rows(logits, {0, 1, 0}, {1.0, 1.0, 0.0});
  CHECK(loss.item() == doctest::Approx(0.1269).epsilon(1e-3));
  CHECK_THROWS_AS(cross_entropy_rows(logits, {0, 0, 0}, {0.0, 0.0, 0.0}),
                  std::invalid_argument);
}

TEST_CASE("zero-weight rows contribute no gradient") {
  Tensor logits = t64({2, 2}, {1, -1, 2, 0}, true);
  backward(cross_entropy_rows(logits, {0, 0}, {1.0, 0.0}));
  CHECK(logits.grad_flat(0) != 0.0);
  CHECK(logits.grad_flat(2) == 0.0);
  CHECK(logits.grad_flat(3) == 0.0);
}

TEST_CASE("mse of a tensor with itself is zero with zero gradient") {
  Tensor x = t64({3}, {1, 2, 3}, true);
  Tensor loss = mse(x, x.detach().clone_data());
  CHECK(loss.item() == 0.0);
  backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(x.grad_flat(i) == 0.0);
}

TEST_CASE("mse matches the hand-computed mean of squared differences") {
  CHECK(mse(t64({2}, {1, 2}), t64({2}, {0, 0})).item() == doctest::Approx(2.5));
}

TEST_CASE("bce_with_logits matches the stable closed form") {
  // logit +2 on a positive and logit -2 on a negative both cost ln(1+e^-2)
  double want = std::log(1.0 + std::exp(-2.0));
  CHECK(bce_with_logits(t64({1}, {2.0}), {1.0}).item() == doctest::Approx(want).epsilon(1e-6));
  CHECK(bce_with_logits(t64({1}, {-2.0}), {0.0}).item() == doctest::Approx(want).epsilon(1e-6));
  CHECK_THROWS_AS(bce_with_logits(t64({1}, {0.0}), {0.5}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// backward: contracts and analytic examples
// ---------------------------------------------------------------------------

TEST_CASE("backward of a sum is all ones") {
  Tensor x = t64({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum_all(x));
  for (int i = 0; i < 6; ++i) CHECK(x.grad_flat(i) == doctest::Approx(1.0));
}

TEST_CASE("backward of sum(x*x) is 2x") {
  Tensor x = t64({3}, {1, 2, 3}, true);
  backward(sum_all(mul(x, x)));
  expect_close(x.grad(), {2, 4, 6});
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = t64({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(add(x, x)), std::invalid_argument);
}

TEST_CASE("repeated backward calls accumulate additively") {
  Tensor x = t64({2}, {1, 2}, true);
  Tensor loss = sum_all(mul(x, x));
  backward(loss);
  backward(loss);
  expect_close(x.grad(), {4, 8});
}

TEST_CASE("backward is linear in the loss") {
  Rng rng = Rng::from_seed(31);
  Tensor x = random_t64(rng, {4}, true);
  auto grad_of = [&](double a, double b) {
    x.ensure_grad();
    x.zero_grad();
    Tensor l1 = sum_all(mul(x, x));
    Tensor l2 = sum_all(gelu(x));
    backward(add(scalar_mul(l1, a), scalar_mul(l2, b)));
    return x.grad().to_vec();
  };
  auto g10 = grad_of(1, 0);
  auto g01 = grad_of(0, 1);
  auto gmix = grad_of(2.0, -0.5);
  for (int i = 0; i < 4; ++i) {
    CHECK(gmix[static_cast<std::size_t>(i)] ==
          doctest::Approx(2.0 * g10[static_cast<std::size_t>(i)] -
                          0.5 * g01[static_cast<std::size_t>(i)]).epsilon(1e-10));
  }
}

TEST_CASE("parameters unreachable from the loss receive no gradient") {
  Tensor used = t64({2}, {1, 2}, true);
  Tensor unused = t64({2}, {3, 4}, true);
  unused.ensure_grad();
  backward(sum_all(mul(used, used)));
  CHECK(unused.grad_flat(0) == 0.0);
  CHECK(unused.grad_flat(1) == 0.0);
}

TEST_CASE("constant inputs are skipped: no grad buffer appears on them") {
  Tensor w = t64({2}, {1, 2}, true);
  Tensor c = t64({2}, {5, 5}, false);
  backward(sum_all(mul(w, c)));
  CHECK(w.has_grad());
  expect_close(w.grad(), {5, 5});
  CHECK(!c.has_grad());
}

TEST_CASE("a diamond-shaped graph accumulates both paths") {
  // loss = sum(x*x + x) -> dx = 2x + 1
  Tensor x = t64({2}, {3, -1}, true);
  backward(sum_all(add(mul(x, x), x)));
  expect_close(x.grad(), {7, -1});
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

TEST_CASE("reshape shares storage and routes gradients through") {
  Tensor x = t64({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor r = reshape(x, {3, 2});
  CHECK(r.node()->data.get() == x.node()->data.get());
  CHECK_THROWS_AS(reshape(x, {4, 2}), std::invalid_argument);
  backward(sum_all(mul(r, r)));
  expect_close(x.grad(), {2, 4, 6, 8, 10, 12});
}

TEST_CASE("permute reorders axes and transpose2d is its own inverse") {
  Tensor x = t64({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor t = transpose2d(x);
  CHECK(t.shape() == std::vector<int>{3, 2});
  expect_close(t, {1, 4, 2, 5, 3, 6});
  expect_close(transpose2d(t), {1, 2, 3, 4, 5, 6});

  Tensor y = t64({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor p = permute(y, {2, 0, 1});
  CHECK(p.shape() == std::vector<int>{2, 2, 2});
  // p[k][i][j] = y[i][j][k]
  CHECK(p.flat(0) == 0);  // y[0][0][0]
  CHECK(p.flat(1) == 2);  // y[0][1][0]
  CHECK(p.flat(4) == 1);  // y[0][0][1]
  CHECK_THROWS_AS(permute(y, {0, 0, 1}), std::invalid_argument);
}

TEST_CASE("concat then slice recovers each part") {
  Tensor a = t64({2, 2}, {1, 2, 3, 4});
  Tensor b = t64({2, 3}, {5, 6, 7, 8, 9, 10});
  Tensor c = concat({a, b}, 1);
  CHECK(c.shape() == std::vector<int>{2, 5});
  expect_close(slice(c, 1, 0, 2), {1, 2, 3, 4});
  expect_close(slice(c, 1, 2, 3), {5, 6, 7, 8, 9, 10});
  CHECK_THROWS_AS(concat({a, t64({3, 2}, {0, 0, 0, 0, 0, 0})}, 1), std::invalid_argument);
  CHECK_THROWS_AS(slice(c, 1, 4, 2), std::invalid_argument);
}

TEST_CASE("gather_rows picks rows and accumulates duplicates in backward") {
  Tensor x = t64({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor g = gather_rows(x, {2, 0, 2});
  expect_close(g, {5, 6, 1, 2, 5, 6});
  backward(sum_all(g));
  expect_close(x.grad(), {1, 1, 0, 0, 2, 2});
  CHECK_THROWS_AS(gather_rows(x, {3}), std::out_of_range);
}

TEST_CASE("scatter_rows overwrites target rows and demands unique indices") {
  Tensor base = t64({3, 2}, {0, 0, 0, 0, 0, 0}, true);
  Tensor rows = t64({2, 2}, {1, 2, 3, 4}, true);
  Tensor out = scatter_rows(base, {2, 0}, rows);
  expect_close(out, {3, 4, 0, 0, 1, 2});
  backward(sum_all(mul(out, out)));
  // overwritten base rows get zero grad; kept row flows through
  CHECK(base.grad_flat(0) == 0.0);
  CHECK(base.grad_flat(4) == 0.0);
  expect_close(rows.grad(), {2, 4, 6, 8});
  CHECK_THROWS_AS(scatter_rows(base, {1, 1}, rows), std::out_of_range);
}

TEST_CASE("index_add adds rows in place and lets base grads pass") {
  Tensor base = t64({2, 2}, {1, 1, 1, 1}, true);
  Tensor rows = t64({2, 2}, {10, 20, 30, 40}, true);
  Tensor out = index_add(base, {1, 1}, rows);
  expect_close(out, {1, 1, 41, 61});
  backward(sum_all(out));
  expect_close(base.grad(), {1, 1, 1, 1});
  expect_close(rows.grad(), {1, 1, 1, 1});
}

TEST_CASE("tile_rows repeats a row and sums gradients back") {
  Tensor row = t64({3}, {1, 2, 3}, true);
  Tensor tiled = tile_rows(row, 4);
  CHECK(tiled.shape() == std::vector<int>{4, 3});
  expect_close(slice(tiled, 0, 3, 1), {1, 2, 3});
  backward(sum_all(tiled));
  expect_close(row.grad(), {4, 4, 4});
}

TEST_CASE("add_bias broadcasts over rows; add_broadcast0 over the lead axis") {
  Tensor x = t64({2, 3}, {0, 0, 0, 10, 10, 10});
  Tensor b = t64({3}, {1, 2, 3});
  expect_close(add_bias(x, b), {1, 2, 3, 11, 12, 13});
  CHECK_THROWS_AS(add_bias(x, t64({2}, {1, 2})), std::invalid_argument);

  Tensor seq = t64({2, 2, 2}, {0, 0, 0, 0, 1, 1, 1, 1});
  Tensor pos = t64({2, 2}, {1, 2, 3, 4});
  expect_close(add_broadcast0(seq, pos), {1, 2, 3, 4, 2, 3, 4, 5});
}

TEST_CASE("mask_invalid_keys drives masked keys to negligible attention") {
  // two groups of rows with different validity patterns
  Tensor scores = t64({2, 1, 3}, {0, 0, 0, 0, 0, 0});
  std::vector<std::uint8_t> valid = {1, 1, 0, 1, 0, 0};
  Tensor masked = mask_invalid_keys(scores, valid, 2);
  Tensor att = softmax(masked, 2);
  CHECK(att.flat(0) == doctest::Approx(0.5));
  CHECK(att.flat(1) == doctest::Approx(0.5));
  CHECK(att.flat(2) == doctest::Approx(0.0));
  CHECK(att.flat(3) == doctest::Approx(1.0));
  CHECK(att.flat(4) == doctest::Approx(0.0));
  CHECK_THROWS_AS(mask_invalid_keys(scores, {1, 1}, 2), std::invalid_argument);
}

TEST_CASE("mul_rows scales each row; select_gate pulls chosen gate entries") {
  Tensor x = t64({2, 2}, {1, 2, 3, 4});
  Tensor s = t64({2, 1}, {10, 0.5});
  expect_close(mul_rows(x, s), {10, 20, 1.5, 2});

  Tensor gates = t64({2, 3}, {0.1, 0.7, 0.2, 0.5, 0.3, 0.2});
  Tensor sel = select_gate(gates, {0, 1}, {1, 0});
  expect_close(sel, {0.7, 0.5});
}

// ---------------------------------------------------------------------------
// Finite-difference oracle across the op surface
// ---------------------------------------------------------------------------

namespace {

void fd_pass(const char* what, const std::function<Tensor()>& make_loss,
             std::vector<std::pair<std::string, Tensor>> params) {
  GradCheckReport rep = check_gradients(make_loss, params);
  INFO(what << ": worst " << rep.worst_param << "[" << rep.worst_index
            << "] analytic=" << rep.worst_analytic << " fd=" << rep.worst_fd);
  CHECK(rep.max_rel_err <= 1e-4);
}

}  // namespace

TEST_CASE("every differentiable op matches finite differences at random points") {
  Rng rng = Rng::from_seed(2024);

  Tensor a = random_t64(rng, {3, 4});
  Tensor b = random_t64(rng, {4, 2});
  fd_pass("matmul", [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); },
          {{"a", a}, {"b", b}});

  Tensor x = random_t64(rng, {2, 3, 2});
  Tensor y = random_t64(rng, {2, 2, 3});
  fd_pass("bmm", [&] { return sum_all(gelu(bmm(x, y))); }, {{"x", x}, {"y", y}});

  Tensor sx = random_t64(rng, {3, 5});
  fd_pass("softmax", [&] { return sum_all(mul(softmax(sx, 1), softmax(sx, 1))); },
          {{"sx", sx}});

  Tensor lx = random_t64(rng, {4, 6});
  Tensor gamma = random_t64(rng, {6}, true, 0.5);
  Tensor beta = random_t64(rng, {6}, true, 0.5);
  fd_pass("layer_norm", [&] { return sum_all(mul(layer_norm(lx, gamma, beta),
                                                 layer_norm(lx, gamma, beta))); },
          {{"lx", lx}, {"gamma", gamma}, {"beta", beta}});

  Tensor gx = random_t64(rng, {7});
  fd_pass("gelu", [&] { return sum_all(gelu(gx)); }, {{"gx", gx}});

  Tensor rx = random_t64(rng, {5});
  fd_pass("recip", [&] { return sum_all(recip(scalar_add(mul(rx, rx), 1.0))); },
          {{"rx", rx}});

  Tensor nx = random_t64(rng, {3, 4});
  fd_pass("l2_normalize_rows",
          [&] { return sum_all(mul(l2_normalize_rows(nx), l2_normalize_rows(nx))); },
          {{"nx", nx}});

  Tensor ce = random_t64(rng, {3, 5});
  fd_pass("cross_entropy_rows",
          [&] { return cross_entropy_rows(ce, {1, 4, 0}, {1.0, 0.5, 2.0}); }, {{"ce", ce}});

  Tensor mp = random_t64(rng, {2, 3});
  Tensor mt = random_t64(rng, {2, 3});
  fd_pass("mse", [&] { return mse(mp, mt); }, {{"mp", mp}, {"mt", mt}});

  Tensor bl = random_t64(rng, {4});
  fd_pass("bce_with_logits", [&] { return bce_with_logits(bl, {1.0, 0.0, 1.0, 0.0}); },
          {{"bl", bl}});

  Tensor pc = random_t64(rng, {2, 3, 2});
  fd_pass("permute", [&] { return sum_all(mul(permute(pc, {2, 0, 1}), permute(pc, {2, 0, 1}))); },
          {{"pc", pc}});

  Tensor c1 = random_t64(rng, {2, 2});
  Tensor c2 = random_t64(rng, {2, 3});
  fd_pass("concat+slice",
          [&] {
            Tensor c = concat({c1, c2}, 1);
            return sum_all(mul(slice(c, 1, 1, 3), slice(c, 1, 1, 3)));
          },
          {{"c1", c1}, {"c2", c2}});

  Tensor gr = random_t64(rng, {4, 3});
  fd_pass("gather+scatter",
          [&] {
            Tensor picked = gather_rows(gr, {3, 1, 1});
            Tensor back = scatter_rows(gr, {0, 2}, gather_rows(gr, {3, 1}));
            return add(sum_all(mul(picked, picked)), sum_all(mul(back, back)));
          },
          {{"gr", gr}});

  Tensor ia = random_t64(rng, {3, 2});
  Tensor ir = random_t64(rng, {2, 2});
  fd_pass("index_add",
          [&] {
            Tensor out = index_add(ia, {1, 1}, ir);
            return sum_all(mul(out, out));
          },
          {{"ia", ia}, {"ir", ir}});

  Tensor mr = random_t64(rng, {3, 4});
  Tensor ms = random_t64(rng, {3, 1});
  fd_pass("mul_rows", [&] { return sum_all(gelu(mul_rows(mr, ms))); },
          {{"mr", mr}, {"ms", ms}});

  Tensor sg = random_t64(rng, {4, 3});
  fd_pass("select_gate",
          [&] {
            Tensor gates = softmax(sg, 1);
            Tensor sel = select_gate(gates, {0, 2, 3}, {1, 0, 2});
            return sum_all(mul(sel, sel));
          },
          {{"sg", sg}});

  Tensor st = random_t64(rng, {1});
  Tensor sv = random_t64(rng, {2, 3});
  fd_pass("mul_scalar_tensor", [&] { return sum_all(mul(mul_scalar_tensor(sv, st),
                                                        mul_scalar_tensor(sv, st))); },
          {{"st", st}, {"sv", sv}});

  Tensor tr = random_t64(rng, {4});
  fd_pass("tile_rows", [&] { return sum_all(mul(tile_rows(tr, 3), tile_rows(tr, 3))); },
          {{"tr", tr}});

  Tensor ab = random_t64(rng, {5, 3});
  Tensor bb = random_t64(rng, {3});
  fd_pass("add_bias", [&] { return sum_all(gelu(add_bias(ab, bb))); },
          {{"ab", ab}, {"bb", bb}});
}

TEST_CASE("the gradient checker notices a deliberately broken derivative") {
  Rng rng = Rng::from_seed(55);
  Tensor x = random_t64(rng, {6});
  testing::gelu_derivative_scale = 1.01;  // 1% error injected into gelu backward
  GradCheckReport rep = check_gradients([&] { return sum_all(gelu(x)); }, {{"x", x}});
  testing::gelu_derivative_scale = 1.0;
  CHECK(rep.max_rel_err > 1e-4);
  CHECK(!rep.pass);
}

TEST_CASE("gradcheck subsampling checks the requested number of elements") {
  Rng rng = Rng::from_seed(77);
  Tensor x = random_t64(rng, {10, 10});
  GradCheckOptions opt;
  opt.max_per_param = 7;
  GradCheckReport rep = check_gradients([&] { return sum_all(mul(x, x)); }, {{"x", x}}, opt);
  CHECK(rep.checked == 7);
  CHECK(rep.pass);
}
