#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "hbfp/bfp.hpp"
#include "hbfp/gradcheck.hpp"
#include "hbfp/rng.hpp"

using namespace hbfp;

namespace {

Tensor rand_tensor(Shape dims, std::uint64_t seed, double stddev = 1.0) {
  auto rng = substream(seed, "test-bfp");
  return Tensor::randn(std::move(dims), rng, stddev);
}

// Eval-mode batch norm becomes the exact identity with these buffer values
// (gamma=1, beta=0 hold from initialization): 1/sqrt((1-eps)+eps) == 1.
void make_identity(BatchNorm& bn) {
  std::fill(bn.running_mean.values().begin(), bn.running_mean.values().end(), 0.0);
  std::fill(bn.running_var.values().begin(), bn.running_var.values().end(), 1.0 - 1e-5);
}

void make_identity(BfpParams& params) {
  make_identity(params.bn_u);
  make_identity(params.bn_v);
  make_identity(params.bn_u_prime);
  make_identity(params.bn_v_prime);
  make_identity(params.bn_p_x);
  make_identity(params.bn_p_y);
}

struct Fixture {
  ParamRegistry reg;
  std::mt19937_64 rng;
  BfpParams params;
  Fixture(std::size_t da, std::size_t db, std::size_t l, std::size_t lp, std::uint64_t seed = 1)
      : rng(substream(seed, "fixture")), params(reg, "bfp", da, db, l, lp, rng) {}
};

}  // namespace

TEST_CASE("self_awareness: zero mask conv halves the input, zero input stays zero") {
  ParamRegistry reg;
  auto rng = substream(2, "mask");
  Conv2dLayer mask(reg, "mask", 3, 1, 1, 1, 0, rng);
  std::fill(mask.weight.values().begin(), mask.weight.values().end(), 0.0);

  Tensor f = rand_tensor({3, 4, 2}, 3);
  Tensor out = self_awareness(f, mask);
  REQUIRE(out.shape() == f.shape());
  for (std::size_t i = 0; i < f.numel(); ++i)
    CHECK(out.at(i) == doctest::Approx(0.5 * f.at(i)).epsilon(1e-15));

  auto rng2 = substream(3, "mask2");
  Conv2dLayer live(reg, "live", 3, 1, 1, 1, 0, rng2);
  Tensor zero = Tensor::zeros({3, 4, 2});
  Tensor z = self_awareness(zero, live);
  for (std::size_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == 0.0);

  CHECK_THROWS_AS(self_awareness(rand_tensor({2, 4, 2}, 4), mask), ShapeError);
}

TEST_CASE("self_awareness: gradcheck through mask and product") {
  GradCheckCase input_side;
  input_side.name = "self_awareness-input";
  input_side.build = [](std::uint64_t s) {
    auto reg = std::make_shared<ParamRegistry>();
    auto rng = substream(s, "sa-grad");
    auto mask = std::make_shared<Conv2dLayer>(*reg, "m", 3, 1, 1, 1, 0, rng);
    Tensor w = rand_tensor({3, 4, 2}, s ^ 1);
    ScalarFn f = [mask, reg, w](const Tensor& t) {
      return sum(hadamard(self_awareness(t, *mask), w));
    };
    return std::make_pair(f, rand_tensor({3, 4, 2}, s));
  };
  auto ri = run_gradcheck_case(input_side, 20);
  INFO("input err=", ri.max_rel_err);
  CHECK(ri.passed);

  GradCheckCase weight_side;
  weight_side.name = "self_awareness-mask-weight";
  weight_side.build = [](std::uint64_t s) {
    Tensor x = rand_tensor({1, 3, 4, 2}, s ^ 1);
    Tensor bias = Tensor::zeros({1});
    Tensor w = rand_tensor({1, 3, 4, 2}, s ^ 2);
    ScalarFn f = [x, bias, w](const Tensor& t) {
      Tensor mask = sigmoid(conv2d(x, t, bias, 1, 0));
      return sum(hadamard(hadamard(x, mask), w));
    };
    return std::make_pair(f, rand_tensor({1, 3, 1, 1}, s, 0.5));
  };
  auto rw = run_gradcheck_case(weight_side, 20);
  INFO("weight err=", rw.max_rel_err);
  CHECK(rw.passed);
}

TEST_CASE("flatten_spatial: bijection, index case, norm preservation") {
  Tensor f = rand_tensor({3, 2, 4}, 5);
  Tensor rows = flatten_spatial(f);
  REQUIRE(rows.shape() == Shape{8, 3});
  Tensor back = unflatten_spatial(rows, 3, 2, 4);
  for (std::size_t i = 0; i < f.numel(); ++i) CHECK(back.at(i) == f.at(i));

  Tensor small = Tensor::from_data({2, 1, 2}, {1, 2, 3, 4});
  Tensor r = flatten_spatial(small);
  CHECK(r.at(0, 0) == 1.0);
  CHECK(r.at(0, 1) == 3.0);
  CHECK(r.at(1, 0) == 2.0);
  CHECK(r.at(1, 1) == 4.0);

  double norm_f = 0.0, norm_r = 0.0;
  for (std::size_t i = 0; i < f.numel(); ++i) norm_f += f.at(i) * f.at(i);
  for (std::size_t i = 0; i < rows.numel(); ++i) norm_r += rows.at(i) * rows.at(i);
  CHECK(norm_f == doctest::Approx(norm_r).epsilon(1e-15));
}

TEST_CASE("correlation_maps: single cell gives the trivial map") {
  Fixture fx(3, 4, 2, 3);
  Tensor xp = rand_tensor({1, 3}, 6);
  Tensor yp = rand_tensor({1, 4}, 7);
  auto pair = correlation_maps(xp, yp, fx.params);
  REQUIRE(pair.c_x.shape() == Shape{1, 1});
  CHECK(pair.c_x.at(0) == 1.0);
  CHECK(pair.c_y.at(0) == 1.0);
}

TEST_CASE("correlation_maps: scalar oracle at N=2, L=1") {
  Fixture fx(1, 1, 1, 1);
  make_identity(fx.params);
  fx.params.u.values() = {1.0};
  fx.params.v.values() = {1.0};
  fx.params.p.values() = {1.0};
  Tensor xp = Tensor::from_data({2, 1}, {1, 2});
  Tensor yp = Tensor::from_data({2, 1}, {1, 3});
  auto pair = correlation_maps(xp, yp, fx.params, /*training=*/false);

  CHECK(pair.raw_x.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pair.raw_x.at(0, 1) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(pair.raw_x.at(1, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(pair.raw_x.at(1, 1) == doctest::Approx(6.0).epsilon(1e-12));

  CHECK(pair.c_x.at(0, 0) == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(pair.c_x.at(1, 0) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(pair.c_x.at(0, 1) == doctest::Approx(0.0474).epsilon(1e-3));
  CHECK(pair.c_x.at(1, 1) == doctest::Approx(0.9526).epsilon(1e-4));

  CHECK(pair.c_y.at(0, 0) == doctest::Approx(0.1192).epsilon(1e-3));
  CHECK(pair.c_y.at(1, 0) == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(pair.c_y.at(0, 1) == doctest::Approx(0.0180).epsilon(2e-3));
  CHECK(pair.c_y.at(1, 1) == doctest::Approx(0.9820).epsilon(1e-4));
}

TEST_CASE("correlation_maps: columns stochastic, pre-softmax transpose identity exact") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Fixture fx(3, 5, 4, 2, seed);
    Tensor xp = rand_tensor({6, 3}, seed * 2 + 1);
    Tensor yp = rand_tensor({6, 5}, seed * 2 + 2);
    auto pair = correlation_maps(xp, yp, fx.params);
    const std::size_t n = 6;
    for (std::size_t j = 0; j < n; ++j) {
      double sx = 0.0, sy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sx += pair.c_x.at(i, j);
        sy += pair.c_y.at(i, j);
      }
      CHECK(std::fabs(sx - 1.0) < 1e-6);
      CHECK(std::fabs(sy - 1.0) < 1e-6);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) CHECK(pair.raw_y.at(j, i) == pair.raw_x.at(i, j));
  }
  Fixture fx(3, 5, 4, 2);
  CHECK_THROWS_AS(correlation_maps(rand_tensor({4, 3}, 1), rand_tensor({5, 5}, 2), fx.params),
                  ShapeError);
}

TEST_CASE("bfp_transform: zero input annihilates both augmented maps") {
  Fixture fx(3, 5, 2, 7);
  Tensor xp = Tensor::zeros({4, 3});
  Tensor yp = rand_tensor({4, 5}, 8);
  auto pair = correlation_maps(xp, yp, fx.params);
  auto [x_aug, y_aug] = bfp_transform(xp, yp, pair, fx.params);
  REQUIRE(x_aug.shape() == Shape{4, 3});
  REQUIRE(y_aug.shape() == Shape{4, 5});
  for (std::size_t i = 0; i < x_aug.numel(); ++i) CHECK(x_aug.at(i) == 0.0);
  for (std::size_t i = 0; i < y_aug.numel(); ++i) CHECK(y_aug.at(i) == 0.0);
}

TEST_CASE("bfp_transform: scalar oracle at N=2, L'=1 against direct per-element evaluation") {
  Fixture fx(1, 1, 1, 1);
  make_identity(fx.params);
  fx.params.u.values() = {0.9};
  fx.params.v.values() = {1.1};
  fx.params.p.values() = {0.7};
  fx.params.u_prime.values() = {1.3};
  fx.params.v_prime.values() = {0.6};
  fx.params.p_x.values() = {1.9};
  fx.params.p_y.values() = {-0.8};
  const std::vector<double> x = {0.5, 2.0};
  const std::vector<double> y = {1.5, 0.25};
  Tensor xp = Tensor::from_data({2, 1}, x);
  Tensor yp = Tensor::from_data({2, 1}, y);
  auto pair = correlation_maps(xp, yp, fx.params, false);
  auto [x_aug, y_aug] = bfp_transform(xp, yp, pair, fx.params, false);

  // brute-force: score s[i][j] = p * relu(x_i u) * relu(y_j v); column softmax
  // both ways; mix in the L'=1 pooling space; project with p_x / p_y
  auto pos = [](double v) { return v > 0.0 ? v : 0.0; };
  double a[2], b[2], ap[2], bp[2];
  for (int i = 0; i < 2; ++i) {
    a[i] = pos(x[i] * 0.9);
    b[i] = pos(y[i] * 1.1);
    ap[i] = pos(x[i] * 1.3);
    bp[i] = pos(y[i] * 0.6);
  }
  double s[2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) s[i][j] = 0.7 * a[i] * b[j];
  double cx[2][2], cy[2][2];
  for (int j = 0; j < 2; ++j) {
    const double den = std::exp(s[0][j]) + std::exp(s[1][j]);
    for (int i = 0; i < 2; ++i) cx[i][j] = std::exp(s[i][j]) / den;
  }
  for (int i = 0; i < 2; ++i) {  // columns of the transposed score map
    const double den = std::exp(s[i][0]) + std::exp(s[i][1]);
    for (int j = 0; j < 2; ++j) cy[j][i] = std::exp(s[i][j]) / den;
  }
  for (int i = 0; i < 2; ++i) {
    double mixed_x = 0.0, mixed_y = 0.0;
    for (int j = 0; j < 2; ++j) {
      mixed_x += bp[j] * cy[j][i];
      mixed_y += ap[j] * cx[j][i];
    }
    const double ref_x = ap[i] * mixed_x * 1.9;
    const double ref_y = bp[i] * mixed_y * -0.8;
    CHECK(std::fabs(x_aug.at(i, 0) - ref_x) < 1e-12);
    CHECK(std::fabs(y_aug.at(i, 0) - ref_y) < 1e-12);
  }
}

TEST_CASE("bfp: permutation equivariance of maps and augmented rows") {
  const std::size_t n = 5;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Fixture fx(3, 4, 2, 3, seed);
    Tensor xp = rand_tensor({n, 3}, seed * 3 + 1);
    Tensor yp = rand_tensor({n, 4}, seed * 3 + 2);
    auto pair = correlation_maps(xp, yp, fx.params);
    auto [x_aug, y_aug] = bfp_transform(xp, yp, pair, fx.params);

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    auto rng = substream(seed, "perm");
    std::shuffle(perm.begin(), perm.end(), rng);

    Tensor xq = Tensor::zeros({n, 3});
    Tensor yq = Tensor::zeros({n, 4});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < 3; ++c) xq.at(i, c) = xp.at(perm[i], c);
      for (std::size_t c = 0; c < 4; ++c) yq.at(i, c) = yp.at(perm[i], c);
    }
    auto pair_q = correlation_maps(xq, yq, fx.params);
    auto [x_aug_q, y_aug_q] = bfp_transform(xq, yq, pair_q, fx.params);

    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        CHECK(std::fabs(pair_q.c_x.at(i, j) - pair.c_x.at(perm[i], perm[j])) < 1e-9);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(std::fabs(x_aug_q.at(i, c) - x_aug.at(perm[i], c)) < 1e-9);
      for (std::size_t c = 0; c < 4; ++c)
        CHECK(std::fabs(y_aug_q.at(i, c) - y_aug.at(perm[i], c)) < 1e-9);
    }
  }
}

TEST_CASE("bfp_apply: batch of one reproduces the per-element composite bitwise") {
  Fixture fx(3, 4, 2, 3);
  Tensor xp = rand_tensor({4, 3}, 30);
  Tensor yp = rand_tensor({4, 4}, 31);
  auto batch = bfp_apply(xp, yp, 1, fx.params, true);

  Fixture fx2(3, 4, 2, 3);  // fresh params with identical seed, untouched running stats
  auto pair = correlation_maps(xp, yp, fx2.params, true);
  auto [x_aug, y_aug] = bfp_transform(xp, yp, pair, fx2.params, true);
  for (std::size_t i = 0; i < x_aug.numel(); ++i) CHECK(batch.x_aug_rows.at(i) == x_aug.at(i));
  for (std::size_t i = 0; i < y_aug.numel(); ++i) CHECK(batch.y_aug_rows.at(i) == y_aug.at(i));
}

TEST_CASE("bfp_apply: eval mode processes elements independently") {
  Fixture fx(3, 4, 2, 3);
  // populate running stats with something non-trivial first
  (void)bfp_apply(rand_tensor({8, 3}, 40), rand_tensor({8, 4}, 41), 2, fx.params, true);

  Tensor xp = rand_tensor({8, 3}, 42);
  Tensor yp = rand_tensor({8, 4}, 43);
  auto both = bfp_apply(xp, yp, 2, fx.params, false);
  for (std::size_t e = 0; e < 2; ++e) {
    Tensor xe = slice_rows(xp, e * 4, (e + 1) * 4);
    Tensor ye = slice_rows(yp, e * 4, (e + 1) * 4);
    auto one = bfp_apply(xe, ye, 1, fx.params, false);
    for (std::size_t i = 0; i < one.x_aug_rows.numel(); ++i)
      CHECK(both.x_aug_rows.at(e * 12 + i) == one.x_aug_rows.at(i));
    for (std::size_t i = 0; i < one.y_aug_rows.numel(); ++i)
      CHECK(both.y_aug_rows.at(e * 16 + i) == one.y_aug_rows.at(i));
  }
}

TEST_CASE("bfp: end-to-end gradcheck through mask, correlation and transform") {
  GradCheckCase c;
  c.name = "bfp-end-to-end";
  c.tolerance = 1e-3;
  c.build = [](std::uint64_t s) {
    auto fx = std::make_shared<Fixture>(3, 3, 2, 3, s);
    Tensor wx = rand_tensor({4, 3}, s ^ 5);
    Tensor wy = rand_tensor({4, 3}, s ^ 6);
    // leaf packs both level maps: row 0 -> x level, row 1 -> y level, D=3, 2x2 cells
    ScalarFn f = [fx, wx, wy](const Tensor& t) {
      Tensor split = reshape(t, {2, 12});
      Tensor xf = reshape(slice_rows(split, 0, 1), {3, 2, 2});
      Tensor yf = reshape(slice_rows(split, 1, 2), {3, 2, 2});
      Tensor xp = flatten_spatial(self_awareness(xf, fx->params.mask_a));
      Tensor yp = flatten_spatial(self_awareness(yf, fx->params.mask_b));
      auto pair = correlation_maps(xp, yp, fx->params);
      auto [x_aug, y_aug] = bfp_transform(xp, yp, pair, fx->params);
      return add(sum(hadamard(x_aug, wx)), sum(hadamard(y_aug, wy)));
    };
    return std::make_pair(f, rand_tensor({24}, s));
  };
  auto res = run_gradcheck_case(c, 20);
  INFO("err=", res.max_rel_err);
  CHECK(res.passed);
}
