#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "hbfp/gradcheck.hpp"
#include "hbfp/pooling.hpp"
#include "hbfp/rng.hpp"

using namespace hbfp;

namespace {

Tensor rand_tensor(Shape dims, std::uint64_t seed) {
  auto rng = substream(seed, "test-pooling");
  return Tensor::randn(std::move(dims), rng);
}

// survivor set of a channel, recovered from gradient routing
std::vector<bool> survivors(const Tensor& f, double lambda) {
  Tensor leaf = Tensor::from_data(f.shape(), f.values(), true);
  backward(sum(generalized_pool(leaf, lambda)));
  std::vector<bool> kept(leaf.numel());
  for (std::size_t i = 0; i < leaf.numel(); ++i) kept[i] = leaf.grad()[i] != 0.0;
  return kept;
}

}  // namespace

TEST_CASE("minmax_normalize: hand row, constant row and range property") {
  Tensor f = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  Tensor n = minmax_normalize(f);
  CHECK(n.at(0) == doctest::Approx(0.0));
  CHECK(n.at(1) == doctest::Approx(1.0 / 3.0));
  CHECK(n.at(2) == doctest::Approx(2.0 / 3.0));
  CHECK(n.at(3) == doctest::Approx(1.0));

  Tensor c = Tensor::from_data({1, 3}, {5, 5, 5});
  Tensor nc = minmax_normalize(c);
  for (std::size_t i = 0; i < 3; ++i) CHECK(nc.at(i) == 1.0);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor r = rand_tensor({3, 6}, seed);
    Tensor nr = minmax_normalize(r);
    for (std::size_t row = 0; row < 3; ++row) {
      double lo = 2, hi = -1;
      for (std::size_t j = 0; j < 6; ++j) {
        const double v = nr.at(row, j);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      CHECK(lo == 0.0);
      CHECK(hi == 1.0);
    }
  }
}

TEST_CASE("generalized_pool: hand rows and special-case identities") {
  Tensor f = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  CHECK(generalized_pool(f, 0.5).at(0) == doctest::Approx(3.5).epsilon(1e-12));
  CHECK(generalized_pool(f, 0.0).at(0) == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(generalized_pool(f, 1.0).at(0) == 4.0);

  Tensor c = Tensor::from_data({1, 3}, {5, 5, 5});
  for (double lambda : {0.0, 0.3, 1.0}) CHECK(generalized_pool(c, lambda).at(0) == 5.0);

  CHECK_THROWS_AS(generalized_pool(f, -0.1), ContractError);
  CHECK_THROWS_AS(generalized_pool(f, 1.5), ContractError);
}

TEST_CASE("generalized_pool: lambda=0 is mean, lambda=1 is max on random channels") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor f = rand_tensor({4, 9}, seed);
    Tensor avg = generalized_pool(f, 0.0);
    Tensor mx = generalized_pool(f, 1.0);
    for (std::size_t r = 0; r < 4; ++r) {
      double m = 0.0, top = f.at(r, 0);
      for (std::size_t j = 0; j < 9; ++j) {
        m += f.at(r, j);
        top = std::max(top, f.at(r, j));
      }
      m /= 9.0;
      CHECK(std::fabs(avg.at(r) - m) < 1e-12);
      CHECK(mx.at(r) == top);
    }
  }
}

TEST_CASE("generalized_pool: survivor sets shrink monotonically in lambda") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor f = rand_tensor({3, 8}, seed);
    auto s03 = survivors(f, 0.3);
    auto s06 = survivors(f, 0.6);
    auto s09 = survivors(f, 0.9);
    for (std::size_t i = 0; i < s03.size(); ++i) {
      if (s09[i]) CHECK(s06[i]);
      if (s06[i]) CHECK(s03[i]);
    }
  }
}

TEST_CASE("generalized_pool: output stays within channel bounds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor f = rand_tensor({5, 7}, seed);
    for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      Tensor p = generalized_pool(f, lambda);
      for (std::size_t r = 0; r < 5; ++r) {
        double lo = f.at(r, 0), hi = f.at(r, 0);
        for (std::size_t j = 0; j < 7; ++j) {
          lo = std::min(lo, f.at(r, j));
          hi = std::max(hi, f.at(r, j));
        }
        CHECK(p.at(r) >= lo);
        CHECK(p.at(r) <= hi);
      }
    }
  }
}

TEST_CASE("gradcheck: minmax_normalize and generalized_pool away from selector boundaries") {
  GradCheckCase norm;
  norm.name = "minmax_normalize";
  norm.build = [](std::uint64_t s) {
    Tensor w = rand_tensor({3, 6}, s ^ 1);
    ScalarFn f = [w](const Tensor& t) { return sum(hadamard(minmax_normalize(t), w)); };
    return std::make_pair(f, rand_tensor({3, 6}, s));
  };
  auto rn = run_gradcheck_case(norm, 25);
  INFO("minmax err=", rn.max_rel_err);
  CHECK(rn.passed);

  for (double lambda : {0.0, 0.4, 0.7, 1.0}) {
    GradCheckCase pool;
    pool.name = "generalized_pool";
    pool.build = [lambda](std::uint64_t s) {
      Tensor w = rand_tensor({4}, s ^ 1);
      ScalarFn f = [w, lambda](const Tensor& t) {
        return sum(hadamard(generalized_pool(t, lambda), w));
      };
      return std::make_pair(f, rand_tensor({4, 7}, s));
    };
    auto rp = run_gradcheck_case(pool, 25);
    INFO("lambda=", lambda, " err=", rp.max_rel_err);
    CHECK(rp.passed);
  }
}

TEST_CASE("multi_lambda_descriptor: single threshold, hand sum, permutation invariance") {
  Tensor f = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  GPConfig avg_only{{0.0}};
  CHECK(multi_lambda_descriptor(f, avg_only).at(0) == doctest::Approx(2.5).epsilon(1e-12));

  GPConfig three{{0.0, 0.5, 1.0}};
  CHECK(multi_lambda_descriptor(f, three).at(0) == doctest::Approx(10.0).epsilon(1e-12));

  CHECK_THROWS_AS(multi_lambda_descriptor(f, GPConfig{{}}), ContractError);

  auto rng = substream(5, "perm");
  Tensor r = rand_tensor({3, 8}, 40);
  GPConfig cfg;
  Tensor base = multi_lambda_descriptor(r, cfg);
  std::vector<std::size_t> perm(8);
  for (std::size_t i = 0; i < 8; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor shuffled = Tensor::zeros({3, 8});
  for (std::size_t row = 0; row < 3; ++row)
    for (std::size_t j = 0; j < 8; ++j) shuffled.at(row, j) = r.at(row, perm[j]);
  Tensor moved = multi_lambda_descriptor(shuffled, cfg);
  for (std::size_t row = 0; row < 3; ++row)
    CHECK(moved.at(row) == doctest::Approx(base.at(row)).epsilon(1e-12));
}

TEST_CASE("multi_lambda_descriptor_batch: blocks match per-element calls") {
  GPConfig cfg;
  Tensor rows = rand_tensor({12, 5}, 50);  // B=3 elements of N=4 cells
  Tensor batch = multi_lambda_descriptor_batch(rows, 3, cfg);
  REQUIRE(batch.shape() == Shape{3, 5});
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor cells = slice_rows(rows, b * 4, (b + 1) * 4);
    Tensor one = multi_lambda_descriptor(transpose(cells), cfg);
    for (std::size_t dch = 0; dch < 5; ++dch) CHECK(batch.at(b, dch) == one.at(dch));
  }
}
