#include "hbfp/gradcheck_suite.hpp"

#include <memory>

#include "hbfp/bfp.hpp"
#include "hbfp/eval.hpp"
#include "hbfp/losses.hpp"
#include "hbfp/pooling.hpp"
#include "hbfp/rng.hpp"

namespace hbfp {

namespace {

Tensor rnd(Shape dims, std::uint64_t seed, double stddev = 1.0) {
  auto rng = substream(seed, "gradcheck-suite");
  return Tensor::randn(std::move(dims), rng, stddev);
}

GradCheckCase make(const char* name, std::function<std::pair<ScalarFn, Tensor>(std::uint64_t)> b,
                   double tol = 1e-4) {
  GradCheckCase c;
  c.name = name;
  c.tolerance = tol;
  c.build = std::move(b);
  return c;
}

}  // namespace

std::vector<GradCheckCase> builtin_gradcheck_cases() {
  std::vector<GradCheckCase> cases;

  cases.push_back(make("matmul.lhs", [](std::uint64_t s) {
    Tensor b = rnd({4, 2}, s ^ 1), w = rnd({3, 2}, s ^ 2);
    ScalarFn f = [b, w](const Tensor& t) { return sum(hadamard(matmul(t, b), w)); };
    return std::make_pair(f, rnd({3, 4}, s));
  }));
  cases.push_back(make("matmul.rhs", [](std::uint64_t s) {
    Tensor a = rnd({3, 4}, s ^ 1), w = rnd({3, 2}, s ^ 2);
    ScalarFn f = [a, w](const Tensor& t) { return sum(hadamard(matmul(a, t), w)); };
    return std::make_pair(f, rnd({4, 2}, s));
  }));
  cases.push_back(make("hadamard", [](std::uint64_t s) {
    Tensor b = rnd({3, 5}, s ^ 1);
    ScalarFn f = [b](const Tensor& t) { return sum(hadamard(hadamard(t, b), t)); };
    return std::make_pair(f, rnd({3, 5}, s));
  }));
  cases.push_back(make("hadamard.broadcast", [](std::uint64_t s) {
    Tensor a = rnd({4, 2, 3}, s ^ 1);
    ScalarFn f = [a](const Tensor& t) { return sum(hadamard(hadamard(a, t), a)); };
    return std::make_pair(f, rnd({4, 1, 3}, s));
  }));
  cases.push_back(make("add.sub.scalars", [](std::uint64_t s) {
    Tensor b = rnd({1, 6}, s ^ 1);
    ScalarFn f = [b](const Tensor& t) {
      Tensor u = add(t, b);
      Tensor v = sub(scale(t, 0.7), add_scalar(u, 0.1));
      return mean(hadamard(u, v));
    };
    return std::make_pair(f, rnd({5, 6}, s));
  }));
  cases.push_back(make("relu", [](std::uint64_t s) {
    Tensor w = rnd({4, 4}, s ^ 1);
    ScalarFn f = [w](const Tensor& t) { return sum(hadamard(relu(t), w)); };
    return std::make_pair(f, rnd({4, 4}, s));
  }));
  cases.push_back(make("sigmoid", [](std::uint64_t s) {
    Tensor w = rnd({3, 4}, s ^ 1);
    ScalarFn f = [w](const Tensor& t) { return sum(hadamard(sigmoid(t), w)); };
    return std::make_pair(f, rnd({3, 4}, s));
  }));
  cases.push_back(make("rsqrt", [](std::uint64_t s) {
    ScalarFn f = [](const Tensor& t) { return sum(rsqrt(hadamard(t, t), 0.3)); };
    return std::make_pair(f, rnd({7}, s));
  }));
  cases.push_back(make("softmax_columns", [](std::uint64_t s) {
    Tensor w = rnd({5, 3}, s ^ 1);
    ScalarFn f = [w](const Tensor& t) { return sum(hadamard(softmax_columns(t), w)); };
    return std::make_pair(f, rnd({5, 3}, s));
  }));
  cases.push_back(make("transpose.reshape", [](std::uint64_t s) {
    Tensor w = rnd({8}, s ^ 1);
    ScalarFn f = [w](const Tensor& t) { return sum(hadamard(reshape(transpose(t), {8}), w)); };
    return std::make_pair(f, rnd({2, 4}, s));
  }));
  cases.push_back(make("sum.mean.mean_rows", [](std::uint64_t s) {
    Tensor w = rnd({1, 5}, s ^ 1);
    ScalarFn f = [w](const Tensor& t) {
      return add(add(sum(t), mean(t)), sum(hadamard(mean_rows(t), w)));
    };
    return std::make_pair(f, rnd({6, 5}, s));
  }));
  cases.push_back(make("concat.slice", [](std::uint64_t s) {
    Tensor other = rnd({2, 4}, s ^ 1);
    ScalarFn f = [other](const Tensor& t) {
      Tensor cat = concat_rows({other, t, other});
      return sum(hadamard(slice_rows(cat, 1, 5), slice_rows(cat, 2, 6)));
    };
    return std::make_pair(f, rnd({3, 4}, s));
  }));
  cases.push_back(make("conv2d.input.3x3", [](std::uint64_t s) {
    Tensor w = rnd({2, 3, 3, 3}, s ^ 1, 0.5), bias = rnd({2}, s ^ 2);
    Tensor r = rnd({2, 2, 3, 2}, s ^ 3);
    ScalarFn f = [w, bias, r](const Tensor& t) {
      return sum(hadamard(conv2d(t, w, bias, 2, 1), r));
    };
    return std::make_pair(f, rnd({2, 3, 5, 4}, s));
  }));
  cases.push_back(make("conv2d.weight.1x1", [](std::uint64_t s) {
    Tensor x = rnd({2, 3, 4, 4}, s ^ 1), bias = rnd({2}, s ^ 2);
    Tensor r = rnd({2, 2, 4, 4}, s ^ 3);
    ScalarFn f = [x, bias, r](const Tensor& t) {
      return sum(hadamard(conv2d(x, t, bias, 1, 0), r));
    };
    return std::make_pair(f, rnd({2, 3, 1, 1}, s, 0.5));
  }));
  cases.push_back(make("conv2d.bias", [](std::uint64_t s) {
    Tensor x = rnd({2, 3, 4, 3}, s ^ 1), w = rnd({2, 3, 3, 3}, s ^ 2, 0.5);
    Tensor r = rnd({2, 2, 4, 3}, s ^ 3);
    ScalarFn f = [x, w, r](const Tensor& t) { return sum(hadamard(conv2d(x, w, t, 1, 1), r)); };
    return std::make_pair(f, rnd({2}, s));
  }));
  cases.push_back(make("flatten.unflatten_cells", [](std::uint64_t s) {
    Tensor w = rnd({2, 3, 2, 2}, s ^ 1);
    ScalarFn f = [w](const Tensor& t) {
      return sum(hadamard(unflatten_cells(flatten_cells(t), 2, 3, 2, 2), w));
    };
    return std::make_pair(f, rnd({2, 3, 2, 2}, s));
  }));
  cases.push_back(make("minmax_normalize", [](std::uint64_t s) {
    Tensor w = rnd({3, 7}, s ^ 1);
    ScalarFn f = [w](const Tensor& t) { return sum(hadamard(minmax_normalize(t), w)); };
    return std::make_pair(f, rnd({3, 7}, s));
  }));
  for (double lambda : {0.0, 0.4, 0.7, 1.0}) {
    std::string name = "generalized_pool.lambda" + std::to_string(lambda).substr(0, 3);
    cases.push_back(make(name.c_str(), [lambda](std::uint64_t s) {
      Tensor w = rnd({4}, s ^ 1);
      ScalarFn f = [w, lambda](const Tensor& t) {
        return sum(hadamard(generalized_pool(t, lambda), w));
      };
      return std::make_pair(f, rnd({4, 6}, s));
    }));
  }
  cases.push_back(make("batch_hard_triplet", [](std::uint64_t s) {
    TripletConfig cfg{0.3, 3, 2};
    std::vector<std::uint32_t> labels = {0, 0, 1, 1, 2, 2};
    ScalarFn f = [cfg, labels](const Tensor& t) { return batch_hard_triplet(t, labels, cfg); };
    return std::make_pair(f, rnd({6, 4}, s));
  }));
  cases.push_back(make("label_smoothed_ce", [](std::uint64_t s) {
    SmoothingConfig cfg{0.3, 5};
    std::vector<std::uint32_t> labels = {static_cast<std::uint32_t>(s % 5),
                                         static_cast<std::uint32_t>((s + 3) % 5)};
    ScalarFn f = [cfg, labels](const Tensor& t) { return label_smoothed_ce(t, labels, cfg); };
    return std::make_pair(f, rnd({2, 5}, s));
  }));
  cases.push_back(make("pairwise_distances", [](std::uint64_t s) {
    Tensor g = rnd({5, 3}, s ^ 1), w = rnd({4, 5}, s ^ 2);
    ScalarFn f = [g, w](const Tensor& t) { return sum(hadamard(pairwise_distances(t, g), w)); };
    return std::make_pair(f, rnd({4, 3}, s));
  }));
  cases.push_back(make("batchnorm.train", [](std::uint64_t s) {
    auto reg = std::make_shared<ParamRegistry>();
    auto bn = std::make_shared<BatchNorm>(*reg, "bn", 4);
    Tensor w = rnd({6, 4}, s ^ 1);
    ScalarFn f = [reg, bn, w](const Tensor& t) {
      return sum(hadamard(bn->forward(t, true), w));
    };
    return std::make_pair(f, rnd({6, 4}, s));
  }));
  cases.push_back(make(
      "bfp.chain",
      [](std::uint64_t s) {
        auto reg = std::make_shared<ParamRegistry>();
        auto rng = substream(s, "bfp-chain");
        auto params = std::make_shared<BfpParams>(*reg, "bfp", 3, 3, 2, 3, rng);
        Tensor wx = rnd({4, 3}, s ^ 5), wy = rnd({4, 3}, s ^ 6);
        ScalarFn f = [reg, params, wx, wy](const Tensor& t) {
          Tensor split = reshape(t, {2, 12});
          Tensor xf = reshape(slice_rows(split, 0, 1), {3, 2, 2});
          Tensor yf = reshape(slice_rows(split, 1, 2), {3, 2, 2});
          Tensor xp = flatten_spatial(self_awareness(xf, params->mask_a));
          Tensor yp = flatten_spatial(self_awareness(yf, params->mask_b));
          auto pair = correlation_maps(xp, yp, *params);
          auto [x_aug, y_aug] = bfp_transform(xp, yp, pair, *params);
          return add(sum(hadamard(x_aug, wx)), sum(hadamard(y_aug, wy)));
        };
        return std::make_pair(f, rnd({24}, s));
      },
      1e-3));

  return cases;
}

}  // namespace hbfp
