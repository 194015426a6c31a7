#include "hbfp/bfp.hpp"

#include <cmath>

namespace hbfp {

namespace {

// relu(bn(rows * proj)); the shared projection step of Eq. 2 and Eq. 4.
Tensor project(const Tensor& rows, const Tensor& proj, BatchNorm& bn, bool training) {
  return relu(bn.forward(matmul(rows, proj), training));
}

CorrelationPair correlation_from_projections(const Tensor& a, const Tensor& b, const Tensor& p) {
  const std::size_t n = a.dim(0);
  const std::size_t l = p.dim(0);
  // ones-column times p^T broadcasts the pooling vector over cells
  Tensor ones = Tensor::full({n, 1}, 1.0);
  Tensor p_rows = matmul(ones, reshape(p, {1, l}));
  CorrelationPair pair;
  pair.raw_x = matmul(hadamard(a, p_rows), transpose(b));
  pair.raw_y = transpose(pair.raw_x);
  pair.c_x = softmax_columns(pair.raw_x);
  pair.c_y = softmax_columns(pair.raw_y);
  return pair;
}

// Eq. 4 in row orientation: X_y = a' . (C_y^T b'), Y_x = (C_x^T a') . b'.
std::pair<Tensor, Tensor> mix(const Tensor& a_prime, const Tensor& b_prime,
                              const CorrelationPair& pair) {
  Tensor x_y = hadamard(a_prime, matmul(transpose(pair.c_y), b_prime));
  Tensor y_x = hadamard(matmul(transpose(pair.c_x), a_prime), b_prime);
  return {x_y, y_x};
}

}  // namespace

BfpParams::BfpParams(ParamRegistry& reg, const std::string& prefix, std::size_t channels_a,
                     std::size_t channels_b, std::size_t proj_l, std::size_t proj_l_prime,
                     std::mt19937_64& rng)
    : d_a(channels_a),
      d_b(channels_b),
      l(proj_l),
      l_prime(proj_l_prime),
      u(reg.add_param(prefix + ".u",
                      Tensor::randn({channels_a, proj_l}, rng, std::sqrt(2.0 / channels_a)))),
      v(reg.add_param(prefix + ".v",
                      Tensor::randn({channels_b, proj_l}, rng, std::sqrt(2.0 / channels_b)))),
      p(reg.add_param(prefix + ".p", Tensor::randn({proj_l}, rng, 1.0 / std::sqrt(proj_l)))),
      u_prime(reg.add_param(
          prefix + ".u_prime",
          Tensor::randn({channels_a, proj_l_prime}, rng, std::sqrt(2.0 / channels_a)))),
      v_prime(reg.add_param(
          prefix + ".v_prime",
          Tensor::randn({channels_b, proj_l_prime}, rng, std::sqrt(2.0 / channels_b)))),
      p_x(reg.add_param(
          prefix + ".p_x",
          Tensor::randn({proj_l_prime, channels_a}, rng, std::sqrt(2.0 / proj_l_prime)))),
      p_y(reg.add_param(
          prefix + ".p_y",
          Tensor::randn({proj_l_prime, channels_b}, rng, std::sqrt(2.0 / proj_l_prime)))),
      bn_u(reg, prefix + ".bn_u", proj_l),
      bn_v(reg, prefix + ".bn_v", proj_l),
      bn_u_prime(reg, prefix + ".bn_u_prime", proj_l_prime),
      bn_v_prime(reg, prefix + ".bn_v_prime", proj_l_prime),
      bn_p_x(reg, prefix + ".bn_p_x", channels_a),
      bn_p_y(reg, prefix + ".bn_p_y", channels_b),
      mask_a(reg, prefix + ".mask_a", channels_a, 1, 1, 1, 0, rng),
      mask_b(reg, prefix + ".mask_b", channels_b, 1, 1, 1, 0, rng) {}

Tensor self_awareness(const Tensor& f, const Conv2dLayer& mask_conv) {
  const bool batched = f.rank() == 4;
  if (!batched && f.rank() != 3)
    throw ShapeError("self_awareness: expected [D,H,W] or [B,D,H,W], got " +
                     shape_str(f.shape()));
  Tensor x = batched ? f : reshape(f, {1, f.dim(0), f.dim(1), f.dim(2)});
  Tensor mask = sigmoid(mask_conv.forward(x));  // [B,1,H,W]
  Tensor weighted = hadamard(x, mask);
  return batched ? weighted : reshape(weighted, f.shape());
}

Tensor flatten_spatial(const Tensor& f) {
  if (f.rank() != 3)
    throw ShapeError("flatten_spatial: expected [D,H,W], got " + shape_str(f.shape()));
  return flatten_cells(reshape(f, {1, f.dim(0), f.dim(1), f.dim(2)}));
}

Tensor unflatten_spatial(const Tensor& rows, std::size_t channels, std::size_t height,
                         std::size_t width) {
  return reshape(unflatten_cells(rows, 1, channels, height, width), {channels, height, width});
}

CorrelationPair correlation_maps(const Tensor& xp, const Tensor& yp, BfpParams& params,
                                 bool training) {
  if (xp.rank() != 2 || yp.rank() != 2 || xp.dim(0) != yp.dim(0))
    throw ShapeError("correlation_maps: cell counts disagree, " + shape_str(xp.shape()) +
                     " vs " + shape_str(yp.shape()));
  Tensor a = project(xp, params.u, params.bn_u, training);
  Tensor b = project(yp, params.v, params.bn_v, training);
  return correlation_from_projections(a, b, params.p);
}

std::pair<Tensor, Tensor> bfp_transform(const Tensor& xp, const Tensor& yp,
                                        const CorrelationPair& pair, BfpParams& params,
                                        bool training) {
  Tensor a_prime = project(xp, params.u_prime, params.bn_u_prime, training);
  Tensor b_prime = project(yp, params.v_prime, params.bn_v_prime, training);
  auto [x_y, y_x] = mix(a_prime, b_prime, pair);
  Tensor x_aug = params.bn_p_x.forward(matmul(x_y, params.p_x), training);
  Tensor y_aug = params.bn_p_y.forward(matmul(y_x, params.p_y), training);
  return {x_aug, y_aug};
}

BfpBatchOutput bfp_apply(const Tensor& xp_rows, const Tensor& yp_rows, std::size_t batch,
                         BfpParams& params, bool training) {
  if (xp_rows.rank() != 2 || yp_rows.rank() != 2 || xp_rows.dim(0) != yp_rows.dim(0))
    throw ShapeError("bfp_apply: cell counts disagree, " + shape_str(xp_rows.shape()) + " vs " +
                     shape_str(yp_rows.shape()));
  if (batch == 0 || xp_rows.dim(0) % batch != 0)
    throw ShapeError("bfp_apply: " + shape_str(xp_rows.shape()) + " not divisible into " +
                     std::to_string(batch) + " elements");
  const std::size_t n = xp_rows.dim(0) / batch;

  Tensor a = project(xp_rows, params.u, params.bn_u, training);
  Tensor b = project(yp_rows, params.v, params.bn_v, training);
  Tensor a_prime = project(xp_rows, params.u_prime, params.bn_u_prime, training);
  Tensor b_prime = project(yp_rows, params.v_prime, params.bn_v_prime, training);

  BfpBatchOutput out;
  std::vector<Tensor> x_y_parts, y_x_parts;
  x_y_parts.reserve(batch);
  y_x_parts.reserve(batch);
  for (std::size_t e = 0; e < batch; ++e) {
    const std::size_t r0 = e * n, r1 = (e + 1) * n;
    CorrelationPair pair =
        correlation_from_projections(slice_rows(a, r0, r1), slice_rows(b, r0, r1), params.p);
    auto [x_y, y_x] = mix(slice_rows(a_prime, r0, r1), slice_rows(b_prime, r0, r1), pair);
    x_y_parts.push_back(x_y);
    y_x_parts.push_back(y_x);
    out.pairs.push_back(std::move(pair));
  }
  Tensor x_y_all = batch == 1 ? x_y_parts[0] : concat_rows(x_y_parts);
  Tensor y_x_all = batch == 1 ? y_x_parts[0] : concat_rows(y_x_parts);
  out.x_aug_rows = params.bn_p_x.forward(matmul(x_y_all, params.p_x), training);
  out.y_aug_rows = params.bn_p_y.forward(matmul(y_x_all, params.p_y), training);
  return out;
}

}  // namespace hbfp
