#include "hbfp/pooling.hpp"

#include <algorithm>
#include <cmath>

namespace hbfp {

namespace {

using detail::TensorNode;

struct RowExtrema {
  std::size_t imin = 0, imax = 0;
  double vmin = 0.0, vmax = 0.0;
};

RowExtrema row_extrema(const double* row, std::size_t n) {
  RowExtrema e;
  e.vmin = e.vmax = row[0];
  for (std::size_t j = 1; j < n; ++j) {
    if (row[j] < e.vmin) {
      e.vmin = row[j];
      e.imin = j;
    }
    if (row[j] > e.vmax) {
      e.vmax = row[j];
      e.imax = j;
    }
  }
  return e;
}

// Selector-stability margins for kink-avoiding gradient checks: argmin/argmax
// ties and a vanishing row range both make the normalization non-smooth.
void note_extrema_margins(const double* row, std::size_t n, const RowExtrema& e) {
  if (e.vmax == e.vmin) return;  // constant row: handled as a defined special case
  kink_note(e.vmax - e.vmin);
  double second_min = 1e300, second_max = -1e300;
  for (std::size_t j = 0; j < n; ++j) {
    if (j != e.imin) second_min = std::min(second_min, row[j]);
    if (j != e.imax) second_max = std::max(second_max, row[j]);
  }
  if (n > 1) {
    kink_note(second_min - e.vmin);
    kink_note(e.vmax - second_max);
  }
}

}  // namespace

Tensor minmax_normalize(const Tensor& f) {
  if (f.rank() != 2)
    throw ShapeError("minmax_normalize: expected [D,N], got " + shape_str(f.shape()));
  const std::size_t d = f.dim(0), n = f.dim(1);
  auto out = detail::make_op_node(f.shape(), "minmax_normalize", {f.node()});
  std::vector<RowExtrema> ext(d);
  const double* pf = f.values().data();
  for (std::size_t r = 0; r < d; ++r) {
    const double* row = pf + r * n;
    ext[r] = row_extrema(row, n);
    note_extrema_margins(row, n, ext[r]);
    double* orow = out->data.data() + r * n;
    if (ext[r].vmax == ext[r].vmin) {
      std::fill(orow, orow + n, 1.0);
    } else {
      const double inv = 1.0 / (ext[r].vmax - ext[r].vmin);
      // extrema pinned exactly so the row attains 0 and 1 despite rounding
      for (std::size_t j = 0; j < n; ++j) orow[j] = (row[j] - ext[r].vmin) * inv;
      orow[ext[r].imin] = 0.0;
      orow[ext[r].imax] = 1.0;
    }
  }
  if (detail::is_recording(out)) {
    TensorNode* o = out.get();
    TensorNode* nf = f.node().get();
    out->backprop = [o, nf, d, n, ext] {
      if (!nf->requires_grad) return;
      for (std::size_t r = 0; r < d; ++r) {
        const RowExtrema& e = ext[r];
        if (e.vmax == e.vmin) continue;  // constant row: defined as 1, zero gradient
        const double range = e.vmax - e.vmin;
        const double inv = 1.0 / range;
        const double inv2 = inv * inv;
        const double* g = o->grad.data() + r * n;
        const double* row = nf->data.data() + r * n;
        double* df = nf->grad.data() + r * n;
        double gmin = 0.0, gmax = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          df[j] += g[j] * inv;
          gmin += g[j] * (row[j] - e.vmax) * inv2;
          gmax -= g[j] * (row[j] - e.vmin) * inv2;
        }
        df[e.imin] += gmin;
        df[e.imax] += gmax;
      }
    };
  }
  return Tensor(out);
}

Tensor generalized_pool(const Tensor& f, double lambda) {
  if (f.rank() != 2)
    throw ShapeError("generalized_pool: expected [D,N], got " + shape_str(f.shape()));
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ContractError("generalized_pool: lambda must lie in [0,1], got " +
                        std::to_string(lambda));
  const std::size_t d = f.dim(0), n = f.dim(1);
  auto out = detail::make_op_node({d}, "generalized_pool", {f.node()});
  const double* pf = f.values().data();
  // survivor sets recorded for routing gradients
  std::vector<std::uint8_t> keep(d * n, 0);
  std::vector<double> inv_count(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    const double* row = pf + r * n;
    const RowExtrema e = row_extrema(row, n);
    note_extrema_margins(row, n, e);
    const bool constant = e.vmax == e.vmin;
    const double inv = constant ? 0.0 : 1.0 / (e.vmax - e.vmin);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) {
      // extrema normalize to exactly 1 and 0; keeps the row max a guaranteed
      // survivor at lambda=1 despite rounding in (x-min)/(max-min)
      const double norm =
          constant || j == e.imax ? 1.0 : (j == e.imin ? 0.0 : (row[j] - e.vmin) * inv);
      if (lambda > 0.0 && lambda < 1.0) kink_note(std::fabs(norm - lambda));
      if (lambda == 1.0 && j != e.imax && !constant) kink_note(1.0 - norm);
      if (norm >= lambda) {
        keep[r * n + j] = 1;
        acc += row[j];
        ++count;
      }
    }
    out->data[r] = acc / static_cast<double>(count);
    inv_count[r] = 1.0 / static_cast<double>(count);
  }
  if (detail::is_recording(out)) {
    TensorNode* o = out.get();
    TensorNode* nf = f.node().get();
    out->backprop = [o, nf, d, n, keep, inv_count] {
      if (!nf->requires_grad) return;
      for (std::size_t r = 0; r < d; ++r) {
        const double g = o->grad[r] * inv_count[r];
        for (std::size_t j = 0; j < n; ++j) {
          if (keep[r * n + j]) nf->grad[r * n + j] += g;
        }
      }
    };
  }
  return Tensor(out);
}

Tensor multi_lambda_descriptor(const Tensor& f, const GPConfig& cfg) {
  if (cfg.lambdas.empty())
    throw ContractError("multi_lambda_descriptor: threshold list must be non-empty");
  Tensor acc = generalized_pool(f, cfg.lambdas[0]);
  for (std::size_t i = 1; i < cfg.lambdas.size(); ++i)
    acc = add(acc, generalized_pool(f, cfg.lambdas[i]));
  return acc;
}

Tensor multi_lambda_descriptor_batch(const Tensor& rows, std::size_t batch, const GPConfig& cfg) {
  if (rows.rank() != 2 || batch == 0 || rows.dim(0) % batch != 0)
    throw ShapeError("multi_lambda_descriptor_batch: rows " + shape_str(rows.shape()) +
                     " not divisible into " + std::to_string(batch) + " blocks");
  const std::size_t n = rows.dim(0) / batch;
  const std::size_t d = rows.dim(1);
  std::vector<Tensor> descs;
  descs.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor cells = slice_rows(rows, b * n, (b + 1) * n);   // [N,D]
    Tensor desc = multi_lambda_descriptor(transpose(cells), cfg);  // [D]
    descs.push_back(reshape(desc, {1, d}));
  }
  return concat_rows(descs);
}

}  // namespace hbfp
