#include "hbfp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace hbfp {

namespace {

thread_local bool g_grad_enabled = true;
thread_local KinkMeter* g_kink_meter = nullptr;

std::size_t shape_numel(const Shape& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

void check_dims_positive(const Shape& dims) {
  if (dims.empty()) throw ShapeError("tensor rank must be >= 1");
  for (std::size_t d : dims) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(dims));
  }
}

using detail::NodePtr;
using detail::TensorNode;

NodePtr make_leaf(Shape dims, std::vector<double> data, bool requires_grad) {
  check_dims_positive(dims);
  auto node = std::make_shared<TensorNode>();
  node->dims = std::move(dims);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->data.size(), 0.0);
  return node;
}

bool any_requires_grad(const std::vector<NodePtr>& parents) {
  for (const auto& p : parents) {
    if (p->requires_grad) return true;
  }
  return false;
}

// Op output: records parents and becomes non-leaf only when gradients are
// both globally enabled and required by some input.
NodePtr make_op(Shape dims, const char* op, std::vector<NodePtr> parents) {
  check_dims_positive(dims);
  auto node = std::make_shared<TensorNode>();
  node->dims = std::move(dims);
  node->data.assign(shape_numel(node->dims), 0.0);
  node->op = op;
  if (g_grad_enabled && any_requires_grad(parents)) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents = std::move(parents);
  }
  return node;
}

bool recording(const NodePtr& node) { return !node->leaf; }

}  // namespace

namespace detail {

NodePtr make_op_node(Shape dims, const char* op, std::vector<NodePtr> parents) {
  return make_op(std::move(dims), op, std::move(parents));
}

}  // namespace detail

namespace {

// Row-major strides with zeros on broadcast axes; validated so that b either
// matches a exactly or differs by a single unit dimension.
std::vector<std::size_t> broadcast_strides(const Shape& a, const Shape& b, const char* op) {
  if (a == b) {
    std::vector<std::size_t> strides(b.size());
    std::size_t s = 1;
    for (std::size_t i = b.size(); i-- > 0;) {
      strides[i] = s;
      s *= b[i];
    }
    return strides;
  }
  if (a.size() != b.size())
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  int broadcast_axes = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] == a[i]) continue;
    if (b[i] == 1) {
      ++broadcast_axes;
      continue;
    }
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " +
                     shape_str(b));
  }
  if (broadcast_axes > 1)
    throw ShapeError(std::string(op) + ": at most one unit broadcast dimension allowed, got " +
                     shape_str(a) + " vs " + shape_str(b));
  std::vector<std::size_t> strides(b.size());
  std::size_t s = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    strides[i] = (b[i] == 1 && a[i] != 1) ? 0 : s;
    s *= b[i];
  }
  return strides;
}

// Calls fn(a_flat, b_flat) over every element of shape `a`.
template <class F>
void for_each_pair(const Shape& a, const std::vector<std::size_t>& b_strides, F&& fn) {
  const std::size_t rank = a.size();
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = shape_numel(a);
  std::size_t b_flat = 0;
  for (std::size_t a_flat = 0; a_flat < total; ++a_flat) {
    fn(a_flat, b_flat);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      b_flat += b_strides[ax];
      if (idx[ax] < a[ax]) break;
      b_flat -= idx[ax] * b_strides[ax];
      idx[ax] = 0;
      if (ax == 0) return;
    }
  }
}

void matmul_kernel(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a^T[m x k_rows] ... specifically: out[k x n] += a^T(k x m) * g(m x n)
void matmul_at_b(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      double* orow = out + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

// out[m x k] += g(m x n) * b^T, with b stored (k x n)
void matmul_a_bt(const double* g, const double* b, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* orow = out + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      orow[kk] += acc;
    }
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

KinkScope::KinkScope(KinkMeter& meter) : prev_(g_kink_meter) { g_kink_meter = &meter; }
KinkScope::~KinkScope() { g_kink_meter = prev_; }

void kink_note(double margin) {
  if (g_kink_meter) g_kink_meter->note(margin);
}

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(Shape dims, bool requires_grad) {
  std::size_t n = shape_numel(dims);
  return Tensor(make_leaf(std::move(dims), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape dims, double value, bool requires_grad) {
  std::size_t n = shape_numel(dims);
  return Tensor(make_leaf(std::move(dims), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape dims, std::vector<double> values, bool requires_grad) {
  if (shape_numel(dims) != values.size())
    throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(dims));
  return Tensor(make_leaf(std::move(dims), std::move(values), requires_grad));
}

Tensor Tensor::randn(Shape dims, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::size_t n = shape_numel(dims);
  std::vector<double> values(n);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : values) v = dist(rng);
  return Tensor(make_leaf(std::move(dims), std::move(values), requires_grad));
}

Tensor& Tensor::set_requires_grad(bool value) {
  if (!node_->leaf) throw ContractError("set_requires_grad: only leaf tensors may be toggled");
  node_->requires_grad = value;
  if (value)
    node_->grad.assign(node_->data.size(), 0.0);
  else
    node_->grad.clear();
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (!node_->requires_grad) throw ContractError("grad: tensor does not require gradients");
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

Tensor& Tensor::set_name(std::string name) {
  node_->name = std::move(name);
  return *this;
}

Tensor Tensor::detach_copy() const {
  return Tensor(make_leaf(node_->dims, node_->data, false));
}

bool Tensor::all_finite() const {
  for (double v : node_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---- elementwise binary -------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* opname) {
  auto bstrides = broadcast_strides(a.shape(), b.shape(), opname);
  auto out = make_op(a.shape(), opname, {a.node(), b.node()});
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->data.data();
  switch (kind) {
    case BinKind::Add:
      for_each_pair(a.shape(), bstrides, [&](std::size_t i, std::size_t j) { po[i] = pa[i] + pb[j]; });
      break;
    case BinKind::Sub:
      for_each_pair(a.shape(), bstrides, [&](std::size_t i, std::size_t j) { po[i] = pa[i] - pb[j]; });
      break;
    case BinKind::Mul:
      for_each_pair(a.shape(), bstrides, [&](std::size_t i, std::size_t j) { po[i] = pa[i] * pb[j]; });
      break;
  }
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    TensorNode* nb = b.node().get();
    Shape adims = a.shape();
    if (kind == BinKind::Mul) {
      out->backprop = [o, na, nb, adims, bstrides] {
        const double* g = o->grad.data();
        const double* pa = na->data.data();
        const double* pb = nb->data.data();
        if (na->requires_grad) {
          double* da = na->grad.data();
          for_each_pair(adims, bstrides,
                        [&](std::size_t i, std::size_t j) { da[i] += g[i] * pb[j]; });
        }
        if (nb->requires_grad) {
          double* db = nb->grad.data();
          for_each_pair(adims, bstrides,
                        [&](std::size_t i, std::size_t j) { db[j] += g[i] * pa[i]; });
        }
      };
    } else {
      const double sign = kind == BinKind::Sub ? -1.0 : 1.0;
      out->backprop = [o, na, nb, adims, bstrides, sign] {
        const double* g = o->grad.data();
        if (na->requires_grad) {
          double* da = na->grad.data();
          for (std::size_t i = 0; i < na->data.size(); ++i) da[i] += g[i];
        }
        if (nb->requires_grad) {
          double* db = nb->grad.data();
          for_each_pair(adims, bstrides,
                        [&](std::size_t i, std::size_t j) { db[j] += sign * g[i]; });
        }
      };
    }
  }
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor hadamard(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "hadamard"); }

// ---- scalar ops ---------------------------------------------------------

Tensor scale(const Tensor& a, double c) {
  auto out = make_op(a.shape(), "scale", {a.node()});
  const double* pa = a.values().data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] * c;
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na, c] {
      if (!na->requires_grad) return;
      for (std::size_t i = 0; i < o->grad.size(); ++i) na->grad[i] += o->grad[i] * c;
    };
  }
  return Tensor(out);
}

Tensor add_scalar(const Tensor& a, double c) {
  auto out = make_op(a.shape(), "add_scalar", {a.node()});
  const double* pa = a.values().data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] + c;
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na] {
      if (!na->requires_grad) return;
      for (std::size_t i = 0; i < o->grad.size(); ++i) na->grad[i] += o->grad[i];
    };
  }
  return Tensor(out);
}

// ---- unary --------------------------------------------------------------

Tensor relu(const Tensor& a) {
  auto out = make_op(a.shape(), "relu", {a.node()});
  const double* pa = a.values().data();
  for (std::size_t i = 0; i < out->data.size(); ++i) {
    kink_note(std::fabs(pa[i]));
    // NaN propagates so non-finite values stay visible to loss diagnostics
    out->data[i] = pa[i] > 0.0 ? pa[i] : (pa[i] == pa[i] ? 0.0 : pa[i]);
  }
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na] {
      if (!na->requires_grad) return;
      for (std::size_t i = 0; i < o->grad.size(); ++i) {
        if (na->data[i] > 0.0) na->grad[i] += o->grad[i];
      }
    };
  }
  return Tensor(out);
}

Tensor sigmoid(const Tensor& a) {
  auto out = make_op(a.shape(), "sigmoid", {a.node()});
  const double* pa = a.values().data();
  for (std::size_t i = 0; i < out->data.size(); ++i) {
    const double x = pa[i];
    out->data[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na] {
      if (!na->requires_grad) return;
      for (std::size_t i = 0; i < o->grad.size(); ++i) {
        const double s = o->data[i];
        na->grad[i] += o->grad[i] * s * (1.0 - s);
      }
    };
  }
  return Tensor(out);
}

Tensor rsqrt(const Tensor& a, double shift) {
  auto out = make_op(a.shape(), "rsqrt", {a.node()});
  const double* pa = a.values().data();
  for (std::size_t i = 0; i < out->data.size(); ++i) {
    const double x = pa[i] + shift;
    // non-finite values propagate so the loss-level diagnostic can name them
    if (x <= 0.0) throw NumericError("rsqrt: non-positive argument " + std::to_string(x));
    out->data[i] = 1.0 / std::sqrt(x);
  }
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na] {
      if (!na->requires_grad) return;
      for (std::size_t i = 0; i < o->grad.size(); ++i) {
        const double y = o->data[i];
        na->grad[i] += o->grad[i] * (-0.5 * y * y * y);
      }
    };
  }
  return Tensor(out);
}

// ---- matmul / transpose / reshape ----------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  auto out = make_op({m, n}, "matmul", {a.node(), b.node()});
  matmul_kernel(a.values().data(), b.values().data(), out->data.data(), m, k, n, false);
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    TensorNode* nb = b.node().get();
    out->backprop = [o, na, nb, m, k, n] {
      // dA = dC * B^T, dB = A^T * dC
      if (na->requires_grad)
        matmul_a_bt(o->grad.data(), nb->data.data(), na->grad.data(), m, k, n);
      if (nb->requires_grad)
        matmul_at_b(na->data.data(), o->grad.data(), nb->grad.data(), m, k, n);
    };
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& m) {
  require_rank(m, 2, "transpose");
  const std::size_t r = m.dim(0), c = m.dim(1);
  auto out = make_op({c, r}, "transpose", {m.node()});
  const double* pm = m.values().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out->data[j * r + i] = pm[i * c + j];
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* nm = m.node().get();
    out->backprop = [o, nm, r, c] {
      if (!nm->requires_grad) return;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) nm->grad[i * c + j] += o->grad[j * r + i];
    };
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& a, Shape dims) {
  check_dims_positive(dims);
  if (shape_numel(dims) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(dims));
  auto out = make_op(dims, "reshape", {a.node()});
  out->data = a.values();
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na] {
      if (!na->requires_grad) return;
      for (std::size_t i = 0; i < o->grad.size(); ++i) na->grad[i] += o->grad[i];
    };
  }
  return Tensor(out);
}

// ---- softmax / reductions -------------------------------------------------

Tensor softmax_columns(const Tensor& m) {
  require_rank(m, 2, "softmax_columns");
  const std::size_t r = m.dim(0), c = m.dim(1);
  auto out = make_op(m.shape(), "softmax_columns", {m.node()});
  const double* pm = m.values().data();
  double* po = out->data.data();
  for (std::size_t j = 0; j < c; ++j) {
    double mx = pm[j];
    for (std::size_t i = 1; i < r; ++i) mx = std::max(mx, pm[i * c + j]);
    double denom = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      const double e = std::exp(pm[i * c + j] - mx);
      po[i * c + j] = e;
      denom += e;
    }
    for (std::size_t i = 0; i < r; ++i) po[i * c + j] /= denom;
  }
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* nm = m.node().get();
    out->backprop = [o, nm, r, c] {
      if (!nm->requires_grad) return;
      for (std::size_t j = 0; j < c; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < r; ++i) dot += o->grad[i * c + j] * o->data[i * c + j];
        for (std::size_t i = 0; i < r; ++i)
          nm->grad[i * c + j] += o->data[i * c + j] * (o->grad[i * c + j] - dot);
      }
    };
  }
  return Tensor(out);
}

Tensor sum(const Tensor& a) {
  auto out = make_op({1}, "sum", {a.node()});
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  out->data[0] = acc;
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na] {
      if (!na->requires_grad) return;
      const double g = o->grad[0];
      for (double& d : na->grad) d += g;
    };
  }
  return Tensor(out);
}

Tensor mean(const Tensor& a) {
  auto out = make_op({1}, "mean", {a.node()});
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  out->data[0] = acc * inv;
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na, inv] {
      if (!na->requires_grad) return;
      const double g = o->grad[0] * inv;
      for (double& d : na->grad) d += g;
    };
  }
  return Tensor(out);
}

Tensor mean_rows(const Tensor& a) {
  require_rank(a, 2, "mean_rows");
  const std::size_t r = a.dim(0), f = a.dim(1);
  auto out = make_op({1, f}, "mean_rows", {a.node()});
  const double* pa = a.values().data();
  const double inv = 1.0 / static_cast<double>(r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < f; ++j) out->data[j] += pa[i * f + j];
  for (std::size_t j = 0; j < f; ++j) out->data[j] *= inv;
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na, r, f, inv] {
      if (!na->requires_grad) return;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < f; ++j) na->grad[i * f + j] += o->grad[j] * inv;
    };
  }
  return Tensor(out);
}

// ---- concat / slice --------------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty part list");
  const std::size_t f = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
  std::size_t rows = 0;
  std::vector<NodePtr> par;
  par.reserve(parts.size());
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != f)
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    rows += p.dim(0);
    par.push_back(p.node());
  }
  auto out = make_op({rows, f}, "concat_rows", par);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out->data.begin() + at);
    at += p.numel();
  }
  if (recording(out)) {
    TensorNode* o = out.get();
    std::vector<TensorNode*> raw;
    raw.reserve(parts.size());
    for (const auto& p : parts) raw.push_back(p.node().get());
    out->backprop = [o, raw] {
      std::size_t at = 0;
      for (TensorNode* p : raw) {
        if (p->requires_grad) {
          for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += o->grad[at + i];
        }
        at += p->data.size();
      }
    };
  }
  return Tensor(out);
}

Tensor slice_rows(const Tensor& a, std::size_t row_begin, std::size_t row_end) {
  require_rank(a, 2, "slice_rows");
  if (row_begin >= row_end || row_end > a.dim(0))
    throw ShapeError("slice_rows: range [" + std::to_string(row_begin) + "," +
                     std::to_string(row_end) + ") out of " + shape_str(a.shape()));
  const std::size_t f = a.dim(1);
  auto out = make_op({row_end - row_begin, f}, "slice_rows", {a.node()});
  std::copy(a.values().begin() + row_begin * f, a.values().begin() + row_end * f,
            out->data.begin());
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* na = a.node().get();
    out->backprop = [o, na, row_begin, f] {
      if (!na->requires_grad) return;
      for (std::size_t i = 0; i < o->grad.size(); ++i) na->grad[row_begin * f + i] += o->grad[i];
    };
  }
  return Tensor(out);
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  require_rank(bias, 1, "conv2d");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin)
    throw ShapeError("conv2d: input channels " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  if (bias.dim(0) != Cout)
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs weight " +
                     shape_str(w.shape()));
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  auto out = make_op({B, Cout, Ho, Wo}, "conv2d", {x.node(), w.node(), bias.node()});
  const double* px = x.values().data();
  const double* pw = w.values().data();
  const double* pb = bias.values().data();
  double* po = out->data.data();

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Cout; ++co) {
      double* oplane = po + (b * Cout + co) * Ho * Wo;
      std::fill(oplane, oplane + Ho * Wo, pb[co]);
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* xplane = px + (b * Cin + ci) * H * W;
        const double* wk = pw + (co * Cin + ci) * kh * kw;
        for (std::size_t r = 0; r < kh; ++r) {
          for (std::size_t s = 0; s < kw; ++s) {
            const double wv = wk[r * kw + s];
            for (std::size_t oh = 0; oh < Ho; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + r) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              double* orow = oplane + oh * Wo;
              const double* xrow = xplane + ih * W;
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + s) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                orow[ow] += wv * xrow[iw];
              }
            }
          }
        }
      }
    }
  }

  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* nx = x.node().get();
    TensorNode* nw = w.node().get();
    TensorNode* nb = bias.node().get();
    out->backprop = [o, nx, nw, nb, B, Cin, Cout, H, W, Ho, Wo, kh, kw, stride, pad] {
      const double* g = o->grad.data();
      if (nb->requires_grad) {
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Cout; ++co) {
            const double* gplane = g + (b * Cout + co) * Ho * Wo;
            double acc = 0.0;
            for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gplane[i];
            nb->grad[co] += acc;
          }
      }
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t co = 0; co < Cout; ++co) {
          const double* gplane = g + (b * Cout + co) * Ho * Wo;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            const double* xplane = nx->data.data() + (b * Cin + ci) * H * W;
            double* dxplane = nx->requires_grad ? nx->grad.data() + (b * Cin + ci) * H * W : nullptr;
            const double* wk = nw->data.data() + (co * Cin + ci) * kh * kw;
            double* dwk = nw->requires_grad ? nw->grad.data() + (co * Cin + ci) * kh * kw : nullptr;
            for (std::size_t r = 0; r < kh; ++r) {
              for (std::size_t s = 0; s < kw; ++s) {
                const double wv = wk[r * kw + s];
                double dw_acc = 0.0;
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + r) -
                                            static_cast<std::ptrdiff_t>(pad);
                  if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                  const double* grow = gplane + oh * Wo;
                  const double* xrow = xplane + ih * W;
                  double* dxrow = dxplane ? dxplane + ih * W : nullptr;
                  for (std::size_t ow = 0; ow < Wo; ++ow) {
                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + s) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                    if (dwk) dw_acc += grow[ow] * xrow[iw];
                    if (dxrow) dxrow[iw] += grow[ow] * wv;
                  }
                }
                if (dwk) dwk[r * kw + s] += dw_acc;
              }
            }
          }
        }
      }
    };
  }
  return Tensor(out);
}

// ---- spatial flatten -------------------------------------------------------

Tensor flatten_cells(const Tensor& f) {
  require_rank(f, 4, "flatten_cells");
  const std::size_t B = f.dim(0), D = f.dim(1), H = f.dim(2), W = f.dim(3);
  const std::size_t N = H * W;
  auto out = make_op({B * N, D}, "flatten_cells", {f.node()});
  const double* pf = f.values().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d) {
      const double* plane = pf + (b * D + d) * N;
      for (std::size_t cell = 0; cell < N; ++cell) out->data[(b * N + cell) * D + d] = plane[cell];
    }
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* nf = f.node().get();
    out->backprop = [o, nf, B, D, N] {
      if (!nf->requires_grad) return;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) {
          double* plane = nf->grad.data() + (b * D + d) * N;
          for (std::size_t cell = 0; cell < N; ++cell)
            plane[cell] += o->grad[(b * N + cell) * D + d];
        }
    };
  }
  return Tensor(out);
}

Tensor unflatten_cells(const Tensor& rows, std::size_t batch, std::size_t channels,
                       std::size_t height, std::size_t width) {
  require_rank(rows, 2, "unflatten_cells");
  const std::size_t N = height * width;
  if (rows.dim(0) != batch * N || rows.dim(1) != channels)
    throw ShapeError("unflatten_cells: " + shape_str(rows.shape()) + " does not match B=" +
                     std::to_string(batch) + " D=" + std::to_string(channels) + " HxW=" +
                     std::to_string(height) + "x" + std::to_string(width));
  auto out = make_op({batch, channels, height, width}, "unflatten_cells", {rows.node()});
  const double* pr = rows.values().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t d = 0; d < channels; ++d) {
      double* plane = out->data.data() + (b * channels + d) * N;
      for (std::size_t cell = 0; cell < N; ++cell) plane[cell] = pr[(b * N + cell) * channels + d];
    }
  if (recording(out)) {
    TensorNode* o = out.get();
    TensorNode* nr = rows.node().get();
    out->backprop = [o, nr, batch, channels, N] {
      if (!nr->requires_grad) return;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t d = 0; d < channels; ++d) {
          const double* plane = o->grad.data() + (b * channels + d) * N;
          for (std::size_t cell = 0; cell < N; ++cell)
            nr->grad[(b * N + cell) * channels + d] += plane[cell];
        }
    };
  }
  return Tensor(out);
}

// ---- backward ---------------------------------------------------------------

namespace {

// Iterative post-order DFS; parents precede children in the result.
std::vector<TensorNode*> topo_order(TensorNode* root) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  TensorNode* root = loss.node().get();
  if (!root->requires_grad) return;  // nothing reachable requires gradients

  auto order = topo_order(root);
  for (TensorNode* n : order) {
    if (n->leaf) {
      if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
  // Interior accumulators are per-sweep scratch; release them eagerly.
  for (TensorNode* n : order) {
    if (!n->leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

std::string first_nonfinite(const Tensor& root) {
  if (!root.defined()) return "";
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (!visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (TensorNode* n : order) {
    for (double v : n->data) {
      if (!std::isfinite(v)) {
        std::string what = n->name.empty() ? std::string("op '") + n->op + "'"
                                           : "tensor '" + n->name + "'";
        return what + " of shape " + shape_str(n->dims);
      }
    }
  }
  return "";
}

}  // namespace hbfp
