#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hbfp/errors.hpp"

namespace hbfp {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

namespace detail {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One recorded op: inputs (parents), output values (this node) and the
// local-gradient rule. Leaves have no parents and no backprop closure.
struct TensorNode {
  Shape dims;
  std::vector<double> data;
  std::vector<double> grad;  // leaves: persistent accumulator; interior: backward scratch
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::string name;  // set for registered parameters; used in diagnostics
  std::vector<NodePtr> parents;
  std::function<void()> backprop;

  std::size_t numel() const { return data.size(); }
};

// Op-node factory for primitives defined outside tensor.cpp (pooling, losses,
// distances). Output records parents only when recording is active.
NodePtr make_op_node(Shape dims, const char* op, std::vector<NodePtr> parents);
inline bool is_recording(const NodePtr& node) { return !node->leaf; }

}  // namespace detail

// Dense row-major 64-bit real tensor. Value-like handle: copies share the
// underlying storage. Ops record a dynamic graph per forward pass whenever
// gradients are enabled and some input requires them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape dims, bool requires_grad = false);
  static Tensor full(Shape dims, double value, bool requires_grad = false);
  static Tensor from_data(Shape dims, std::vector<double> values, bool requires_grad = false);
  // i.i.d. N(0, stddev^2) entries.
  static Tensor randn(Shape dims, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->dims; }
  std::size_t numel() const { return node_->numel(); }
  std::size_t dim(std::size_t i) const { return node_->dims.at(i); }
  std::size_t rank() const { return node_->dims.size(); }

  const std::vector<double>& values() const { return node_->data; }
  std::vector<double>& values() { return node_->data; }

  double& at(std::size_t i) { return node_->data[i]; }
  double at(std::size_t i) const { return node_->data[i]; }
  double& at(std::size_t i, std::size_t j) { return node_->data[i * dim(1) + j]; }
  double at(std::size_t i, std::size_t j) const { return node_->data[i * dim(1) + j]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  // Only leaves may toggle gradient tracking.
  Tensor& set_requires_grad(bool value);

  // Gradient accumulator; valid on requires_grad leaves after backward().
  const std::vector<double>& grad() const;
  void zero_grad();

  const std::string& name() const { return node_->name; }
  Tensor& set_name(std::string name);
  const char* op_name() const { return node_->op; }

  // Detached value copy (fresh leaf, no graph history).
  Tensor detach_copy() const;

  bool all_finite() const;

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

// Thread-local switch for graph recording; eval paths wrap forwards in a guard.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Kink-avoiding sampling support: ops with non-differentiable selectors
// (relu at 0, pooling thresholds, hard mining ties) report how close the
// current evaluation sits to a selector boundary. Gradient checks resample
// when the margin is too small.
struct KinkMeter {
  double min_margin = 1e300;
  void note(double m) {
    if (m < min_margin) min_margin = m;
  }
};
class KinkScope {
 public:
  explicit KinkScope(KinkMeter& meter);
  ~KinkScope();
  KinkScope(const KinkScope&) = delete;
  KinkScope& operator=(const KinkScope&) = delete;

 private:
  KinkMeter* prev_;
};
void kink_note(double margin);

// ---- primitives --------------------------------------------------------
// Standard contracts; every op validates shapes and throws ShapeError /
// ContractError naming the offending dims.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);
Tensor reshape(const Tensor& a, Shape dims);

// Binary elementwise ops accept identical dims, or b broadcastable along a
// single unit dimension (e.g. [B,1,H,W] against [B,D,H,W]).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& a);  // subgradient 0 at exactly 0
Tensor sigmoid(const Tensor& a);
// (x + shift)^(-1/2); domain x + shift > 0.
Tensor rsqrt(const Tensor& a, double shift = 0.0);

// Column-stochastic softmax with per-column max subtraction.
Tensor softmax_columns(const Tensor& m);

Tensor sum(const Tensor& a);        // -> [1]
Tensor mean(const Tensor& a);       // -> [1]
Tensor mean_rows(const Tensor& a);  // [R,F] -> [1,F]

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t row_begin, std::size_t row_end);

// x: [B,Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout]. Supports the 1x1 and 3x3
// kernels the models need; general square kernels work.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad);

// [B,D,H,W] -> [(B*H*W), D]; row b*H*W + h*W + w holds the channel vector of
// that spatial cell. unflatten_cells is the exact inverse.
Tensor flatten_cells(const Tensor& f);
Tensor unflatten_cells(const Tensor& rows, std::size_t batch, std::size_t channels,
                       std::size_t height, std::size_t width);

// Reverse-mode sweep from a scalar loss. Gradients of requires_grad leaves
// accumulate additively across calls; interior scratch is per-call.
void backward(const Tensor& loss);

// Name of the first node (topological order) holding a non-finite value, or
// empty string when the whole graph is finite.
std::string first_nonfinite(const Tensor& root);

}  // namespace hbfp
