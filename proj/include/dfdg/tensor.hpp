#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors.
//
// A Tensor is a cheap handle onto a shared node. Ops called while gradient
// recording is enabled, with at least one input that tracks gradients,
// produce tensors carrying lineage (the producing op, its inputs and a
// backward closure). backward() walks that DAG from a scalar root and
// returns a fresh GradMap; no gradient state is stored on the tensors.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dfdg {

using Shape = std::vector<std::size_t>;

/// Product of the dimensions; 1 for the rank-0 (scalar) shape.
std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct Node;
}

/// Arguments handed to an op's backward closure.
struct BackwardArgs {
  std::span<const double> output;       // forward values of the op
  std::span<const double> grad_output;  // dRoot/dOutput
  // One buffer per input, already sized; nullptr where the input does not
  // track gradients. Closures must accumulate (+=), never assign.
  std::span<std::vector<double>* const> grad_inputs;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

class GradMap;

class Tensor {
 public:
  /// An empty rank-1 tensor of length 0.
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor scalar(double value);

  /// Builds the result of a differentiable op. Lineage is recorded only when
  /// gradient recording is enabled and some input tracks gradients.
  static Tensor from_op(std::string op, Shape shape, std::vector<double> values,
                        std::vector<Tensor> inputs, BackwardFn backward);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::span<const double> values() const;
  double operator[](std::size_t flat_index) const;
  /// Value of a one-element tensor.
  double item() const;

  bool requires_grad() const;
  /// Marks a leaf as a gradient target. Throws ContractError on non-leaves.
  Tensor& set_requires_grad(bool on = true);
  /// True for gradient-target leaves and for tensors with lineage.
  bool tracks_grad() const;
  bool has_lineage() const;
  const std::string& op() const;
  std::vector<Tensor> inputs() const;

  /// In-place access for leaves (parameter updates). Throws ContractError
  /// when the tensor has lineage.
  std::span<double> mutable_values();

  /// Deep copy as a fresh leaf; keeps the requires_grad flag.
  Tensor clone() const;
  /// Deep copy as a leaf that does not track gradients.
  Tensor detach() const;

  /// Identity of the underlying node (shared by copies of this handle).
  const void* id() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node);
  std::shared_ptr<detail::Node> node_;

  friend class GradMap;
  friend GradMap backward(const Tensor& root);
};

/// Gradients of one backward pass, keyed by tensor identity.
class GradMap {
 public:
  bool contains(const Tensor& t) const;
  /// Throws ContractError when the tensor was not reached by the pass.
  std::span<const double> at(const Tensor& t) const;
  /// Gradient as a detached tensor of the same shape.
  Tensor tensor(const Tensor& t) const;
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<detail::Node> node;
    std::vector<double> grad;
  };
  std::unordered_map<const detail::Node*, Entry> entries_;

  friend GradMap backward(const Tensor& root);
};

/// Reverse-mode pass from a one-element root. Returns gradients for every
/// gradient-tracking tensor reachable from the root (leaves and
/// intermediates). Contributions over multiple paths are summed.
GradMap backward(const Tensor& root);

/// Sets the thread's gradient-recording mode for its lifetime and restores
/// the previous mode on destruction.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, ops on this thread record no lineage (inference passes).
class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

bool grad_enabled();

// ---- ops -------------------------------------------------------------------

/// x[batch x in] * w[in x out] + b[out].
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
/// Elementwise max(0, x). The gradient at exactly 0 is 0.
Tensor relu(const Tensor& x);
/// Row-wise softmax of a [batch x C] tensor, C >= 2, with max subtraction.
/// Throws NumericError on non-finite input.
Tensor softmax_rows(const Tensor& logits);
/// Sum of all elements, as a rank-0 tensor.
Tensor sum(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor reshape(const Tensor& x, Shape shape);
/// Stride-1 cross-correlation with zero "same" padding.
/// x[batch x in_ch x len], w[out_ch x in_ch x kernel] (kernel odd), b[out_ch].
Tensor conv1d_same(const Tensor& x, const Tensor& w, const Tensor& b);
/// Mean over the last axis of a [batch x ch x len] tensor.
Tensor global_avg_pool(const Tensor& x);
/// sum_r m[r, cols[r]] for a [rows x C] tensor.
Tensor pick_sum(const Tensor& m, std::span<const int> cols);

/// Central-difference gradient check of a scalar function at x. Returns
/// max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps);

}  // namespace dfdg
