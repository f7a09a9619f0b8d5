#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lumipower {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

// Dense row-major array of doubles with optional reverse-mode gradient.
//
// Tensor is a shared handle: copies refer to the same storage, which is how
// model parameters, optimizer state and checkpoints see one set of values.
// Values produced by an operation are not modified afterwards except through
// mutable_values() on leaves (parameter updates, data loading).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient when none exists.
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Accumulates d(this)/d(leaf) into every leaf that requires a gradient.
  // Only valid on single-element tensors.
  void backward() const;

  // Copy of the values with no history and no gradient requirement.
  Tensor detach() const;

  const detail::TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

using BackwardFn = std::function<void(TensorImpl& out)>;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

// Topologically ordered record of the operations that produced a tensor.
// Every operation appears after the operations that produced its operands.
class ComputationTape {
 public:
  struct Entry {
    const detail::Node* node;
    detail::TensorImpl* output;
  };

  static ComputationTape record(const Tensor& root);

  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  // Visits each entry once in reverse order, seeding root.grad with one.
  void run_backward(detail::TensorImpl& root) const;

 private:
  std::vector<Entry> entries_;
};

// Disables graph recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise arithmetic on equally shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& x);
Tensor abs(const Tensor& x);

// Reductions are correctly rounded (see ExactSum).
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

// Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1, std::size_t padding = 0);
// Adds bias[c] to every element of channel c of an [N,C,H,W] tensor.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
// Max over windows; out-of-bounds (padded) positions never win.
Tensor max_pool2d(const Tensor& x, std::size_t kernel = 2, std::size_t stride = 2, std::size_t padding = 0);
// Zero padding of the two spatial axes.
Tensor pad2d(const Tensor& x, std::size_t pad_top, std::size_t pad_bottom, std::size_t pad_left,
             std::size_t pad_right);
// [N,C,H,W] -> [N,C], spatial mean per channel.
Tensor global_avg_pool(const Tensor& x);
// [N,D] x [O,D] (+ [O]) -> [N,O].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias = nullptr);

enum class Mode { train, eval };

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormStats identity(std::size_t channels);
};

// Per-channel normalization of [N,C,H,W]. Train mode normalizes by batch
// statistics and updates the running estimates (unbiased variance); eval mode
// uses the running estimates.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, Mode mode);

}  // namespace lumipower
