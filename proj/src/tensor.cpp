#include "lumipower/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "lumipower/error.hpp"
#include "lumipower/exact_sum.hpp"
#include "lumipower/parallel.hpp"

namespace lumipower {

using detail::Node;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (lumipower::numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = lumipower::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{}, {value}, requires_grad); }

static TensorImpl& checked(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl) throw Error("use of an undefined tensor");
  return *impl;
}

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(impl_).values.size(); }

std::span<const double> Tensor::values() const { return checked(impl_).values; }

std::span<double> Tensor::mutable_values() { return checked(impl_).values; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw Error("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return checked(impl_).node == nullptr; }

bool Tensor::has_grad() const { return !checked(impl_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(impl_).grad; }

std::span<double> Tensor::mutable_grad() { return checked(impl_).grad_buffer(); }

void Tensor::zero_grad() {
  auto& impl = checked(impl_);
  if (!impl.grad.empty()) std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
}

void Tensor::clear_grad() {
  auto& impl = checked(impl_);
  impl.grad.clear();
  impl.grad.shrink_to_fit();
}

void Tensor::backward() const {
  auto& impl = checked(impl_);
  if (impl.values.size() != 1) throw ShapeError("backward() needs a scalar, got shape " + to_string(impl.shape));
  if (!impl.requires_grad) throw Error("backward() on a tensor that does not require grad");
  ComputationTape::record(*this).run_backward(impl);
}

Tensor Tensor::detach() const {
  const auto& impl = checked(impl_);
  return Tensor(impl.shape, impl.values, false);
}

// ---------------------------------------------------------------- tape

ComputationTape ComputationTape::record(const Tensor& root) {
  ComputationTape tape;
  if (!root.defined()) return tape;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      TensorImpl* child = impl->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    if (impl->node) tape.entries_.push_back({impl->node.get(), impl});
    stack.pop_back();
  }
  return tape;
}

void ComputationTape::run_backward(TensorImpl& root) const {
  for (const Entry& e : entries_) {
    e.output->grad.assign(e.output->values.size(), 0.0);
  }
  auto& seed = root.grad_buffer();
  seed[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->node->backward(*it->output);
}

// ---------------------------------------------------------------- grad mode

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------- helpers

namespace {

Tensor make_result(std::string op, Shape shape, std::vector<double> values, std::vector<ImplPtr> inputs,
                   detail::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  const bool needs_grad =
      grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const ImplPtr& p) { return p->requires_grad; });
  if (needs_grad) {
    auto node = std::make_shared<Node>();
    node->op = std::move(op);
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->node = std::move(node);
  }
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

template <class F>
Tensor unary(const char* op, const Tensor& x, F&& f, std::function<double(double x, double y)> derivative) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  ImplPtr in = x.impl();
  return make_result(op, x.shape(), std::move(out), {in}, [in, derivative](TensorImpl& o) {
    if (!in->requires_grad) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * derivative(in->values[i], o.values[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  ImplPtr ia = a.impl(), ib = b.impl();
  return make_result("add", a.shape(), std::move(out), {ia, ib}, [ia, ib](TensorImpl& o) {
    for (const ImplPtr& in : {ia, ib}) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  ImplPtr ia = a.impl(), ib = b.impl();
  return make_result("sub", a.shape(), std::move(out), {ia, ib}, [ia, ib](TensorImpl& o) {
    if (ia->requires_grad) {
      auto& g = ia->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (ib->requires_grad) {
      auto& g = ib->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  ImplPtr ia = a.impl(), ib = b.impl();
  return make_result("mul", a.shape(), std::move(out), {ia, ib}, [ia, ib](TensorImpl& o) {
    if (ia->requires_grad) {
      auto& g = ia->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ib->values[i];
    }
    if (ib->requires_grad) {
      auto& g = ib->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ia->values[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  ImplPtr in = a.impl();
  return make_result("scale", a.shape(), std::move(out), {in}, [in, factor](TensorImpl& o) {
    if (!in->requires_grad) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + offset;
  ImplPtr in = a.impl();
  return make_result("add_scalar", a.shape(), std::move(out), {in}, [in](TensorImpl& o) {
    if (!in->requires_grad) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor neg(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -av[i];
  ImplPtr in = a.impl();
  return make_result("neg", a.shape(), std::move(out), {in}, [in](TensorImpl& o) {
    if (!in->requires_grad) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
  });
}

// Subgradient at exactly zero is 0 for both.
Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 || std::isnan(v) ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  const double total = exact_sum(x.values());
  ImplPtr in = x.impl();
  return make_result("sum", Shape{}, {total}, {in}, [in](TensorImpl& o) {
    if (!in->requires_grad) return;
    auto& g = in->grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdims) {
  const Shape& in_shape = x.shape();
  std::vector<bool> reduced(in_shape.size(), false);
  for (std::size_t a : axes) {
    if (a >= in_shape.size()) throw ShapeError("sum: axis " + std::to_string(a) + " out of range for " + to_string(in_shape));
    reduced[a] = true;
  }
  Shape kept_shape(in_shape.size());
  Shape out_shape;
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    kept_shape[d] = reduced[d] ? 1 : in_shape[d];
    if (!reduced[d]) out_shape.push_back(in_shape[d]);
    else if (keepdims) out_shape.push_back(1);
  }
  // Map each input element to its output slot.
  std::vector<std::size_t> target(x.numel());
  {
    std::vector<std::size_t> idx(in_shape.size(), 0);
    for (std::size_t flat = 0; flat < target.size(); ++flat) {
      std::size_t o = 0;
      for (std::size_t d = 0; d < in_shape.size(); ++d) o = o * kept_shape[d] + (reduced[d] ? 0 : idx[d]);
      target[flat] = o;
      for (std::size_t d = in_shape.size(); d-- > 0;) {
        if (++idx[d] < in_shape[d]) break;
        idx[d] = 0;
      }
    }
  }
  std::vector<ExactSum> acc(numel(kept_shape));
  const auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) acc[target[i]].add(xv[i]);
  std::vector<double> out(acc.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = acc[i].round();
  ImplPtr in = x.impl();
  return make_result("sum_axes", std::move(out_shape), std::move(out), {in},
                     [in, target = std::move(target)](TensorImpl& o) {
                       if (!in->requires_grad) return;
                       auto& g = in->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[target[i]];
                     });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  ImplPtr in = x.impl();
  return make_result("reshape", std::move(shape), std::move(out), {in}, [in](TensorImpl& o) {
    if (!in->requires_grad) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) read an in-bounds input column for kernel offset kx.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kx) {
  std::size_t lo = 0;
  if (g.pad > kx) lo = (g.pad - kx + g.stride - 1) / g.stride;
  if (g.w + g.pad <= kx) return {0, 0};
  std::size_t hi = std::min(g.wo, (g.w - 1 + g.pad - kx) / g.stride + 1);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t P = g.p();
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* xc = x + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          std::fill(dst, dst + lo, 0.0);
          std::fill(dst + hi, dst + g.wo, 0.0);
          const double* src = xc + iy * g.w + (lo * g.stride + kx - g.pad);
          if (g.stride == 1) {
            std::copy(src, src + (hi - lo), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox, src += g.stride) dst[ox] = *src;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* x) {
  const std::size_t P = g.p();
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* xc = x + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = xc + iy * g.w + (lo * g.stride + kx - g.pad);
          const double* src = row + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox, dst += g.stride) *dst += src[ox];
        }
      }
    }
  }
}

// Per-thread scratch; resizing to an already reached size does not touch memory.
double* scratch(std::size_t slot, std::size_t size) {
  thread_local std::vector<double> buffers[2];
  if (buffers[slot].size() < size) buffers[slot].resize(size);
  return buffers[slot].data();
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be at least 1");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.cin) {
    throw ShapeError("conv2d: input has " + std::to_string(g.cin) + " channels, kernel expects " +
                     std::to_string(kernel.dim(1)));
  }
  if (g.kh == 0 || g.kw == 0 || g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " does not fit input " + to_string(input.shape()) +
                     " with padding " + std::to_string(padding));
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  if (g.ho == 0 || g.wo == 0 || g.n == 0) throw ShapeError("conv2d: empty output");

  const std::size_t K = g.k(), P = g.p();
  const std::size_t in_stride = g.cin * g.h * g.w;
  std::vector<double> out(g.n * g.cout * P);
  const double* xdata = input.values().data();
  const double* wdata = kernel.values().data();
  parallel_for(g.n, [&](std::size_t n) {
    Eigen::Map<const RowMatrix> W(wdata, g.cout, K);
    Eigen::Map<RowMatrix> Y(out.data() + n * g.cout * P, g.cout, P);
    if (g.pointwise()) {
      Y.noalias() = W * Eigen::Map<const RowMatrix>(xdata + n * in_stride, K, P);
    } else {
      double* col = scratch(0, K * P);
      im2col(g, xdata + n * in_stride, col);
      Y.noalias() = W * Eigen::Map<const RowMatrix>(col, K, P);
    }
  });

  ImplPtr in = input.impl(), ker = kernel.impl();
  return make_result("conv2d", Shape{g.n, g.cout, g.ho, g.wo}, std::move(out), {in, ker}, [in, ker, g](TensorImpl& o) {
    const std::size_t K = g.k(), P = g.p();
    const std::size_t in_stride = g.cin * g.h * g.w;
    const bool want_input = in->requires_grad;
    const bool want_kernel = ker->requires_grad;
    // Per-sample kernel gradients are summed in sample order afterwards so the
    // result is identical for every worker count.
    std::vector<double> dkernel_per_sample(want_kernel ? g.n * g.cout * K : 0);
    double* dx = want_input ? in->grad_buffer().data() : nullptr;
    parallel_for(g.n, [&](std::size_t n) {
      Eigen::Map<const RowMatrix> dY(o.grad.data() + n * g.cout * P, g.cout, P);
      const double* col_ptr = in->values.data() + n * in_stride;
      if (want_kernel) {
        if (!g.pointwise()) {
          double* col = scratch(0, K * P);
          im2col(g, in->values.data() + n * in_stride, col);
          col_ptr = col;
        }
        Eigen::Map<RowMatrix> dW(dkernel_per_sample.data() + n * g.cout * K, g.cout, K);
        dW.noalias() = dY * Eigen::Map<const RowMatrix>(col_ptr, K, P).transpose();
      }
      if (want_input) {
        Eigen::Map<const RowMatrix> W(ker->values.data(), g.cout, K);
        if (g.pointwise()) {
          Eigen::Map<RowMatrix> dX(dx + n * in_stride, K, P);
          dX.noalias() += W.transpose() * dY;
        } else {
          double* dcol = scratch(1, K * P);
          Eigen::Map<RowMatrix>(dcol, K, P).noalias() = W.transpose() * dY;
          col2im_add(g, dcol, dx + n * in_stride);
        }
      }
    });
    if (want_kernel) {
      auto& dk = ker->grad_buffer();
      for (std::size_t n = 0; n < g.n; ++n) {
        const double* part = dkernel_per_sample.data() + n * g.cout * K;
        for (std::size_t i = 0; i < dk.size(); ++i) dk[i] += part[i];
      }
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 4, "add_channel_bias");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (bias.numel() != C) {
    throw ShapeError("add_channel_bias: " + std::to_string(C) + " channels but bias of shape " + to_string(bias.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) out[(n * C + c) * HW + i] += bv[c];
  ImplPtr in = x.impl(), ib = bias.impl();
  return make_result("add_channel_bias", x.shape(), std::move(out), {in, ib}, [in, ib, N, C, HW](TensorImpl& o) {
    if (in->requires_grad) {
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (ib->requires_grad) {
      auto& g = ib->grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < HW; ++i) g[c] += o.grad[(n * C + c) * HW + i];
    }
  });
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  require_rank(x, 4, "max_pool2d");
  if (kernel == 0 || stride == 0) throw ShapeError("max_pool2d: kernel and stride must be positive");
  if (padding >= kernel) throw ShapeError("max_pool2d: padding must be smaller than the kernel");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel > H + 2 * padding || kernel > W + 2 * padding) throw ShapeError("max_pool2d: window larger than input");
  const std::size_t Ho = (H + 2 * padding - kernel) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kernel) / stride + 1;
  std::vector<double> out(N * C * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  const auto xv = x.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* plane = xv.data() + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const double v = plane[iy * W + ix];
            // NaN wins so that non-finite activations surface in the loss.
            if (!found || v > best || (std::isnan(v) && !std::isnan(best))) {
              best = v;
              best_idx = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
              found = true;
            }
          }
        }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = best;
        argmax[o] = nc * H * W + best_idx;
      }
    }
  }
  ImplPtr in = x.impl();
  return make_result("max_pool2d", Shape{N, C, Ho, Wo}, std::move(out), {in},
                     [in, argmax = std::move(argmax)](TensorImpl& o) {
                       if (!in->requires_grad) return;
                       auto& g = in->grad_buffer();
                       for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o.grad[i];
                     });
}

Tensor pad2d(const Tensor& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right) {
  require_rank(x, 4, "pad2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Hp = H + top + bottom, Wp = W + left + right;
  std::vector<double> out(N * C * Hp * Wp, 0.0);
  const auto xv = x.values();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < H; ++y)
      std::copy_n(xv.data() + (nc * H + y) * W, W, out.data() + (nc * Hp + y + top) * Wp + left);
  ImplPtr in = x.impl();
  return make_result("pad2d", Shape{N, C, Hp, Wp}, std::move(out), {in},
                     [in, N, C, H, W, Hp, Wp, top, left](TensorImpl& o) {
                       if (!in->requires_grad) return;
                       auto& g = in->grad_buffer();
                       for (std::size_t nc = 0; nc < N * C; ++nc)
                         for (std::size_t y = 0; y < H; ++y)
                           for (std::size_t xx = 0; xx < W; ++xx)
                             g[(nc * H + y) * W + xx] += o.grad[(nc * Hp + y + top) * Wp + left + xx];
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  std::vector<double> out(N * C);
  const auto xv = x.values();
  const double area = static_cast<double>(HW);
  for (std::size_t nc = 0; nc < N * C; ++nc) out[nc] = exact_sum(xv.subspan(nc * HW, HW)) / area;
  ImplPtr in = x.impl();
  return make_result("global_avg_pool", Shape{N, C}, std::move(out), {in}, [in, HW, area](TensorImpl& o) {
    if (!in->requires_grad) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i / HW] / area;
  });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const std::size_t N = input.dim(0), D = input.dim(1), O = weight.dim(0);
  if (weight.dim(1) != D) {
    throw ShapeError("linear: input features " + std::to_string(D) + " vs weight " + to_string(weight.shape()));
  }
  if (bias != nullptr && bias->numel() != O) throw ShapeError("linear: bias of shape " + to_string(bias->shape()));
  std::vector<double> out(N * O);
  const auto xv = input.values();
  const auto wv = weight.values();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      double acc = 0.0;
      for (std::size_t d = 0; d < D; ++d) acc += xv[n * D + d] * wv[o * D + d];
      if (bias != nullptr) acc += bias->values()[o];
      out[n * O + o] = acc;
    }
  }
  ImplPtr in = input.impl(), iw = weight.impl();
  std::vector<ImplPtr> inputs{in, iw};
  ImplPtr ib = bias != nullptr ? bias->impl() : nullptr;
  if (ib) inputs.push_back(ib);
  return make_result("linear", Shape{N, O}, std::move(out), std::move(inputs), [in, iw, ib, N, D, O](TensorImpl& o) {
    if (in->requires_grad) {
      auto& g = in->grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < O; ++k)
          for (std::size_t d = 0; d < D; ++d) g[n * D + d] += o.grad[n * O + k] * iw->values[k * D + d];
    }
    if (iw->requires_grad) {
      auto& g = iw->grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < O; ++k)
          for (std::size_t d = 0; d < D; ++d) g[k * D + d] += o.grad[n * O + k] * in->values[n * D + d];
    }
    if (ib && ib->requires_grad) {
      auto& g = ib->grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < O; ++k) g[k] += o.grad[n * O + k];
    }
  });
}

// ---------------------------------------------------------------- batchnorm

BatchNormStats BatchNormStats::identity(std::size_t channels) {
  BatchNormStats s;
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0);
  return s;
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, Mode mode) {
  require_rank(x, 4, "batchnorm2d");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || stats.running_mean.numel() != C || stats.running_var.numel() != C) {
    throw ShapeError("batchnorm2d: parameters do not match " + std::to_string(C) + " channels");
  }
  const std::size_t m = N * HW;
  if (mode == Mode::train && m < 2) {
    throw ShapeError("batchnorm2d: train mode needs at least 2 values per channel, got " + std::to_string(m));
  }
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> xhat(x.numel());
  std::vector<double> invstd(C);
  std::vector<double> out(x.numel());
  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) s += xv[(n * C + c) * HW + i];
      mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = xv[(n * C + c) * HW + i] - mu;
          ss += d * d;
        }
      var = ss / static_cast<double>(m);
      auto rm = stats.running_mean.mutable_values();
      auto rv = stats.running_var.mutable_values();
      rm[c] = (1.0 - stats.momentum) * rm[c] + stats.momentum * mu;
      rv[c] = (1.0 - stats.momentum) * rv[c] + stats.momentum * (ss / static_cast<double>(m - 1));
    } else {
      mu = stats.running_mean.values()[c];
      var = stats.running_var.values()[c];
    }
    invstd[c] = 1.0 / std::sqrt(var + stats.eps);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (n * C + c) * HW + i;
        xhat[k] = (xv[k] - mu) * invstd[c];
        out[k] = gv[c] * xhat[k] + bv[c];
      }
  }
  ImplPtr in = x.impl(), ig = gamma.impl(), ib = beta.impl();
  return make_result(
      "batchnorm2d", x.shape(), std::move(out), {in, ig, ib},
      [in, ig, ib, N, C, HW, m, mode, xhat = std::move(xhat), invstd = std::move(invstd)](TensorImpl& o) {
        const auto& dy = o.grad;
        for (std::size_t c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t k = (n * C + c) * HW + i;
              sum_dy += dy[k];
              sum_dy_xhat += dy[k] * xhat[k];
            }
          if (ig->requires_grad) ig->grad_buffer()[c] += sum_dy_xhat;
          if (ib->requires_grad) ib->grad_buffer()[c] += sum_dy;
          if (!in->requires_grad) continue;
          auto& g = in->grad_buffer();
          const double gamma_c = ig->values[c];
          if (mode == Mode::train) {
            const double md = static_cast<double>(m);
            const double coeff = gamma_c * invstd[c] / md;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = (n * C + c) * HW + i;
                g[k] += coeff * (md * dy[k] - sum_dy - xhat[k] * sum_dy_xhat);
              }
          } else {
            const double coeff = gamma_c * invstd[c];
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = (n * C + c) * HW + i;
                g[k] += coeff * dy[k];
              }
          }
        }
      });
}

}  // namespace lumipower
