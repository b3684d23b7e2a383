#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "exitnet/error.hpp"

namespace exitnet {

// Runtime FLOP counter. Forward ops charge it as they execute (see flops.hpp
// for the price list); backward kernels never do. Thread-local, so profiling
// a forward pass is reset(); run; count().
namespace flopcount {
void reset();
std::uint64_t count();
void charge(std::uint64_t n);
}  // namespace flopcount

namespace detail {

struct Node {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first use
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates (+=) into parents' grad.
  std::function<void(Node&)> backward_fn;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

bool grad_enabled();

}  // namespace detail

// Disables graph recording in scope (eval / numeric differentiation).
// Recording state is thread-local; values and FLOP charges are unaffected.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// float64 tensor with reverse-mode autograd. Row-major contiguous storage,
// no aliasing views: every op materialises its output.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t numel() const;
  std::size_t dim(std::size_t i) const;
  const double* data() const;
  double* data();
  double value() const;  // scalar tensors only
  double at(std::size_t flat) const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  const std::vector<double>& grad() const;
  std::vector<double>& grad();
  void zero_grad();

  Tensor detach() const;  // constant copy, no graph
  Tensor clone() const;   // copy preserving requires_grad (new leaf)

  // Reverse-mode pass from a scalar; seeds d(self)/d(self) = 1, visits each
  // recorded node exactly once in reverse topological order, accumulates (+=)
  // into leaf grads. Non-leaf grads are recomputed from scratch per call.
  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {
// Builds an op result node. Graph edges and the backward closure are only
// recorded when grads are enabled and some input requires them.
Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
               const std::vector<Tensor>& inputs, std::function<void(Node&)> backward);
}  // namespace detail

// Elementwise, trailing-dimension broadcasting (dims align from the right;
// each pair must be equal or 1, anything fancier is a ShapeError).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form

// Contraction over the last two axes; leading (batch) dims must match exactly.
Tensor matmul(const Tensor& a, const Tensor& b);

// Data-movement ops (0 FLOPs).
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose_last2(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Replicates a [d0,...] tensor to [n,d0,...]; backward sums over the new axis.
Tensor repeat_front(const Tensor& a, std::size_t n);

// Numerically stable (max-subtracted) softmax along `axis`. NaN input is a
// NumericalError; output rows sum to 1.
Tensor softmax(const Tensor& a, int axis);

// Normalisation over the last axis, biased variance, learned affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// x [..., in] * w[out, in]^T + b[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// x [B,Cin,H,W], w [Cout, Cin/groups, kh, kw], b [Cout]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding, std::size_t groups);

// Output bin i covers [floor(i*H/out), floor((i+1)*H/out)); requires H,W >= out.
Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out);

Tensor mean_axis(const Tensor& a, std::size_t axis);  // removes the axis
Tensor sum_all(const Tensor& a);

// Max relative error between analytic and central-difference gradients over
// every element of `params`, rel = |a-n| / max(1e-8, |a|+|n|). `f` must
// re-evaluate the loss from the params' current data on every call.
double gradient_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                      double eps);

}  // namespace exitnet
