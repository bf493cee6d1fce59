#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "refgen/tensor.hpp"

namespace refgen::ad {

namespace detail {
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accum_grad(const Tensor& delta);
  void accum_grad_raw(const double* delta, std::int64_t n);
};
}  // namespace detail

// Handle to a node in the dynamically-built computation graph. Copy is
// cheap (shared ownership). A Var with requires_grad=true acts as a leaf
// parameter; its grad persists until zero_grad().
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  // Gradient accumulated by backward(); zero tensor if untouched.
  const Tensor& grad() const;
  void zero_grad();

  // Same value, detached from the graph (deep copy, no grad).
  Var detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Thread-local flag: when disabled, ops record no parents/backward closures
// and outputs never require grad.
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

// Reverse-mode sweep from a scalar root (seeded with 1).
void backward(const Var& root);

// Custom-op builder: value plus closure that routes this node's grad into the
// listed parents. The closure is dropped entirely when grads are disabled or
// no parent requires grad.
Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(detail::Node&)> backward_fn);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var exp_(const Var& a);
Var log_(const Var& a);
Var tanh_(const Var& a);
Var sigmoid_(const Var& a);
Var silu_(const Var& a);
Var abs_(const Var& a);
Var square(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---- matrix ----
Var matmul(const Var& a, const Var& b);     // (m,k)x(k,n)
Var matmul_nt(const Var& a, const Var& b);  // (m,k)x(n,k)^T
Var add_rowvec(const Var& x, const Var& v);  // broadcast (1,C) over rows

// ---- reductions / shape ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var row_sum(const Var& a);  // (R,C) -> (R,1)
Var reshape(const Var& a, std::vector<std::int64_t> shape);
Var concat_rows(const Var& a, const Var& b);
Var concat_cols(const Var& a, const Var& b);
Var slice_rows(const Var& a, std::int64_t r0, std::int64_t r1);
Var inner_const(const Var& x, const Tensor& w);  // sum(x*w) -> scalar

// ---- rows as distributions / vectors ----
Var softmax_rows(const Var& a);
Var row_normalize(const Var& a, double eps = 1e-12);  // x / ||x||_2 per row
Var layernorm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// ---- ray quadrature ----
Var exclusive_cumsum_rows(const Var& a);          // y_k = sum_{j<k} x_j
Var composite_rows(const Var& w, const Var& x);   // w:(R,K), x:(R*K,C) -> (R,C)

// ---- image ops (HWC flattened to (H*W, C)) ----
Var conv2d(const Var& x, const Var& kernel, const Var& bias, int h, int w,
           int k, int stride, int pad);
Var upsample_nearest2(const Var& x, int h, int w);
Var avg_downsample(const Var& x, int h, int w, int factor);

// ---- conveniences ----
Var mse(const Var& a, const Var& b);       // mean squared error
Var constant(Tensor t);

double finite_diff_check(const std::function<double()>& f, double* param,
                         double analytic_grad, double step);

}  // namespace refgen::ad
