#include "refgen/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace refgen::ad {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

static ECMap cmap(const Tensor& t) { return ECMap(t.data(), t.rows(), t.cols()); }
static EMap map(Tensor& t) { return EMap(t.data(), t.rows(), t.cols()); }

namespace detail {

void Node::accum_grad(const Tensor& delta) {
  accum_grad_raw(delta.data(), delta.numel());
}

void Node::accum_grad_raw(const double* delta, std::int64_t n) {
  if (grad.empty()) grad = Tensor::zeros(value.shape());
  assert(n == grad.numel());
  double* g = grad.data();
  for (std::int64_t i = 0; i < n; ++i) g[i] += delta[i];
}

}  // namespace detail

static thread_local bool g_grad_enabled = true;

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad && g_grad_enabled;
}

const Tensor& Var::grad() const {
  if (node_->grad.empty()) node_->grad = Tensor::zeros(node_->value.shape());
  return node_->grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var Var::detach() const { return Var(node_->value, false); }

Var constant(Tensor t) { return Var(std::move(t), false); }

Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(detail::Node&)> backward_fn) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool need = false;
    for (const auto& p : parents)
      if (p.requires_grad()) need = true;
    if (need) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined() || !root.requires_grad()) return;
  if (root.value().numel() != 1)
    throw std::logic_error("backward: root must be scalar");

  // Post-order DFS (iterative), then reverse: consumers run before producers.
  std::vector<detail::Node*> topo;
  std::unordered_set<detail::Node*> seen;
  struct Frame {
    detail::Node* n;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node().get(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      detail::Node* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }

  root.node()->accum_grad(Tensor::scalar(1.0));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

static void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.value().shape_str() + " vs " + b.value().shape_str());
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a.value();
  const double* pb = b.value().data();
  double* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
  return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](detail::Node& n) {
    if (an->requires_grad) an->accum_grad(n.grad);
    if (bn->requires_grad) bn->accum_grad(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a.value();
  const double* pb = b.value().data();
  double* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] -= pb[i];
  return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](detail::Node& n) {
    if (an->requires_grad) an->accum_grad(n.grad);
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad = Tensor::zeros(bn->value.shape());
      double* g = bn->grad.data();
      const double* d = n.grad.data();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] -= d[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a.value();
  const double* pb = b.value().data();
  double* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] *= pb[i];
  return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](detail::Node& n) {
    const std::int64_t m = n.grad.numel();
    const double* d = n.grad.data();
    if (an->requires_grad) {
      if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
      double* g = an->grad.data();
      const double* bv = bn->value.data();
      for (std::int64_t i = 0; i < m; ++i) g[i] += d[i] * bv[i];
    }
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad = Tensor::zeros(bn->value.shape());
      double* g = bn->grad.data();
      const double* av = an->value.data();
      for (std::int64_t i = 0; i < m; ++i) g[i] += d[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a.value();
  const double* pb = b.value().data();
  double* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] /= pb[i];
  return make_op(std::move(out), {a, b},
                 [an = a.node(), bn = b.node()](detail::Node& n) {
    const std::int64_t m = n.grad.numel();
    const double* d = n.grad.data();
    const double* bv = bn->value.data();
    if (an->requires_grad) {
      if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
      double* g = an->grad.data();
      for (std::int64_t i = 0; i < m; ++i) g[i] += d[i] / bv[i];
    }
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad = Tensor::zeros(bn->value.shape());
      double* g = bn->grad.data();
      const double* y = n.value.data();
      for (std::int64_t i = 0; i < m; ++i) g[i] -= d[i] * y[i] / bv[i];
    }
  });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  double* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] += c;
  return make_op(std::move(out), {a}, [an = a.node()](detail::Node& n) {
    an->accum_grad(n.grad);
  });
}

Var mul_scalar(const Var& a, double c) {
  Tensor out = a.value();
  double* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] *= c;
  return make_op(std::move(out), {a}, [an = a.node(), c](detail::Node& n) {
    if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
    double* g = an->grad.data();
    const double* d = n.grad.data();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += c * d[i];
  });
}

template <class F, class DF>
static Var unary_op(const Var& a, F f, DF df_from_out_in) {
  Tensor out = a.value();
  double* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = f(po[i]);
  return make_op(std::move(out), {a}, [an = a.node(), df_from_out_in](detail::Node& n) {
    if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
    double* g = an->grad.data();
    const double* d = n.grad.data();
    const double* y = n.value.data();
    const double* x = an->value.data();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += d[i] * df_from_out_in(y[i], x[i]);
  });
}

Var exp_(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double y, double) { return y; });
}
Var log_(const Var& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double, double x) { return 1.0 / x; });
}
Var tanh_(const Var& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double y, double) { return 1.0 - y * y; });
}
Var sigmoid_(const Var& a) {
  return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double y, double) { return y * (1.0 - y); });
}
Var silu_(const Var& a) {
  return unary_op(a, [](double x) { return x / (1.0 + std::exp(-x)); },
                  [](double, double x) {
                    double s = 1.0 / (1.0 + std::exp(-x));
                    return s * (1.0 + x * (1.0 - s));
                  });
}
Var abs_(const Var& a) {
  return unary_op(a, [](double x) { return std::abs(x); },
                  [](double, double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
Var square(const Var& a) {
  return unary_op(a, [](double x) { return x * x; },
                  [](double, double x) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// matrix
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows())
    throw std::invalid_argument("matmul: inner dims " + av.shape_str() + " x " + bv.shape_str());
  Tensor out({av.rows(), bv.cols()});
  map(out).noalias() = cmap(av) * cmap(bv);
  return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](detail::Node& n) {
    ECMap d(n.grad.data(), n.grad.rows(), n.grad.cols());
    if (an->requires_grad) {
      if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
      EMap(an->grad.data(), an->grad.rows(), an->grad.cols()).noalias() +=
          d * cmap(bn->value).transpose();
    }
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad = Tensor::zeros(bn->value.shape());
      EMap(bn->grad.data(), bn->grad.rows(), bn->grad.cols()).noalias() +=
          cmap(an->value).transpose() * d;
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols())
    throw std::invalid_argument("matmul_nt: inner dims " + av.shape_str() + " x " + bv.shape_str());
  Tensor out({av.rows(), bv.rows()});
  map(out).noalias() = cmap(av) * cmap(bv).transpose();
  return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](detail::Node& n) {
    ECMap d(n.grad.data(), n.grad.rows(), n.grad.cols());
    if (an->requires_grad) {
      if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
      EMap(an->grad.data(), an->grad.rows(), an->grad.cols()).noalias() += d * cmap(bn->value);
    }
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad = Tensor::zeros(bn->value.shape());
      EMap(bn->grad.data(), bn->grad.rows(), bn->grad.cols()).noalias() +=
          d.transpose() * cmap(an->value);
    }
  });
}

Var add_rowvec(const Var& x, const Var& v) {
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  if (vv.numel() != xv.cols())
    throw std::invalid_argument("add_rowvec: vector length must equal cols");
  Tensor out = xv;
  const std::int64_t r = xv.rows(), c = xv.cols();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] += vv[j];
  return make_op(std::move(out), {x, v}, [xn = x.node(), vn = v.node()](detail::Node& n) {
    if (xn->requires_grad) xn->accum_grad(n.grad);
    if (vn->requires_grad) {
      if (vn->grad.empty()) vn->grad = Tensor::zeros(vn->value.shape());
      const std::int64_t r = n.grad.rows(), c = n.grad.cols();
      double* g = vn->grad.data();
      const double* d = n.grad.data();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) g[j] += d[i * c + j];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions / shape
// ---------------------------------------------------------------------------

Var sum_all(const Var& a) {
  double s = 0;
  const double* p = a.value().data();
  for (std::int64_t i = 0; i < a.value().numel(); ++i) s += p[i];
  return make_op(Tensor::scalar(s), {a}, [an = a.node()](detail::Node& n) {
    if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
    const double d = n.grad[0];
    double* g = an->grad.data();
    for (std::int64_t i = 0; i < an->grad.numel(); ++i) g[i] += d;
  });
}

Var mean_all(const Var& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.value().numel()));
}

Var row_sum(const Var& a) {
  const Tensor& av = a.value();
  const std::int64_t r = av.rows(), c = av.cols();
  Tensor out({r, 1});
  for (std::int64_t i = 0; i < r; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < c; ++j) s += av[i * c + j];
    out[i] = s;
  }
  return make_op(std::move(out), {a}, [an = a.node(), c](detail::Node& n) {
    if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
    const std::int64_t r = n.grad.numel();
    double* g = an->grad.data();
    const double* d = n.grad.data();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) g[i * c + j] += d[i];
  });
}

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [an = a.node()](detail::Node& n) {
    an->accum_grad_raw(n.grad.data(), n.grad.numel());
  });
}

Var concat_rows(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) throw std::invalid_argument("concat_rows: cols differ");
  Tensor out({av.rows() + bv.rows(), av.cols()});
  std::copy(av.data(), av.data() + av.numel(), out.data());
  std::copy(bv.data(), bv.data() + bv.numel(), out.data() + av.numel());
  const std::int64_t na = av.numel();
  return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node(), na](detail::Node& n) {
    if (an->requires_grad) an->accum_grad_raw(n.grad.data(), na);
    if (bn->requires_grad) bn->accum_grad_raw(n.grad.data() + na, n.grad.numel() - na);
  });
}

Var concat_cols(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols: rows differ");
  const std::int64_t r = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out({r, ca + cb});
  for (std::int64_t i = 0; i < r; ++i) {
    std::copy(av.data() + i * ca, av.data() + (i + 1) * ca, out.data() + i * (ca + cb));
    std::copy(bv.data() + i * cb, bv.data() + (i + 1) * cb, out.data() + i * (ca + cb) + ca);
  }
  return make_op(std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), r, ca, cb](detail::Node& n) {
    const double* d = n.grad.data();
    if (an->requires_grad) {
      if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
      double* g = an->grad.data();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < ca; ++j) g[i * ca + j] += d[i * (ca + cb) + j];
    }
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad = Tensor::zeros(bn->value.shape());
      double* g = bn->grad.data();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < cb; ++j) g[i * cb + j] += d[i * (ca + cb) + ca + j];
    }
  });
}

Var slice_rows(const Var& a, std::int64_t r0, std::int64_t r1) {
  const Tensor& av = a.value();
  const std::int64_t c = av.cols();
  assert(r0 >= 0 && r1 <= av.rows() && r0 < r1);
  Tensor out({r1 - r0, c});
  std::copy(av.data() + r0 * c, av.data() + r1 * c, out.data());
  return make_op(std::move(out), {a}, [an = a.node(), r0, c](detail::Node& n) {
    if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
    double* g = an->grad.data() + r0 * c;
    const double* d = n.grad.data();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += d[i];
  });
}

Var inner_const(const Var& x, const Tensor& w) {
  if (x.value().numel() != w.numel())
    throw std::invalid_argument("inner_const: size mismatch");
  double s = 0;
  const double* px = x.value().data();
  const double* pw = w.data();
  for (std::int64_t i = 0; i < w.numel(); ++i) s += px[i] * pw[i];
  return make_op(Tensor::scalar(s), {x}, [xn = x.node(), w](detail::Node& n) {
    if (xn->grad.empty()) xn->grad = Tensor::zeros(xn->value.shape());
    const double d = n.grad[0];
    double* g = xn->grad.data();
    const double* pw = w.data();
    for (std::int64_t i = 0; i < w.numel(); ++i) g[i] += d * pw[i];
  });
}

// ---------------------------------------------------------------------------
// row distributions / vectors
// ---------------------------------------------------------------------------

Var softmax_rows(const Var& a) {
  const Tensor& av = a.value();
  const std::int64_t r = av.rows(), c = av.cols();
  Tensor out = av;
  for (std::int64_t i = 0; i < r; ++i) {
    double* row = out.data() + i * c;
    double m = row[0];
    for (std::int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      s += row[j];
    }
    for (std::int64_t j = 0; j < c; ++j) row[j] /= s;
  }
  return make_op(std::move(out), {a}, [an = a.node(), r, c](detail::Node& n) {
    if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
    for (std::int64_t i = 0; i < r; ++i) {
      const double* y = n.value.data() + i * c;
      const double* d = n.grad.data() + i * c;
      double* g = an->grad.data() + i * c;
      double dot = 0;
      for (std::int64_t j = 0; j < c; ++j) dot += y[j] * d[j];
      for (std::int64_t j = 0; j < c; ++j) g[j] += y[j] * (d[j] - dot);
    }
  });
}

Var row_normalize(const Var& a, double eps) {
  const Tensor& av = a.value();
  const std::int64_t r = av.rows(), c = av.cols();
  Tensor out = av;
  Tensor norms({r, 1});
  for (std::int64_t i = 0; i < r; ++i) {
    double s = 0;
    const double* x = av.data() + i * c;
    for (std::int64_t j = 0; j < c; ++j) s += x[j] * x[j];
    double nrm = std::sqrt(s) + eps;
    norms[i] = nrm;
    double* y = out.data() + i * c;
    for (std::int64_t j = 0; j < c; ++j) y[j] = x[j] / nrm;
  }
  return make_op(std::move(out), {a}, [an = a.node(), norms, r, c](detail::Node& n) {
    if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
    for (std::int64_t i = 0; i < r; ++i) {
      const double* y = n.value.data() + i * c;
      const double* d = n.grad.data() + i * c;
      double* g = an->grad.data() + i * c;
      double dot = 0;
      for (std::int64_t j = 0; j < c; ++j) dot += y[j] * d[j];
      for (std::int64_t j = 0; j < c; ++j) g[j] += (d[j] - y[j] * dot) / norms[i];
    }
  });
}

Var layernorm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const std::int64_t r = xv.rows(), c = xv.cols();
  if (gain.value().numel() != c || bias.value().numel() != c)
    throw std::invalid_argument("layernorm_rows: gain/bias length must equal cols");
  Tensor out({r, c});
  Tensor xhat({r, c});
  Tensor inv_std({r, 1});
  for (std::int64_t i = 0; i < r; ++i) {
    const double* px = xv.data() + i * c;
    double mu = 0;
    for (std::int64_t j = 0; j < c; ++j) mu += px[j];
    mu /= static_cast<double>(c);
    double var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (px[j] - mu) * (px[j] - mu);
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::int64_t j = 0; j < c; ++j) {
      double h = (px[j] - mu) * is;
      xhat[i * c + j] = h;
      out[i * c + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  return make_op(std::move(out), {x, gain, bias},
                 [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat, inv_std, r,
                  c](detail::Node& n) {
    const double* d = n.grad.data();
    if (gn->requires_grad) {
      if (gn->grad.empty()) gn->grad = Tensor::zeros(gn->value.shape());
      double* g = gn->grad.data();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) g[j] += d[i * c + j] * xhat[i * c + j];
    }
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad = Tensor::zeros(bn->value.shape());
      double* g = bn->grad.data();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) g[j] += d[i * c + j];
    }
    if (xn->requires_grad) {
      if (xn->grad.empty()) xn->grad = Tensor::zeros(xn->value.shape());
      const double* gv = gn->value.data();
      for (std::int64_t i = 0; i < r; ++i) {
        const double* drow = d + i * c;
        const double* h = xhat.data() + i * c;
        double* g = xn->grad.data() + i * c;
        double sum_dh = 0, sum_dh_h = 0;
        for (std::int64_t j = 0; j < c; ++j) {
          double dh = drow[j] * gv[j];
          sum_dh += dh;
          sum_dh_h += dh * h[j];
        }
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::int64_t j = 0; j < c; ++j) {
          double dh = drow[j] * gv[j];
          g[j] += inv_std[i] * (dh - inv_c * sum_dh - h[j] * inv_c * sum_dh_h);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// ray quadrature
// ---------------------------------------------------------------------------

Var exclusive_cumsum_rows(const Var& a) {
  const Tensor& av = a.value();
  const std::int64_t r = av.rows(), c = av.cols();
  Tensor out({r, c});
  for (std::int64_t i = 0; i < r; ++i) {
    double acc = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      out[i * c + j] = acc;
      acc += av[i * c + j];
    }
  }
  return make_op(std::move(out), {a}, [an = a.node(), r, c](detail::Node& n) {
    if (an->grad.empty()) an->grad = Tensor::zeros(an->value.shape());
    for (std::int64_t i = 0; i < r; ++i) {
      const double* d = n.grad.data() + i * c;
      double* g = an->grad.data() + i * c;
      double acc = 0;
      for (std::int64_t j = c - 1; j >= 0; --j) {
        g[j] += acc;
        acc += d[j];
      }
    }
  });
}

Var composite_rows(const Var& w, const Var& x) {
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  const std::int64_t r = wv.rows(), k = wv.cols(), c = xv.cols();
  if (xv.rows() != r * k) throw std::invalid_argument("composite_rows: x rows != R*K");
  Tensor out({r, c});
  for (std::int64_t i = 0; i < r; ++i) {
    double* o = out.data() + i * c;
    for (std::int64_t s = 0; s < k; ++s) {
      const double ws = wv[i * k + s];
      const double* xs = xv.data() + (i * k + s) * c;
      for (std::int64_t j = 0; j < c; ++j) o[j] += ws * xs[j];
    }
  }
  return make_op(std::move(out), {w, x},
                 [wn = w.node(), xn = x.node(), r, k, c](detail::Node& n) {
    const double* d = n.grad.data();
    if (wn->requires_grad) {
      if (wn->grad.empty()) wn->grad = Tensor::zeros(wn->value.shape());
      double* gw = wn->grad.data();
      const double* xv = xn->value.data();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t s = 0; s < k; ++s) {
          const double* xs = xv + (i * k + s) * c;
          const double* drow = d + i * c;
          double acc = 0;
          for (std::int64_t j = 0; j < c; ++j) acc += drow[j] * xs[j];
          gw[i * k + s] += acc;
        }
    }
    if (xn->requires_grad) {
      if (xn->grad.empty()) xn->grad = Tensor::zeros(xn->value.shape());
      double* gx = xn->grad.data();
      const double* wv = wn->value.data();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t s = 0; s < k; ++s) {
          const double ws = wv[i * k + s];
          const double* drow = d + i * c;
          double* gxs = gx + (i * k + s) * c;
          for (std::int64_t j = 0; j < c; ++j) gxs[j] += ws * drow[j];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// image ops
// ---------------------------------------------------------------------------

static void im2col(const double* x, int h, int w, int cin, int k, int stride, int pad,
                   int ho, int wo, double* col) {
  // col: (ho*wo) x (k*k*cin), patch layout (ky, kx, cin)
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      double* crow = col + (static_cast<std::int64_t>(oy) * wo + ox) * k * k * cin;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          int iy = oy * stride + ky - pad;
          int ix = ox * stride + kx - pad;
          double* dst = crow + (ky * k + kx) * cin;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
            std::fill(dst, dst + cin, 0.0);
          } else {
            const double* src = x + (static_cast<std::int64_t>(iy) * w + ix) * cin;
            std::copy(src, src + cin, dst);
          }
        }
    }
}

Var conv2d(const Var& x, const Var& kernel, const Var& bias, int h, int w, int k,
           int stride, int pad) {
  const Tensor& xv = x.value();
  const int cin = static_cast<int>(xv.cols());
  if (xv.rows() != static_cast<std::int64_t>(h) * w)
    throw std::invalid_argument("conv2d: x rows != h*w");
  const Tensor& kv = kernel.value();
  const int cout = static_cast<int>(kv.rows());
  if (kv.cols() != static_cast<std::int64_t>(k) * k * cin)
    throw std::invalid_argument("conv2d: kernel cols != k*k*cin");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;

  Tensor col({static_cast<std::int64_t>(ho) * wo, static_cast<std::int64_t>(k) * k * cin});
  im2col(xv.data(), h, w, cin, k, stride, pad, ho, wo, col.data());
  Tensor out({static_cast<std::int64_t>(ho) * wo, cout});
  map(out).noalias() = cmap(col) * cmap(kv).transpose();
  const double* bv = bias.value().data();
  for (std::int64_t i = 0; i < out.rows(); ++i)
    for (int j = 0; j < cout; ++j) out[i * cout + j] += bv[j];

  return make_op(std::move(out), {x, kernel, bias},
                 [xn = x.node(), kn = kernel.node(), bn = bias.node(), h, w, cin, k,
                  stride, pad, ho, wo, cout](detail::Node& n) {
    ECMap d(n.grad.data(), n.grad.rows(), n.grad.cols());
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad = Tensor::zeros(bn->value.shape());
      double* g = bn->grad.data();
      const double* dp = n.grad.data();
      for (std::int64_t i = 0; i < n.grad.rows(); ++i)
        for (int j = 0; j < cout; ++j) g[j] += dp[i * cout + j];
    }
    // im2col is recomputed rather than stored: it is 9x the input and cheap
    // next to the GEMMs.
    Tensor col({static_cast<std::int64_t>(ho) * wo, static_cast<std::int64_t>(k) * k * cin});
    if (kn->requires_grad || xn->requires_grad)
      im2col(xn->value.data(), h, w, cin, k, stride, pad, ho, wo, col.data());
    if (kn->requires_grad) {
      if (kn->grad.empty()) kn->grad = Tensor::zeros(kn->value.shape());
      EMap(kn->grad.data(), kn->grad.rows(), kn->grad.cols()).noalias() +=
          d.transpose() * cmap(col);
    }
    if (xn->requires_grad) {
      if (xn->grad.empty()) xn->grad = Tensor::zeros(xn->value.shape());
      Tensor dcol({col.rows(), col.cols()});
      map(dcol).noalias() = d * cmap(kn->value);
      double* gx = xn->grad.data();
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const double* crow = dcol.data() + (static_cast<std::int64_t>(oy) * wo + ox) * k * k * cin;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              int iy = oy * stride + ky - pad;
              int ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              double* dst = gx + (static_cast<std::int64_t>(iy) * w + ix) * cin;
              const double* src = crow + (ky * k + kx) * cin;
              for (int cc = 0; cc < cin; ++cc) dst[cc] += src[cc];
            }
        }
    }
  });
}

Var upsample_nearest2(const Var& x, int h, int w) {
  const Tensor& xv = x.value();
  const int c = static_cast<int>(xv.cols());
  Tensor out({static_cast<std::int64_t>(2 * h) * (2 * w), c});
  for (int y = 0; y < 2 * h; ++y)
    for (int xx = 0; xx < 2 * w; ++xx) {
      const double* src = xv.data() + (static_cast<std::int64_t>(y / 2) * w + xx / 2) * c;
      double* dst = out.data() + (static_cast<std::int64_t>(y) * 2 * w + xx) * c;
      std::copy(src, src + c, dst);
    }
  return make_op(std::move(out), {x}, [xn = x.node(), h, w, c](detail::Node& n) {
    if (xn->grad.empty()) xn->grad = Tensor::zeros(xn->value.shape());
    double* g = xn->grad.data();
    const double* d = n.grad.data();
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) {
        double* dst = g + (static_cast<std::int64_t>(y / 2) * w + xx / 2) * c;
        const double* src = d + (static_cast<std::int64_t>(y) * 2 * w + xx) * c;
        for (int cc = 0; cc < c; ++cc) dst[cc] += src[cc];
      }
  });
}

Var avg_downsample(const Var& x, int h, int w, int factor) {
  const Tensor& xv = x.value();
  const int c = static_cast<int>(xv.cols());
  if (h % factor != 0 || w % factor != 0)
    throw std::invalid_argument("avg_downsample: factor must divide dims");
  const int ho = h / factor, wo = w / factor;
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  Tensor out({static_cast<std::int64_t>(ho) * wo, c});
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      double* dst = out.data() + (static_cast<std::int64_t>(oy) * wo + ox) * c;
      for (int fy = 0; fy < factor; ++fy)
        for (int fx = 0; fx < factor; ++fx) {
          const double* src =
              xv.data() +
              (static_cast<std::int64_t>(oy * factor + fy) * w + ox * factor + fx) * c;
          for (int cc = 0; cc < c; ++cc) dst[cc] += src[cc] * inv;
        }
    }
  return make_op(std::move(out), {x}, [xn = x.node(), h, w, c, factor, ho, wo,
                                       inv](detail::Node& n) {
    if (xn->grad.empty()) xn->grad = Tensor::zeros(xn->value.shape());
    double* g = xn->grad.data();
    const double* d = n.grad.data();
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const double* src = d + (static_cast<std::int64_t>(oy) * wo + ox) * c;
        for (int fy = 0; fy < factor; ++fy)
          for (int fx = 0; fx < factor; ++fx) {
            double* dst =
                g + (static_cast<std::int64_t>(oy * factor + fy) * w + ox * factor + fx) * c;
            for (int cc = 0; cc < c; ++cc) dst[cc] += src[cc] * inv;
          }
      }
  });
}

Var mse(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

double finite_diff_check(const std::function<double()>& f, double* param,
                         double analytic_grad, double step) {
  const double saved = *param;
  *param = saved + step;
  const double fp = f();
  *param = saved - step;
  const double fm = f();
  *param = saved;
  const double fd = (fp - fm) / (2.0 * step);
  const double denom = std::max({std::abs(fd), std::abs(analytic_grad), 1e-12});
  return std::abs(fd - analytic_grad) / denom;
}

}  // namespace refgen::ad
