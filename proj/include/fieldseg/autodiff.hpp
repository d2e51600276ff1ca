#pragma once

// Reverse-mode automatic differentiation on dense double tensors.
//
// A Var is a handle to a graph node; ops build nodes eagerly and record a
// backward closure. backward() runs the closures in reverse topological
// order, accumulating into Node::grad so fan-out sums naturally. Gradients
// are exact up to floating point; unit tests cross-check every op against
// central finite differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fieldseg/tensor.hpp"

namespace fieldseg::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool grad_ready = false;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (!grad_ready) {
      grad = Tensor::zeros(value.shape());
      grad_ready = true;
    }
  }
};

using NodePtr = std::shared_ptr<Node>;

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_enabled_flag(); }

// Disables graph construction for its lifetime (inference / finite differences).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev; }
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  // Gradient accumulated by the last backward(); zeros if never reached.
  Tensor grad() const {
    if (node_->grad_ready) return node_->grad;
    return Tensor::zeros(node_->value.shape());
  }
  void zero_grad() const {
    node_->grad_ready = false;
    node_->grad = Tensor();
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

inline Var make_op(const char* op, Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool need = false;
  if (grad_enabled()) {
    for (const Var& p : parents)
      if (p.requires_grad()) need = true;
  }
  if (need) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const Var& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

// Runs reverse accumulation from a scalar root.
inline void backward(const Var& root) {
  if (root.value().numel() != 1)
    throw ShapeError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS for topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad_ready) n->backward(*n);
  }
}

namespace detail {
inline void accum(const NodePtr& p, const Tensor& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  double* dst = p->grad.data();
  const double* src = g.data();
  std::int64_t n = g.numel();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}
}  // namespace detail

// ---- elementwise binary ----

inline Var add(const Var& a, const Var& b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return make_op("add", std::move(out), {a, b}, [pa = a.node(), pb = b.node()](Node& self) {
    detail::accum(pa, self.grad);
    detail::accum(pb, self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return make_op("sub", std::move(out), {a, b}, [pa = a.node(), pb = b.node()](Node& self) {
    detail::accum(pa, self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return make_op("mul", std::move(out), {a, b}, [pa = a.node(), pb = b.node()](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i)
        pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i)
        pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

inline Var mul_const(const Var& a, Tensor c) {
  require_same_shape("mul_const", a.value(), c);
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  return make_op("mul_const", std::move(out), {a},
                 [pa = a.node(), c = std::move(c)](Node& self) {
                   pa->ensure_grad();
                   for (std::int64_t i = 0; i < self.grad.numel(); ++i)
                     pa->grad[i] += self.grad[i] * c[i];
                 });
}

// k * a + c, elementwise with scalars.
inline Var affine(const Var& a, double k, double c) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = k * out[i] + c;
  return make_op("affine", std::move(out), {a}, [pa = a.node(), k](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += k * self.grad[i];
  });
}

inline Var scale(const Var& a, double k) { return affine(a, k, 0.0); }
inline Var add_scalar(const Var& a, double c) { return affine(a, 1.0, c); }
inline Var neg(const Var& a) { return affine(a, -1.0, 0.0); }

// Adds a [K] bias to every row of [..., K].
inline Var add_bias(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.ndim() != 1 || av.ndim() < 1 || av.dim(av.ndim() - 1) != bv.dim(0))
    throw ShapeError("add_bias: shapes " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  int k = bv.dim(0);
  std::int64_t rows = av.numel() / k;
  Tensor out = av;
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j) out[r * k + j] += bv[j];
  return make_op("add_bias", std::move(out), {a, b},
                 [pa = a.node(), pb = b.node(), rows, k](Node& self) {
                   detail::accum(pa, self.grad);
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (std::int64_t r = 0; r < rows; ++r)
                       for (int j = 0; j < k; ++j) pb->grad[j] += self.grad[r * k + j];
                   }
                 });
}

// ---- elementwise unary ----

inline Var exp(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  return make_op("exp", std::move(out), {a}, [pa = a.node()](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      pa->grad[i] += self.grad[i] * self.value[i];
  });
}

inline Var log(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return make_op("log", std::move(out), {a}, [pa = a.node()](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      pa->grad[i] += self.grad[i] / pa->value[i];
  });
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return make_op("relu", std::move(out), {a}, [pa = a.node()](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      if (pa->value[i] > 0.0) pa->grad[i] += self.grad[i];
  });
}

// log(1 + e^x), numerically stable; derivative is the logistic function.
inline Var softplus(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
  }
  return make_op("softplus", std::move(out), {a}, [pa = a.node()](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      double x = pa->value[i];
      double s = x > 30.0 ? 1.0 : (x < -30.0 ? std::exp(x) : 1.0 / (1.0 + std::exp(-x)));
      pa->grad[i] += self.grad[i] * s;
    }
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return make_op("sigmoid", std::move(out), {a}, [pa = a.node()](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      double s = self.value[i];
      pa->grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

inline Var abs(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::fabs(out[i]);
  return make_op("abs", std::move(out), {a}, [pa = a.node()](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      double x = pa->value[i];
      pa->grad[i] += self.grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
    }
  });
}

// Clamp to [lo, hi]; the gradient passes through on the closed interval so a
// value sitting exactly on a bound still trains back toward the interior.
inline Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
  return make_op("clamp", std::move(out), {a}, [pa = a.node(), lo, hi](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      double x = pa->value[i];
      if (x >= lo && x <= hi) pa->grad[i] += self.grad[i];
    }
  });
}

inline Var clamp_min(const Var& a, double lo) {
  return clamp(a, lo, std::numeric_limits<double>::infinity());
}

inline Var stop_gradient(const Var& a) { return Var::constant(a.value()); }

// Same data, new shape; row-major order means only metadata changes.
inline Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a.value().numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out(shape, a.value().raw());
  return make_op("reshape", std::move(out), {a}, [pa = a.node()](Node& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
  });
}

// ---- linear algebra ----

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: shapes " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = av.data() + static_cast<std::size_t>(i) * k;
    double* orow = out.data() + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double aip = arow[p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_op("matmul", std::move(out), {a, b},
                 [pa = a.node(), pb = b.node(), m, k, n](Node& self) {
                   const double* g = self.grad.data();
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     const double* bvp = pb->value.data();
                     for (int i = 0; i < m; ++i)
                       for (int p = 0; p < k; ++p) {
                         double s = 0.0;
                         const double* grow = g + static_cast<std::size_t>(i) * n;
                         const double* brow = bvp + static_cast<std::size_t>(p) * n;
                         for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                         pa->grad[static_cast<std::size_t>(i) * k + p] += s;
                       }
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     const double* avp = pa->value.data();
                     for (int i = 0; i < m; ++i) {
                       const double* grow = g + static_cast<std::size_t>(i) * n;
                       for (int p = 0; p < k; ++p) {
                         double aip = avp[static_cast<std::size_t>(i) * k + p];
                         if (aip == 0.0) continue;
                         double* brow = pb->grad.data() + static_cast<std::size_t>(p) * n;
                         for (int j = 0; j < n; ++j) brow[j] += aip * grow[j];
                       }
                     }
                   }
                 });
}

inline Var concat_last(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(0) != bv.dim(0))
    throw ShapeError("concat_last: shapes " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  int n = av.dim(0), ka = av.dim(1), kb = bv.dim(1);
  Tensor out({n, ka + kb});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < ka; ++j) out.at(i, j) = av.at(i, j);
    for (int j = 0; j < kb; ++j) out.at(i, ka + j) = bv.at(i, j);
  }
  return make_op("concat_last", std::move(out), {a, b},
                 [pa = a.node(), pb = b.node(), n, ka, kb](Node& self) {
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < ka; ++j)
                         pa->grad.at(i, j) += self.grad.at(i, j);
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < kb; ++j)
                         pb->grad.at(i, j) += self.grad.at(i, ka + j);
                   }
                 });
}

// ---- reductions and softmax ----

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
  return make_op("sum_all", Tensor::scalar(s), {a}, [pa = a.node()](Node& self) {
    pa->ensure_grad();
    double g = self.grad[0];
    for (std::int64_t i = 0; i < pa->grad.numel(); ++i) pa->grad[i] += g;
  });
}

inline Var mean_all(const Var& a) {
  std::int64_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean_all: empty tensor");
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a.value()[i];
  return make_op("mean_all", Tensor::scalar(s / static_cast<double>(n)), {a},
                 [pa = a.node(), n](Node& self) {
                   pa->ensure_grad();
                   double g = self.grad[0] / static_cast<double>(n);
                   for (std::int64_t i = 0; i < n; ++i) pa->grad[i] += g;
                 });
}

// Sum over the trailing axis: [..., K] -> [...].
inline Var sum_last(const Var& a) {
  const Tensor& av = a.value();
  if (av.ndim() < 1) throw ShapeError("sum_last: needs at least one axis");
  int k = av.dim(av.ndim() - 1);
  Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  std::int64_t rows = av.numel() / k;
  Tensor out(out_shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += av[r * k + j];
    out[r] = s;
  }
  return make_op("sum_last", std::move(out), {a}, [pa = a.node(), rows, k](Node& self) {
    pa->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < k; ++j) pa->grad[r * k + j] += self.grad[r];
  });
}

// Softmax along the trailing axis with max-shift stabilization.
inline Var softmax_last(const Var& a) {
  const Tensor& av = a.value();
  if (av.ndim() < 1) throw ShapeError("softmax_last: needs at least one axis");
  int k = av.dim(av.ndim() - 1);
  std::int64_t rows = av.numel() / k;
  Tensor out = av;
  for (std::int64_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (int j = 0; j < k; ++j) row[j] /= s;
  }
  return make_op("softmax_last", std::move(out), {a}, [pa = a.node(), rows, k](Node& self) {
    pa->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* p = self.value.data() + r * k;
      const double* g = self.grad.data() + r * k;
      double dot = 0.0;
      for (int j = 0; j < k; ++j) dot += p[j] * g[j];
      double* out = pa->grad.data() + r * k;
      for (int j = 0; j < k; ++j) out[j] += p[j] * (g[j] - dot);
    }
  });
}

// Picks x[r, idx[r]] from the trailing axis: [N, C] -> [N].
inline Var gather_last(const Var& a, std::vector<int> idx) {
  const Tensor& av = a.value();
  if (av.ndim() != 2 || static_cast<std::int64_t>(idx.size()) != av.dim(0))
    throw ShapeError("gather_last: shape " + shape_str(av.shape()) + " with " +
                     std::to_string(idx.size()) + " indices");
  int n = av.dim(0), c = av.dim(1);
  Tensor out({n});
  for (int r = 0; r < n; ++r) {
    int j = idx[static_cast<std::size_t>(r)];
    if (j < 0 || j >= c)
      throw ShapeError("gather_last: index " + std::to_string(j) + " out of range [0," +
                       std::to_string(c) + ")");
    out[r] = av.at(r, j);
  }
  return make_op("gather_last", std::move(out), {a},
                 [pa = a.node(), idx = std::move(idx), c](Node& self) {
                   pa->ensure_grad();
                   for (std::int64_t r = 0; r < self.grad.numel(); ++r)
                     pa->grad[r * c + idx[static_cast<std::size_t>(r)]] += self.grad[r];
                 });
}

// ---- volume rendering primitives ----

// Alpha compositing along each ray. For densities sigma [R, M] and fixed
// sample gaps delta [R, M]:
//   alpha_i = 1 - exp(-sigma_i * delta_i)
//   T_i     = prod_{j < i} (1 - alpha_j)
//   w_i     = T_i * alpha_i
// The backward pass uses the closed form
//   dL/dsigma_i = delta_i * (g_i * T_{i+1} - sum_{j > i} g_j * w_j)
// evaluated with a right-to-left suffix sum, which stays finite even when a
// sample saturates (alpha -> 1).
inline Var composite_weights(const Var& sigma, Tensor delta) {
  const Tensor& sv = sigma.value();
  if (sv.ndim() != 2) throw ShapeError("composite_weights: sigma shape " + shape_str(sv.shape()));
  require_same_shape("composite_weights", sv, delta);
  int rays = sv.dim(0), m = sv.dim(1);
  Tensor w({rays, m});
  // Transmittance after absorbing sample i, saved for the backward pass.
  Tensor t_post({rays, m});
  for (int r = 0; r < rays; ++r) {
    double t = 1.0;
    for (int i = 0; i < m; ++i) {
      double a = 1.0 - std::exp(-sv.at(r, i) * delta.at(r, i));
      w.at(r, i) = t * a;
      t *= (1.0 - a);
      t_post.at(r, i) = t;
    }
  }
  return make_op("composite_weights", std::move(w), {sigma},
                 [pa = sigma.node(), delta = std::move(delta), t_post = std::move(t_post), rays,
                  m](Node& self) {
                   pa->ensure_grad();
                   for (int r = 0; r < rays; ++r) {
                     double suffix = 0.0;
                     for (int i = m - 1; i >= 0; --i) {
                       double g = self.grad.at(r, i);
                       pa->grad.at(r, i) += delta.at(r, i) * (g * t_post.at(r, i) - suffix);
                       suffix += g * self.value.at(r, i);
                     }
                   }
                 });
}

// sum_m w[r,m] * t[r,m] with constant t: [R, M] -> [R].
inline Var weighted_reduce(const Var& w, Tensor t) {
  require_same_shape("weighted_reduce", w.value(), t);
  int rays = w.value().dim(0), m = w.value().dim(1);
  Tensor out({rays});
  for (int r = 0; r < rays; ++r) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += w.value().at(r, i) * t.at(r, i);
    out[r] = s;
  }
  return make_op("weighted_reduce", std::move(out), {w},
                 [pw = w.node(), t = std::move(t), rays, m](Node& self) {
                   pw->ensure_grad();
                   for (int r = 0; r < rays; ++r)
                     for (int i = 0; i < m; ++i)
                       pw->grad.at(r, i) += self.grad[r] * t.at(r, i);
                 });
}

// sum_m w[r,m] * x[r,m,k]: ([R, M], [R, M, K]) -> [R, K].
inline Var weighted_sum(const Var& w, const Var& x) {
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  if (wv.ndim() != 2 || xv.ndim() != 3 || wv.dim(0) != xv.dim(0) || wv.dim(1) != xv.dim(1))
    throw ShapeError("weighted_sum: shapes " + shape_str(wv.shape()) + " vs " +
                     shape_str(xv.shape()));
  int rays = wv.dim(0), m = wv.dim(1), k = xv.dim(2);
  Tensor out({rays, k});
  for (int r = 0; r < rays; ++r)
    for (int i = 0; i < m; ++i) {
      double wi = wv.at(r, i);
      for (int j = 0; j < k; ++j) out.at(r, j) += wi * xv.at(r, i, j);
    }
  return make_op("weighted_sum", std::move(out), {w, x},
                 [pw = w.node(), px = x.node(), rays, m, k](Node& self) {
                   if (pw->requires_grad) {
                     pw->ensure_grad();
                     for (int r = 0; r < rays; ++r)
                       for (int i = 0; i < m; ++i) {
                         double s = 0.0;
                         for (int j = 0; j < k; ++j)
                           s += self.grad.at(r, j) * px->value.at(r, i, j);
                         pw->grad.at(r, i) += s;
                       }
                   }
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (int r = 0; r < rays; ++r)
                       for (int i = 0; i < m; ++i) {
                         double wi = pw->value.at(r, i);
                         for (int j = 0; j < k; ++j)
                           px->grad.at(r, i, j) += wi * self.grad.at(r, j);
                       }
                   }
                 });
}

// Row-wise L1 normalization for nonnegative rows. Rows whose mass falls
// below eps become the uniform distribution and pass no gradient; other rows
// divide by their mass.
inline Var l1_normalize_rows(const Var& x, double eps) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 2) throw ShapeError("l1_normalize_rows: shape " + shape_str(xv.shape()));
  int n = xv.dim(0), c = xv.dim(1);
  Tensor out({n, c});
  Tensor mass({n});
  for (int r = 0; r < n; ++r) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += xv.at(r, j);
    mass[r] = s;
    if (s < eps) {
      for (int j = 0; j < c; ++j) out.at(r, j) = 1.0 / c;
    } else {
      for (int j = 0; j < c; ++j) out.at(r, j) = xv.at(r, j) / s;
    }
  }
  return make_op("l1_normalize_rows", std::move(out), {x},
                 [px = x.node(), mass = std::move(mass), n, c, eps](Node& self) {
                   px->ensure_grad();
                   for (int r = 0; r < n; ++r) {
                     double s = mass[r];
                     if (s < eps) continue;
                     double dot = 0.0;
                     for (int j = 0; j < c; ++j) dot += self.grad.at(r, j) * self.value.at(r, j);
                     for (int j = 0; j < c; ++j)
                       px->grad.at(r, j) += (self.grad.at(r, j) - dot) / s;
                   }
                 });
}

// ---- batch normalization ----

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

// Training-mode batch norm over [N, F] rows. Normalizes with biased batch
// statistics and folds them into the running stats in place:
//   running = momentum * running + (1 - momentum) * batch.
inline Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta,
                           BatchNormStats& stats, double momentum, double eps = 1e-5) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 2) throw ShapeError("batchnorm_train: shape " + shape_str(xv.shape()));
  int n = xv.dim(0), f = xv.dim(1);
  if (gamma.value().shape() != Shape{f} || beta.value().shape() != Shape{f})
    throw ShapeError("batchnorm_train: affine params must be [" + std::to_string(f) + "]");
  if (n < 1) throw ShapeError("batchnorm_train: empty batch");

  Tensor mean({f}), var({f });
  for (int j = 0; j < f; ++j) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += xv.at(i, j);
    mean[j] = s / n;
  }
  for (int j = 0; j < f; ++j) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      double d = xv.at(i, j) - mean[j];
      s += d * d;
    }
    var[j] = s / n;
  }
  for (int j = 0; j < f; ++j) {
    stats.running_mean[j] = momentum * stats.running_mean[j] + (1.0 - momentum) * mean[j];
    stats.running_var[j] = momentum * stats.running_var[j] + (1.0 - momentum) * var[j];
  }

  Tensor xhat({n, f}), out({n, f});
  for (int j = 0; j < f; ++j) {
    double inv = 1.0 / std::sqrt(var[j] + eps);
    for (int i = 0; i < n; ++i) {
      double h = (xv.at(i, j) - mean[j]) * inv;
      xhat.at(i, j) = h;
      out.at(i, j) = gamma.value()[j] * h + beta.value()[j];
    }
  }
  return make_op(
      "batchnorm_train", std::move(out), {x, gamma, beta},
      [px = x.node(), pg = gamma.node(), pb = beta.node(), xhat = std::move(xhat),
       var = std::move(var), n, f, eps](Node& self) {
        for (int j = 0; j < f; ++j) {
          double sum_g = 0.0, sum_gh = 0.0;
          for (int i = 0; i < n; ++i) {
            sum_g += self.grad.at(i, j);
            sum_gh += self.grad.at(i, j) * xhat.at(i, j);
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            pb->grad[j] += sum_g;
          }
          if (pg->requires_grad) {
            pg->ensure_grad();
            pg->grad[j] += sum_gh;
          }
          if (px->requires_grad) {
            px->ensure_grad();
            double inv = 1.0 / std::sqrt(var[j] + eps);
            double gj = pg->value[j];
            for (int i = 0; i < n; ++i) {
              double gy = self.grad.at(i, j);
              px->grad.at(i, j) +=
                  gj * inv * (gy - sum_g / n - xhat.at(i, j) * sum_gh / n);
            }
          }
        }
      });
}

// Inference-mode batch norm using frozen running statistics.
inline Var batchnorm_eval(const Var& x, const Var& gamma, const Var& beta,
                          const BatchNormStats& stats, double eps = 1e-5) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 2) throw ShapeError("batchnorm_eval: shape " + shape_str(xv.shape()));
  int n = xv.dim(0), f = xv.dim(1);
  Tensor out({n, f}), xhat({n, f});
  for (int j = 0; j < f; ++j) {
    double inv = 1.0 / std::sqrt(stats.running_var[j] + eps);
    for (int i = 0; i < n; ++i) {
      double h = (xv.at(i, j) - stats.running_mean[j]) * inv;
      xhat.at(i, j) = h;
      out.at(i, j) = gamma.value()[j] * h + beta.value()[j];
    }
  }
  Tensor inv_std({f});
  for (int j = 0; j < f; ++j) inv_std[j] = 1.0 / std::sqrt(stats.running_var[j] + eps);
  return make_op("batchnorm_eval", std::move(out), {x, gamma, beta},
                 [px = x.node(), pg = gamma.node(), pb = beta.node(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), n, f](Node& self) {
                   for (int j = 0; j < f; ++j) {
                     double sum_g = 0.0, sum_gh = 0.0;
                     for (int i = 0; i < n; ++i) {
                       sum_g += self.grad.at(i, j);
                       sum_gh += self.grad.at(i, j) * xhat.at(i, j);
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       pb->grad[j] += sum_g;
                     }
                     if (pg->requires_grad) {
                       pg->ensure_grad();
                       pg->grad[j] += sum_gh;
                     }
                     if (px->requires_grad) {
                       px->ensure_grad();
                       double k = pg->value[j] * inv_std[j];
                       for (int i = 0; i < n; ++i) px->grad.at(i, j) += k * self.grad.at(i, j);
                     }
                   }
                 });
}

// ---- classification loss ----

// Mean softmax cross-entropy over rows whose target is not ignore_id.
// Returns 0 with zero gradient when every row is ignored.
inline Var cross_entropy_softmax(const Var& logits, std::vector<int> targets, int ignore_id) {
  const Tensor& zv = logits.value();
  if (zv.ndim() != 2 || static_cast<std::int64_t>(targets.size()) != zv.dim(0))
    throw ShapeError("cross_entropy_softmax: logits " + shape_str(zv.shape()) + " with " +
                     std::to_string(targets.size()) + " targets");
  int n = zv.dim(0), c = zv.dim(1);
  Tensor prob({n, c});
  double loss = 0.0;
  int valid = 0;
  for (int r = 0; r < n; ++r) {
    double mx = zv.at(r, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, zv.at(r, j));
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      prob.at(r, j) = std::exp(zv.at(r, j) - mx);
      s += prob.at(r, j);
    }
    for (int j = 0; j < c; ++j) prob.at(r, j) /= s;
    int t = targets[static_cast<std::size_t>(r)];
    if (t == ignore_id) continue;
    if (t < 0 || t >= c)
      throw ShapeError("cross_entropy_softmax: target " + std::to_string(t) + " out of range");
    loss += std::log(s) + mx - zv.at(r, t);
    ++valid;
  }
  double out = valid > 0 ? loss / valid : 0.0;
  return make_op("cross_entropy_softmax", Tensor::scalar(out), {logits},
                 [pz = logits.node(), prob = std::move(prob), targets = std::move(targets),
                  ignore_id, n, c](Node& self) {
                   int valid = 0;
                   for (int t : targets)
                     if (t != ignore_id) ++valid;
                   if (valid == 0) return;
                   pz->ensure_grad();
                   double g = self.grad[0] / valid;
                   for (int r = 0; r < n; ++r) {
                     int t = targets[static_cast<std::size_t>(r)];
                     if (t == ignore_id) continue;
                     for (int j = 0; j < c; ++j)
                       pz->grad.at(r, j) += g * (prob.at(r, j) - (j == t ? 1.0 : 0.0));
                   }
                 });
}

}  // namespace fieldseg::ad
