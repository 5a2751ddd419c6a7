#pragma once

// Reverse-mode differentiation over Tensor values.
//
// A Var is a shared handle to a node of the computation graph. Leaves are
// created by the caller (parameters, inputs, constants); every op below
// returns a new node that remembers its parents and a backward closure only
// when at least one parent requires a gradient. Nodes that do not require a
// gradient never allocate a gradient buffer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "perp/errors.hpp"
#include "perp/kernels.hpp"
#include "perp/tensor.hpp"

namespace perp {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  /// Direct write access for leaves (optimizer updates, checkpoint loads).
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (node_->backward_fn) throw ContractError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
    if (!on) node_->grad = Tensor<T>();
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const {
    if (node_->grad.empty()) throw ContractError("tensor has no gradient");
    return node_->grad;
  }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  void clear_grad() { node_->grad = Tensor<T>(); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on a non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }
  bool same_node(const Var& other) const noexcept { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

/// While alive, ops record no graph (evaluation only).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }

 private:
  bool prev_;
};

namespace detail {

template <class T, class Fn>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, Fn&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  const bool any = NoGradGuard::enabled() &&
                   std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::forward<Fn>(backward);
  }
  return Var<T>(std::move(node));
}

template <class T>
Tensor<T>* grad_of(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

inline void require_rank2(const Shape& s, const char* what) {
  if (s.size() != 2) throw DimensionError(std::string(what) + ": expected a 2-D tensor, got " + shape_str(s));
}

}  // namespace detail

/// Fills the gradient of every tensor that requires one and is reachable from loss.
/// Consumes the graph: interior nodes drop their closures after use.
template <class T>
void backward(const Var<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor that requires grad");

  // Owning handles: clearing a node's parents below must not free nodes still queued.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      const auto& p = n->parents[next++];
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = it->get();
    if (!n->backward_fn) continue;
    if (!n->grad.empty()) n->backward_fn(*n);
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad = Tensor<T>();
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[n x k] * b[k x m].
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{n, m});
  kernels::gemm(n, k, m, a.value().data(), b.value().data(), out.data(), false);
  return detail::make_op<T>(std::move(out), {a, b}, [n, k, m](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (auto* da = detail::grad_of(self, 0)) {
      std::vector<T> bt(k * m);
      kernels::transpose(k, m, bv.data(), bt.data());
      kernels::gemm(n, m, k, g.data(), bt.data(), da->data(), true);
    }
    if (auto* db = detail::grad_of(self, 1)) {
      std::vector<T> at(n * k);
      kernels::transpose(n, k, av.data(), at.data());
      kernels::gemm(k, n, m, at.data(), g.data(), db->data(), true);
    }
  });
}

/// Row-batched linear map: x[N x m] times the transpose of w[n x m], giving [N x n].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  detail::require_rank2(x.shape(), "linear");
  detail::require_rank2(w.shape(), "linear");
  const std::size_t rows = x.shape()[0], m = x.shape()[1], n = w.shape()[0];
  if (w.shape()[1] != m) {
    throw DimensionError("linear: input width " + std::to_string(m) + " vs weight " + shape_str(w.shape()));
  }
  std::vector<T> wt(n * m);
  kernels::transpose(n, m, w.value().data(), wt.data());
  Tensor<T> out(Shape{rows, n});
  kernels::gemm(rows, m, n, x.value().data(), wt.data(), out.data(), false);
  return detail::make_op<T>(std::move(out), {x, w}, [rows, m, n](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (auto* dx = detail::grad_of(self, 0)) {
      kernels::gemm(rows, n, m, g.data(), self.parents[1]->value.data(), dx->data(), true);
    }
    if (auto* dw = detail::grad_of(self, 1)) {
      std::vector<T> gt(rows * n);
      kernels::transpose(rows, n, g.data(), gt.data());
      kernels::gemm(n, rows, m, gt.data(), self.parents[0]->value.data(), dw->data(), true);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* d = detail::grad_of(self, p)) {
        for (std::size_t i = 0; i < d->numel(); ++i) (*d)[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* d = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < d->numel(); ++i) (*d)[i] += self.grad[i];
    }
    if (auto* d = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < d->numel(); ++i) (*d)[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* d = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < d->numel(); ++i) (*d)[i] += self.grad[i] * bv[i];
    }
    if (auto* d = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < d->numel(); ++i) (*d)[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return detail::make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto* d = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < d->numel(); ++i) (*d)[i] += s * self.grad[i];
  });
}

/// x[N x C] plus a bias vector b[C] broadcast over rows.
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  detail::require_rank2(x.shape(), "add_bias");
  const std::size_t rows = x.shape()[0], c = x.shape()[1];
  if (b.numel() != c) throw DimensionError("add_bias: bias length " + std::to_string(b.numel()) + " vs width " + std::to_string(c));
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b.value()[j];
  }
  return detail::make_op<T>(std::move(out), {x, b}, [rows, c](Node<T>& self) {
    if (auto* dx = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < rows * c; ++i) (*dx)[i] += self.grad[i];
    }
    if (auto* db = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*db)[j] += self.grad[i * c + j];
      }
    }
  });
}

/// Tanh-approximated GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) {
    const T u = k0 * (v + k1 * v * v * v);
    v = T(0.5) * v * (T(1) + std::tanh(u));
  }
  return detail::make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* dx = detail::grad_of(self, 0);
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const T v = xv[i];
      const T u = k0 * (v + k1 * v * v * v);
      const T t = std::tanh(u);
      const T du = k0 * (T(1) + T(3) * k1 * v * v);
      const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
      (*dx)[i] += self.grad[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T v : a.value().vec()) s += v;
  return detail::make_op<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& self) {
    auto* d = detail::grad_of(self, 0);
    const T g = self.grad[0];
    for (auto& v : d->vec()) v += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Transformer building blocks

namespace detail {

template <class T>
struct NormStats {
  std::vector<T> mean;
  std::vector<T> rstd;
};

template <class T>
NormStats<T> normalize_rows(const Tensor<T>& x, T eps, Tensor<T>& xhat) {
  const std::size_t rows = x.rows(), c = x.cols();
  NormStats<T> st{std::vector<T>(rows), std::vector<T>(rows)};
  xhat = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* r = x.data() + i * c;
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += r[j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    st.mean[i] = mu;
    st.rstd[i] = rs;
    for (std::size_t j = 0; j < c; ++j) xhat[i * c + j] = (r[j] - mu) * rs;
  }
  return st;
}

// dx for y = xhat (per row), given dxhat.
template <class T>
void normalize_backward(const Tensor<T>& xhat, const std::vector<T>& rstd, const T* dxhat, Tensor<T>& dx) {
  const std::size_t rows = xhat.rows(), c = xhat.cols();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xh = xhat.data() + i * c;
    const T* dh = dxhat + i * c;
    T mean_d{0}, mean_dx{0};
    for (std::size_t j = 0; j < c; ++j) {
      mean_d += dh[j];
      mean_dx += dh[j] * xh[j];
    }
    mean_d /= static_cast<T>(c);
    mean_dx /= static_cast<T>(c);
    for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += rstd[i] * (dh[j] - mean_d - xh[j] * mean_dx);
  }
}

}  // namespace detail

/// Row-wise LayerNorm with affine scale gamma[C] and shift beta[C].
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::require_rank2(x.shape(), "layer_norm");
  const std::size_t rows = x.shape()[0], c = x.shape()[1];
  if (gamma.numel() != c || beta.numel() != c) throw DimensionError("layer_norm: affine parameters must have length C");
  Tensor<T> xhat;
  auto st = detail::normalize_rows(x.value(), eps, xhat);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xhat[i * c + j] * gamma.value()[j] + beta.value()[j];
  }
  return detail::make_op<T>(std::move(out), {x, gamma, beta},
                            [xhat = std::move(xhat), rstd = std::move(st.rstd), rows, c](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& gam = self.parents[1]->value;
    if (auto* dg = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*dg)[j] += g[i * c + j] * xhat[i * c + j];
      }
    }
    if (auto* db = detail::grad_of(self, 2)) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*db)[j] += g[i * c + j];
      }
    }
    if (auto* dx = detail::grad_of(self, 0)) {
      std::vector<T> dxhat(rows * c);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < c; ++j) dxhat[i * c + j] = g[i * c + j] * gam[j];
      }
      detail::normalize_backward(xhat, rstd, dxhat.data(), *dx);
    }
  });
}

/// LayerNorm without the affine transform.
template <class T>
Var<T> layer_norm(const Var<T>& x, T eps = T(1e-5)) {
  detail::require_rank2(x.shape(), "layer_norm");
  Tensor<T> xhat;
  auto st = detail::normalize_rows(x.value(), eps, xhat);
  Tensor<T> out = xhat;
  return detail::make_op<T>(std::move(out), {x}, [xhat = std::move(xhat), rstd = std::move(st.rstd)](Node<T>& self) {
    detail::normalize_backward(xhat, rstd, self.grad.data(), *detail::grad_of(self, 0));
  });
}

/// Gathers rows of table[V x d] for each token id, giving [tokens.size() x d].
template <class T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> tokens) {
  detail::require_rank2(table.shape(), "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  Tensor<T> out(Shape{tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DataError("token id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(table.value().data() + static_cast<std::size_t>(t) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> ids(tokens.begin(), tokens.end());
  return detail::make_op<T>(std::move(out), {table}, [ids = std::move(ids), d](Node<T>& self) {
    auto* dt = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* row = dt->data() + static_cast<std::size_t>(ids[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
    }
  });
}

/// Multi-head causal self-attention on packed rows. q, k, v are [batch*seq x d];
/// head h uses columns [h*d/heads, (h+1)*d/heads). Returns [batch*seq x d].
template <class T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch, std::size_t seq,
                        std::size_t heads) {
  require_same_shape(q.value(), k.value(), "causal_attention");
  require_same_shape(q.value(), v.value(), "causal_attention");
  detail::require_rank2(q.shape(), "causal_attention");
  const std::size_t d = q.shape()[1];
  if (q.shape()[0] != batch * seq) throw DimensionError("causal_attention: rows must equal batch*seq");
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  const std::size_t hd = d / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(hd));

  // probs[b][h][i][j] for j <= i, stored densely as seq x seq.
  std::vector<T> probs(batch * heads * seq * seq, T{0});
  Tensor<T> out(q.shape());
  const T* qv = q.value().data();
  const T* kv = k.value().data();
  const T* vv = v.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = qv + (b * seq + i) * d + h * hd;
        T* pi = P + i * seq;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kv + (b * seq + j) * d + h * hd;
          T s{0};
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          pi[j] = s * inv;
          mx = std::max(mx, pi[j]);
        }
        T z{0};
        for (std::size_t j = 0; j <= i; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        for (std::size_t j = 0; j <= i; ++j) pi[j] /= z;
        T* oi = out.data() + (b * seq + i) * d + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* vj = vv + (b * seq + j) * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += pi[j] * vj[c];
        }
      }
    }
  }
  return detail::make_op<T>(std::move(out), {q, k, v},
                            [probs = std::move(probs), batch, seq, heads, d, hd, inv](Node<T>& self) {
    const T* g = self.grad.data();
    const T* qv = self.parents[0]->value.data();
    const T* kv = self.parents[1]->value.data();
    const T* vv = self.parents[2]->value.data();
    auto* dq = detail::grad_of(self, 0);
    auto* dk = detail::grad_of(self, 1);
    auto* dv = detail::grad_of(self, 2);
    std::vector<T> dp(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const T* P = probs.data() + (b * heads + h) * seq * seq;
        for (std::size_t i = 0; i < seq; ++i) {
          const T* pi = P + i * seq;
          const T* gi = g + (b * seq + i) * d + h * hd;
          if (dv) {
            for (std::size_t j = 0; j <= i; ++j) {
              T* dvj = dv->data() + (b * seq + j) * d + h * hd;
              for (std::size_t c = 0; c < hd; ++c) dvj[c] += pi[j] * gi[c];
            }
          }
          if (!dq && !dk) continue;
          T dot{0};
          for (std::size_t j = 0; j <= i; ++j) {
            const T* vj = vv + (b * seq + j) * d + h * hd;
            T s{0};
            for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
            dp[j] = s;
            dot += s * pi[j];
          }
          const T* qi = qv + (b * seq + i) * d + h * hd;
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = pi[j] * (dp[j] - dot) * inv;
            const T* kj = kv + (b * seq + j) * d + h * hd;
            if (dq) {
              T* dqi = dq->data() + (b * seq + i) * d + h * hd;
              for (std::size_t c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
            }
            if (dk) {
              T* dkj = dk->data() + (b * seq + j) * d + h * hd;
              for (std::size_t c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
  });
}

/// Mean cross-entropy of logits[N x V] against integer targets (length N).
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets) {
  detail::require_rank2(logits.shape(), "cross_entropy");
  const std::size_t rows = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != rows) throw DimensionError("cross_entropy: one target per logit row required");
  Tensor<T> probs(logits.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const auto t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DataError("target id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab));
    }
    const T* l = logits.value().data() + i * vocab;
    T* p = probs.data() + i * vocab;
    T mx = l[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, l[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(l[j] - mx);
      z += p[j];
    }
    const T zt = static_cast<T>(z);
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= zt;
    total += std::log(z) + static_cast<double>(mx) - static_cast<double>(l[t]);
  }
  const T loss = static_cast<T>(total / static_cast<double>(rows));
  std::vector<std::int32_t> ids(targets.begin(), targets.end());
  return detail::make_op<T>(Tensor<T>::scalar(loss), {logits},
                            [probs = std::move(probs), ids = std::move(ids), rows, vocab](Node<T>& self) {
    auto* dl = detail::grad_of(self, 0);
    const T s = self.grad[0] / static_cast<T>(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < vocab; ++j) (*dl)[i * vocab + j] += s * probs[i * vocab + j];
      (*dl)[i * vocab + static_cast<std::size_t>(ids[i])] -= s;
    }
  });
}

}  // namespace perp
