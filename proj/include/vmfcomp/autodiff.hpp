#pragma once

// Reverse-mode autodiff over Tensor values. A forward pass builds a DAG of
// shared Nodes; backward() walks it in reverse topological order, so gradient
// accumulation happens in a fixed order and runs are bitwise reproducible.
// Nodes whose inputs all have requires_grad == false are created without
// parents, which both prunes inference graphs and makes detach() an exact
// stop-gradient: a detached branch can never receive or emit gradient.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vmfcomp/errors.hpp"
#include "vmfcomp/kernels.hpp"
#include "vmfcomp/tensor.hpp"

namespace vmfcomp::ad {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_ref() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> v, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> v) { return leaf(std::move(v), false); }

  // Generic op node; requires_grad is inherited from the parents and the
  // parent list / backward closure is dropped when no gradient can flow.
  static Var make(Tensor<T> v, std::vector<Var> parents, std::function<void(Node<T>&)> bw) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    bool rg = false;
    for (const Var& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
      for (Var& p : parents) n->parents.push_back(p.node_);
      n->backward = std::move(bw);
    }
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  Tensor<T>& grad_ref() { return node_->grad_ref(); }
  // Gradient as a tensor; zeros if nothing was ever accumulated.
  Tensor<T> grad_or_zeros() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }
  void clear_grad() { node_->grad = Tensor<T>(); }

  Var detach() const { return leaf(node_->value, false); }

  std::shared_ptr<Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Reverse sweep from a scalar root.
template <class T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1) throw ShapeMismatch("backward() root must be scalar");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // iterative post-order DFS over parent edges
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({root.node().get(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->grad_ref()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise / reduction ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  if (!a.value().same_shape(b.value())) throw ShapeMismatch("add: shapes differ");
  Tensor<T> out(a.value().shape());
  kern::add_fwd(a.value(), b.value(), out);
  auto an = a.node(), bn = b.node();
  return Var<T>::make(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) kern::axpy(self.grad, T(1), an->grad_ref());
    if (bn->requires_grad) kern::axpy(self.grad, T(1), bn->grad_ref());
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  if (!a.value().same_shape(b.value())) throw ShapeMismatch("sub: shapes differ");
  Tensor<T> out(a.value().shape());
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>::make(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) kern::axpy(self.grad, T(1), an->grad_ref());
    if (bn->requires_grad) kern::axpy(self.grad, T(-1), bn->grad_ref());
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (!a.value().same_shape(b.value())) throw ShapeMismatch("mul: shapes differ");
  Tensor<T> out(a.value().shape());
  kern::mul_fwd(a.value(), b.value(), out);
  auto an = a.node(), bn = b.node();
  return Var<T>::make(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) kern::mul_acc(self.grad, bn->value, an->grad_ref());
    if (bn->requires_grad) kern::mul_acc(self.grad, an->value, bn->grad_ref());
  });
}

template <class T>
Var<T> scale(Var<T> a, T alpha) {
  Tensor<T> out(a.value().shape());
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = alpha * a.value()[i];
  auto an = a.node();
  return Var<T>::make(std::move(out), {a}, [an, alpha](Node<T>& self) {
    if (an->requires_grad) kern::axpy(self.grad, alpha, an->grad_ref());
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  Tensor<T> out = Tensor<T>::scalar(kern::sum_all(a.value()));
  auto an = a.node();
  return Var<T>::make(std::move(out), {a}, [an](Node<T>& self) {
    if (!an->requires_grad) return;
    const T g = self.grad[0];
    Tensor<T>& d = an->grad_ref();
    const int64_t n = d.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) d[i] += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const T inv = T(1) / (T)a.value().numel();
  return scale(sum(a), inv);
}

// ---------------------------------------------------------------------------
// Fully connected: x (N x F) times w (F x O) + b (O)
// ---------------------------------------------------------------------------

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const int64_t N = x.value().dim(0), F = x.value().dim(1), O = w.value().dim(1);
  if (w.value().dim(0) != F || b.value().numel() != O)
    throw ShapeMismatch("linear: weight/bias shapes");
  Tensor<T> out({N, O});
  kern::gemm_nn(N, O, F, x.value().data(), w.value().data(), out.data(), false);
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < O; ++o) out.at2(n, o) += b.value()[o];
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return Var<T>::make(std::move(out), {x, w, b}, [xn, wn, bn, N, F, O](Node<T>& self) {
    if (xn->requires_grad)
      kern::gemm_nt(N, F, O, self.grad.data(), wn->value.data(), xn->grad_ref().data(), true);
    if (wn->requires_grad)
      kern::gemm_tn(F, O, N, xn->value.data(), self.grad.data(), wn->grad_ref().data(), true);
    if (bn->requires_grad) {
      Tensor<T>& db = bn->grad_ref();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t o = 0; o < O; ++o) db[o] += self.grad.at2(n, o);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions and pooling
// ---------------------------------------------------------------------------

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int64_t stride, int64_t pad) {
  const int64_t N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2),
                W = x.value().dim(3);
  const int64_t OC = w.value().dim(0), KH = w.value().dim(2), KW = w.value().dim(3);
  if (w.value().dim(1) != C) throw ShapeMismatch("conv2d: channel mismatch");
  const int64_t HO = kern::conv_out_dim(H, KH, stride, pad);
  const int64_t WO = kern::conv_out_dim(W, KW, stride, pad);
  if (HO <= 0 || WO <= 0) throw ShapeMismatch("conv2d: output would be empty");
  Tensor<T> out({N, OC, HO, WO});
  std::vector<T> cols;
  kern::conv2d_fwd(x.value(), w.value(), b.defined() ? b.value().data() : nullptr, stride, pad, out,
                   cols);
  auto xn = x.node(), wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return Var<T>::make(std::move(out), std::move(parents), [xn, wn, bn, stride, pad](Node<T>& self) {
    std::vector<T> cols;
    if (xn->requires_grad)
      kern::conv2d_bwd_data(self.grad, wn->value, stride, pad, xn->grad_ref(), cols);
    if (wn->requires_grad || (bn && bn->requires_grad)) {
      Tensor<T>& dw = wn->grad_ref();
      T* db = (bn && bn->requires_grad) ? bn->grad_ref().data() : nullptr;
      kern::conv2d_bwd_weights(xn->value, self.grad, stride, pad, dw, db, cols);
    }
  });
}

template <class T>
Var<T> convtr2(Var<T> x, Var<T> w, Var<T> b) {
  const int64_t N = x.value().dim(0), IC = x.value().dim(1), H = x.value().dim(2),
                W = x.value().dim(3);
  if (w.value().dim(0) != IC) throw ShapeMismatch("convtr2: channel mismatch");
  const int64_t OC = w.value().dim(1);
  Tensor<T> out({N, OC, 2 * H, 2 * W});
  kern::convtr2_fwd(x.value(), w.value(), b.defined() ? b.value().data() : nullptr, out);
  auto xn = x.node(), wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return Var<T>::make(std::move(out), std::move(parents), [xn, wn, bn](Node<T>& self) {
    if (xn->requires_grad) kern::convtr2_bwd_data(self.grad, wn->value, xn->grad_ref());
    if (wn->requires_grad || (bn && bn->requires_grad)) {
      T* db = (bn && bn->requires_grad) ? bn->grad_ref().data() : nullptr;
      kern::convtr2_bwd_weights(xn->value, self.grad, wn->grad_ref(), db);
    }
  });
}

template <class T>
Var<T> maxpool2(Var<T> x) {
  const int64_t N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2),
                W = x.value().dim(3);
  if (H % 2 || W % 2) throw ShapeMismatch("maxpool2: odd spatial dims");
  Tensor<T> out({N, C, H / 2, W / 2});
  auto idx = std::make_shared<Tensor<int32_t>>(Shape{N, C, H / 2, W / 2});
  kern::maxpool2_fwd(x.value(), out, *idx);
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, idx](Node<T>& self) {
    if (xn->requires_grad) kern::maxpool2_bwd(self.grad, *idx, xn->grad_ref());
  });
}

// ---------------------------------------------------------------------------
// Batch norm. Running statistics live outside the graph and are updated as a
// forward side effect in training mode (momentum convention: new = (1-m)*old
// + m*batch).
// ---------------------------------------------------------------------------

template <class T>
struct BNBuffers {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BNBuffers<T>& buf, bool training,
                  T momentum = T(0.1), T eps = T(1e-5)) {
  const int64_t C = x.value().dim(1);
  if (gamma.value().numel() != C || beta.value().numel() != C)
    throw ShapeMismatch("batch_norm: affine shapes");
  Tensor<T> out(x.value().shape());
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  if (training) {
    auto save_mean = std::make_shared<std::vector<T>>((size_t)C);
    auto save_invstd = std::make_shared<std::vector<T>>((size_t)C);
    kern::bn_fwd_train(x.value(), gamma.value().data(), beta.value().data(), eps, momentum, out,
                       save_mean->data(), save_invstd->data(), buf.running_mean.data(),
                       buf.running_var.data());
    return Var<T>::make(std::move(out), {x, gamma, beta},
                        [xn, gn, bn, save_mean, save_invstd](Node<T>& self) {
                          // dgamma/dbeta always needed when any input requires grad
                          Tensor<T>& dg = gn->grad_ref();
                          Tensor<T>& db = bn->grad_ref();
                          Tensor<T> dx_dummy;
                          Tensor<T>& dx = xn->requires_grad ? xn->grad_ref() : dx_dummy;
                          if (dx.empty() && !xn->requires_grad) dx = Tensor<T>(xn->value.shape());
                          kern::bn_bwd(xn->value, self.grad, gn->value.data(), save_mean->data(),
                                       save_invstd->data(), dx, dg.data(), db.data());
                        });
  }
  kern::bn_fwd_eval(x.value(), gamma.value().data(), beta.value().data(), eps,
                    buf.running_mean.data(), buf.running_var.data(), out);
  Tensor<T> rm = buf.running_mean, rv = buf.running_var;
  return Var<T>::make(std::move(out), {x, gamma, beta}, [xn, gn, bn, rm, rv, eps](Node<T>& self) {
    const int64_t N = xn->value.dim(0), C = xn->value.dim(1);
    const int64_t HW = xn->value.dim(2) * xn->value.dim(3);
    for (int64_t c = 0; c < C; ++c) {
      const T is = (T)(1.0 / std::sqrt((double)rv[c] + (double)eps));
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < HW; ++i) {
          const T g = self.grad.data()[(n * C + c) * HW + i];
          const T xhat = (xn->value.data()[(n * C + c) * HW + i] - rm[c]) * is;
          sum_dy += (double)g;
          sum_dy_xhat += (double)(g * xhat);
          if (xn->requires_grad) xn->grad_ref().data()[(n * C + c) * HW + i] += g * gn->value[c] * is;
        }
      if (gn->requires_grad) gn->grad_ref()[c] += (T)sum_dy_xhat;
      if (bn->requires_grad) bn->grad_ref()[c] += (T)sum_dy;
    }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T>
Var<T> leaky_relu(Var<T> x, T slope) {
  Tensor<T> out(x.value().shape());
  kern::leaky_relu_fwd(x.value(), slope, out);
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, slope](Node<T>& self) {
    if (xn->requires_grad) kern::leaky_relu_bwd(xn->value, self.grad, slope, xn->grad_ref());
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  return leaky_relu(x, T(0));
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out(x.value().shape());
  kern::sigmoid_fwd(x.value(), out);
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn](Node<T>& self) {
    if (xn->requires_grad) kern::sigmoid_bwd(self.value, self.grad, xn->grad_ref());
  });
}

// ---------------------------------------------------------------------------
// Channel concat (NCHW) of two inputs
// ---------------------------------------------------------------------------

template <class T>
Var<T> concat_ch(Var<T> a, Var<T> b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ShapeMismatch("concat_ch: non-channel dims differ");
  const int64_t N = sa[0], CA = sa[1], CB = sb[1], HW = sa[2] * sa[3];
  Tensor<T> out({N, CA + CB, sa[2], sa[3]});
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    std::copy(a.value().data() + n * CA * HW, a.value().data() + (n + 1) * CA * HW,
              out.data() + n * (CA + CB) * HW);
    std::copy(b.value().data() + n * CB * HW, b.value().data() + (n + 1) * CB * HW,
              out.data() + n * (CA + CB) * HW + CA * HW);
  }
  auto an = a.node(), bn = b.node();
  return Var<T>::make(std::move(out), {a, b}, [an, bn, N, CA, CB, HW](Node<T>& self) {
    if (an->requires_grad) {
      Tensor<T>& da = an->grad_ref();
#pragma omp parallel for schedule(static)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < CA * HW; ++i)
          da.data()[n * CA * HW + i] += self.grad.data()[n * (CA + CB) * HW + i];
    }
    if (bn->requires_grad) {
      Tensor<T>& db = bn->grad_ref();
#pragma omp parallel for schedule(static)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < CB * HW; ++i)
          db.data()[n * CB * HW + i] += self.grad.data()[n * (CA + CB) * HW + CA * HW + i];
    }
  });
}

// ---------------------------------------------------------------------------
// L2 normalisation across channels. `min_norm` receives the smallest norm
// encountered so callers can enforce their zero-vector contracts.
// ---------------------------------------------------------------------------

template <class T>
Var<T> l2norm_ch(Var<T> x, T* min_norm = nullptr) {
  Tensor<T> out(x.value().shape());
  auto norms = std::make_shared<std::vector<T>>();
  kern::l2norm_ch_fwd(x.value(), out, *norms);
  if (min_norm) {
    T mn = norms->empty() ? T(0) : (*norms)[0];
    for (T v : *norms) mn = std::min(mn, v);
    *min_norm = mn;
  }
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, norms](Node<T>& self) {
    if (xn->requires_grad) kern::l2norm_ch_bwd(self.value, *norms, self.grad, xn->grad_ref());
  });
}

// ---------------------------------------------------------------------------
// vMF activation, clustering loss, kernel combination
// ---------------------------------------------------------------------------

template <class T>
Var<T> vmf_activations(Var<T> zn, Var<T> mu, T sigma) {
  const int64_t N = zn.value().dim(0), D = zn.value().dim(1);
  if (mu.value().dim(1) != D)
    throw DimensionMismatch("vmf_activations: feature dim " + std::to_string(D) +
                            " vs kernel dim " + std::to_string(mu.value().dim(1)));
  const int64_t J = mu.value().dim(0);
  Tensor<T> out({N, J, zn.value().dim(2), zn.value().dim(3)});
  kern::vmf_act_fwd(zn.value(), mu.value(), sigma, out);
  auto zn_n = zn.node(), mu_n = mu.node();
  return Var<T>::make(std::move(out), {zn, mu}, [zn_n, mu_n, sigma](Node<T>& self) {
    std::vector<T> buf;
    kern::vmf_act_bwd(zn_n->value, mu_n->value, sigma, self.value, self.grad,
                      zn_n->requires_grad ? &zn_n->grad_ref() : nullptr,
                      mu_n->requires_grad ? &mu_n->grad_ref() : nullptr, buf);
  });
}

template <class T>
Var<T> clustering_loss(Var<T> mu, Var<T> zn) {
  const int64_t N = zn.value().dim(0), D = zn.value().dim(1);
  if (mu.value().dim(1) != D)
    throw DimensionMismatch("clustering_loss: feature dim vs kernel dim");
  const int64_t HW = zn.value().dim(2) * zn.value().dim(3);
  auto argmax = std::make_shared<Tensor<int32_t>>(Shape{N * HW});
  std::vector<T> dots;
  const T loss = kern::clu_loss_fwd(mu.value(), zn.value(), *argmax, dots);
  auto mu_n = mu.node(), zn_n = zn.node();
  return Var<T>::make(Tensor<T>::scalar(loss), {mu, zn}, [mu_n, zn_n, argmax](Node<T>& self) {
    kern::clu_loss_bwd(mu_n->value, zn_n->value, *argmax, self.grad[0],
                       mu_n->requires_grad ? &mu_n->grad_ref() : nullptr,
                       zn_n->requires_grad ? &zn_n->grad_ref() : nullptr);
  });
}

// out[n,:,i] = sum_j a[n,j,i] * mu[j,:]
template <class T>
Var<T> combine_kernels(Var<T> a, Var<T> mu) {
  const int64_t J = a.value().dim(1);
  if (mu.value().dim(0) != J) throw DimensionMismatch("combine_kernels: J mismatch");
  Tensor<T> out({a.value().dim(0), mu.value().dim(1), a.value().dim(2), a.value().dim(3)});
  kern::combine_fwd(a.value(), mu.value(), out);
  auto an = a.node(), mu_n = mu.node();
  return Var<T>::make(std::move(out), {a, mu}, [an, mu_n](Node<T>& self) {
    kern::combine_bwd(an->value, mu_n->value, self.grad,
                      an->requires_grad ? &an->grad_ref() : nullptr,
                      mu_n->requires_grad ? &mu_n->grad_ref() : nullptr);
  });
}

}  // namespace vmfcomp::ad
