#pragma once

// Task and auxiliary losses: soft Dice, L1 reconstruction, weak-supervision
// L1, and cross pseudo supervision (Dice against the hardened, stop-gradient
// prediction of the other model). All reductions are means so loss weights
// stay scale-free across image sizes.

#include <cmath>
#include <cstdint>
#include <vector>

#include "vmfcomp/autodiff.hpp"
#include "vmfcomp/errors.hpp"
#include "vmfcomp/tensor.hpp"

namespace vmfcomp {

inline constexpr double kDiceEps = 1e-6;

// Sigmoid segmentation probabilities, N x K x H x W (K foreground classes;
// background = all channels below 0.5). stop_gradient marks a tensor that was
// detached from its producing graph.
template <class T>
struct SegPrediction {
  Tensor<T> probs;
  bool stop_gradient = false;
};

// Image-level presence/absence labels; length 1 (heart) or 3 (LV/MYO/RV).
struct WeakLabel {
  std::vector<uint8_t> presence;
};

// Per-pixel hardening: the argmax channel wins if its probability clears 0.5,
// otherwise the pixel is background (all channels zero). Exact probability
// ties resolve to the lowest channel index.
template <class T>
Tensor<T> harden_prediction(const Tensor<T>& probs) {
  const int64_t N = probs.dim(0), K = probs.dim(1), HW = probs.dim(2) * probs.dim(3);
  Tensor<T> hard(probs.shape());
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      int64_t best = 0;
      T bv = probs.data()[(n * K + 0) * HW + i];
      for (int64_t k = 1; k < K; ++k) {
        const T v = probs.data()[(n * K + k) * HW + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      if (bv >= T(0.5)) hard.data()[(n * K + best) * HW + i] = T(1);
    }
  return hard;
}

namespace detail {

template <class T>
struct DiceSums {
  double inter, psum, gsum;
};

template <class T>
std::vector<DiceSums<T>> dice_sums(const Tensor<T>& p, const Tensor<T>& g) {
  const int64_t N = p.dim(0), K = p.dim(1), HW = p.dim(2) * p.dim(3);
  std::vector<DiceSums<T>> sums((size_t)(N * K));
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t k = 0; k < K; ++k) {
      const T* pp = p.data() + (n * K + k) * HW;
      const T* gg = g.data() + (n * K + k) * HW;
      double inter = 0, psum = 0, gsum = 0;
      for (int64_t i = 0; i < HW; ++i) {
        inter += (double)pp[i] * (double)gg[i];
        psum += (double)pp[i] * (double)pp[i];
        gsum += (double)gg[i] * (double)gg[i];
      }
      sums[(size_t)(n * K + k)] = {inter, psum, gsum};
    }
  return sums;
}

// weights: one entry per sample, usually the per-sample lambda_Dice in {0,1}.
// Loss = sum_n w_n * mean_k dice_nk / max(1, #nonzero weights).
template <class T>
T dice_from_sums(const std::vector<DiceSums<T>>& sums, const std::vector<T>& w, int64_t N,
                 int64_t K) {
  double denom = 0;
  for (T v : w)
    if (v != T(0)) denom += 1;
  if (denom < 1) denom = 1;
  double loss = 0;
  for (int64_t n = 0; n < N; ++n) {
    if (w[(size_t)n] == T(0)) continue;
    double per_sample = 0;
    for (int64_t k = 0; k < K; ++k) {
      const auto& s = sums[(size_t)(n * K + k)];
      per_sample += 1.0 - (2.0 * s.inter + kDiceEps) / (s.psum + s.gsum + kDiceEps);
    }
    loss += (double)w[(size_t)n] * per_sample / (double)K;
  }
  return (T)(loss / denom);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Value-level API
// ---------------------------------------------------------------------------

template <class T>
T dice_loss(const SegPrediction<T>& pred, const Tensor<T>& gt_onehot) {
  if (!pred.probs.same_shape(gt_onehot))
    throw ShapeMismatch("dice_loss: pred " + shape_str(pred.probs.shape()) + " vs gt " +
                        shape_str(gt_onehot.shape()));
  const int64_t N = pred.probs.dim(0), K = pred.probs.dim(1);
  auto sums = detail::dice_sums(pred.probs, gt_onehot);
  std::vector<T> w((size_t)N, T(1));
  return detail::dice_from_sums(sums, w, N, K);
}

template <class T>
T reconstruction_loss(const Tensor<T>& x, const Tensor<T>& xhat) {
  if (!x.same_shape(xhat)) throw ShapeMismatch("reconstruction_loss: shapes differ");
  const int64_t n = x.numel();
  const int64_t nblk = (n + 4095) / 4096;
  std::vector<double> partial((size_t)nblk, 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < nblk; ++b) {
    double acc = 0;
    const int64_t end = std::min(n, (b + 1) * 4096);
    for (int64_t i = b * 4096; i < end; ++i) acc += std::abs((double)x[i] - (double)xhat[i]);
    partial[(size_t)b] = acc;
  }
  double total = 0;
  for (double p : partial) total += p;
  return (T)(total / (double)n);
}

template <class T>
T weak_loss(const std::vector<T>& c_hat, const WeakLabel& c) {
  if (c_hat.size() != c.presence.size())
    throw ShapeMismatch("weak_loss: prediction length " + std::to_string(c_hat.size()) +
                        " vs label length " + std::to_string(c.presence.size()));
  double acc = 0;
  for (size_t i = 0; i < c_hat.size(); ++i) acc += std::abs((double)c_hat[i] - (double)c.presence[i]);
  return (T)(acc / (double)c_hat.size());
}

template <class T>
T cps_loss(const SegPrediction<T>& pseudo, const SegPrediction<T>& pred) {
  if (!pseudo.stop_gradient)
    throw MissingStopGradient("cps_loss: pseudo prediction is not detached");
  if (!pseudo.probs.same_shape(pred.probs)) throw ShapeMismatch("cps_loss: shapes differ");
  return dice_loss(pred, harden_prediction(pseudo.probs));
}

// ---------------------------------------------------------------------------
// Differentiable versions
// ---------------------------------------------------------------------------

namespace adl {

using ad::Node;
using ad::Var;

// Soft Dice with per-sample weights (the lambda_Dice gate). gt and weights
// are constants. Returns exactly 0 when every weight is zero.
template <class T>
Var<T> dice_loss(Var<T> pred, const Tensor<T>& gt_onehot, const std::vector<T>& weights) {
  if (!pred.value().same_shape(gt_onehot)) throw ShapeMismatch("dice_loss: pred vs gt shapes");
  const int64_t N = pred.value().dim(0), K = pred.value().dim(1);
  if ((int64_t)weights.size() != N) throw ShapeMismatch("dice_loss: weights length");
  auto sums = std::make_shared<std::vector<detail::DiceSums<T>>>(
      detail::dice_sums(pred.value(), gt_onehot));
  const T loss = detail::dice_from_sums(*sums, weights, N, K);
  auto pn = pred.node();
  auto gt = std::make_shared<Tensor<T>>(gt_onehot);
  auto w = std::make_shared<std::vector<T>>(weights);
  return Var<T>::make(Tensor<T>::scalar(loss), {pred}, [pn, gt, w, sums, N, K](Node<T>& self) {
    if (!pn->requires_grad) return;
    double denom = 0;
    for (T v : *w)
      if (v != T(0)) denom += 1;
    if (denom < 1) denom = 1;
    const double g = (double)self.grad[0];
    const int64_t HW = pn->value.dim(2) * pn->value.dim(3);
    Tensor<T>& dp = pn->grad_ref();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t k = 0; k < K; ++k) {
        if ((*w)[(size_t)n] == T(0)) continue;
        const auto& s = (*sums)[(size_t)(n * K + k)];
        const double num = 2.0 * s.inter + kDiceEps;
        const double den = s.psum + s.gsum + kDiceEps;
        const double cf = g * (double)(*w)[(size_t)n] / (denom * (double)K);
        const T* pp = pn->value.data() + (n * K + k) * HW;
        const T* gg = gt->data() + (n * K + k) * HW;
        T* dd = dp.data() + (n * K + k) * HW;
#pragma omp simd
        for (int64_t i = 0; i < HW; ++i)
          dd[i] += (T)(cf * (2.0 * num * (double)pp[i] - 2.0 * (double)gg[i] * den) / (den * den));
      }
  });
}

template <class T>
Var<T> dice_loss(Var<T> pred, const Tensor<T>& gt_onehot) {
  return dice_loss(pred, gt_onehot, std::vector<T>((size_t)pred.value().dim(0), T(1)));
}

// Mean absolute error against a constant target.
template <class T>
Var<T> l1_loss(Var<T> a, const Tensor<T>& target) {
  if (!a.value().same_shape(target)) throw ShapeMismatch("l1_loss: shapes differ");
  const int64_t n = a.value().numel();
  const int64_t nblk = (n + 4095) / 4096;
  std::vector<double> partial((size_t)nblk, 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t blk = 0; blk < nblk; ++blk) {
    double acc = 0;
    const int64_t end = std::min(n, (blk + 1) * 4096);
    for (int64_t i = blk * 4096; i < end; ++i)
      acc += std::abs((double)a.value()[i] - (double)target[i]);
    partial[(size_t)blk] = acc;
  }
  double total = 0;
  for (double p : partial) total += p;
  auto an = a.node();
  auto tgt = std::make_shared<Tensor<T>>(target);
  return Var<T>::make(Tensor<T>::scalar((T)(total / (double)n)), {a}, [an, tgt, n](Node<T>& self) {
    if (!an->requires_grad) return;
    const T g = self.grad[0] / (T)n;
    Tensor<T>& da = an->grad_ref();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
      const T diff = an->value[i] - (*tgt)[i];
      da[i] += diff > T(0) ? g : (diff < T(0) ? -g : T(0));
    }
  });
}

// Cross pseudo supervision: Dice of `pred` against the hardened pseudo mask.
// The pseudo branch must already be detached; gradient flows only into pred.
template <class T>
Var<T> cps_loss(Var<T> pseudo, Var<T> pred) {
  if (pseudo.requires_grad())
    throw MissingStopGradient("cps_loss: pseudo prediction must be detached");
  if (!pseudo.value().same_shape(pred.value())) throw ShapeMismatch("cps_loss: shapes differ");
  return dice_loss(pred, harden_prediction(pseudo.value()));
}

}  // namespace adl

}  // namespace vmfcomp
