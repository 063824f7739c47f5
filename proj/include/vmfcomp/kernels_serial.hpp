#pragma once

// Plain serial reference implementations of the kernels in kernels.hpp.
// These are the ground truth the OpenMP kernels are tested against and the
// baseline the benchmark target compares speed against. Direct loops, no
// im2col, no tiling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vmfcomp/tensor.hpp"

namespace vmfcomp::kern::serial {

template <class T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  for (int64_t m = 0; m < M; ++m)
    for (int64_t n = 0; n < N; ++n) {
      double acc = accumulate ? (double)C[m * N + n] : 0.0;
      for (int64_t k = 0; k < K; ++k) acc += (double)A[m * K + k] * (double)B[k * N + n];
      C[m * N + n] = (T)acc;
    }
}

template <class T>
void conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const T* bias, int64_t stride, int64_t pad,
                Tensor<T>& out) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int64_t HO = out.dim(2), WO = out.dim(3);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t oh = 0; oh < HO; ++oh)
        for (int64_t ow = 0; ow < WO; ++ow) {
          double acc = bias ? (double)bias[oc] : 0.0;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t kh = 0; kh < KH; ++kh)
              for (int64_t kw = 0; kw < KW; ++kw) {
                const int64_t ih = oh * stride - pad + kh;
                const int64_t iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += (double)x.at4(n, c, ih, iw) * (double)w.at4(oc, c, kh, kw);
              }
          out.at4(n, oc, oh, ow) = (T)acc;
        }
}

template <class T>
void conv2d_bwd_data(const Tensor<T>& gout, const Tensor<T>& w, int64_t stride, int64_t pad,
                     Tensor<T>& dx) {
  const int64_t N = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const int64_t OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int64_t HO = gout.dim(2), WO = gout.dim(3);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t oh = 0; oh < HO; ++oh)
        for (int64_t ow = 0; ow < WO; ++ow) {
          const T g = gout.at4(n, oc, oh, ow);
          for (int64_t c = 0; c < C; ++c)
            for (int64_t kh = 0; kh < KH; ++kh)
              for (int64_t kw = 0; kw < KW; ++kw) {
                const int64_t ih = oh * stride - pad + kh;
                const int64_t iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                dx.at4(n, c, ih, iw) += g * w.at4(oc, c, kh, kw);
              }
        }
}

template <class T>
void conv2d_bwd_weights(const Tensor<T>& x, const Tensor<T>& gout, int64_t stride, int64_t pad,
                        Tensor<T>& dw, T* dbias) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OC = dw.dim(0), KH = dw.dim(2), KW = dw.dim(3);
  const int64_t HO = gout.dim(2), WO = gout.dim(3);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t oh = 0; oh < HO; ++oh)
        for (int64_t ow = 0; ow < WO; ++ow) {
          const T g = gout.at4(n, oc, oh, ow);
          if (dbias) dbias[oc] += g;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t kh = 0; kh < KH; ++kh)
              for (int64_t kw = 0; kw < KW; ++kw) {
                const int64_t ih = oh * stride - pad + kh;
                const int64_t iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                dw.at4(oc, c, kh, kw) += x.at4(n, c, ih, iw) * g;
              }
        }
}

template <class T>
void convtr2_fwd(const Tensor<T>& x, const Tensor<T>& w, const T* bias, Tensor<T>& out) {
  const int64_t N = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OC = w.dim(1);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t oh = 0; oh < 2 * H; ++oh)
        for (int64_t ow = 0; ow < 2 * W; ++ow) {
          double acc = bias ? (double)bias[oc] : 0.0;
          for (int64_t ic = 0; ic < IC; ++ic)
            acc += (double)x.at4(n, ic, oh / 2, ow / 2) *
                   (double)w.data()[((ic * OC + oc) * 2 + (oh & 1)) * 2 + (ow & 1)];
          out.at4(n, oc, oh, ow) = (T)acc;
        }
}

template <class T>
void vmf_act_fwd(const Tensor<T>& zn, const Tensor<T>& mu, T sigma, Tensor<T>& out) {
  const int64_t N = zn.dim(0), D = zn.dim(1), HW = zn.dim(2) * zn.dim(3);
  const int64_t J = mu.dim(0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t j = 0; j < J; ++j)
      for (int64_t i = 0; i < HW; ++i) {
        double dot = 0;
        for (int64_t d = 0; d < D; ++d)
          dot += (double)mu.at2(j, d) * (double)zn.data()[(n * D + d) * HW + i];
        out.data()[(n * J + j) * HW + i] = (T)std::exp((double)sigma * (dot - 1.0));
      }
}

template <class T>
T clu_loss_fwd(const Tensor<T>& mu, const Tensor<T>& zn) {
  const int64_t N = zn.dim(0), D = zn.dim(1), HW = zn.dim(2) * zn.dim(3);
  const int64_t J = mu.dim(0);
  double total = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      double best = -1e300;
      for (int64_t j = 0; j < J; ++j) {
        double dot = 0;
        for (int64_t d = 0; d < D; ++d)
          dot += (double)mu.at2(j, d) * (double)zn.data()[(n * D + d) * HW + i];
        best = std::max(best, dot);
      }
      total += best;
    }
  return (T)(-total / (double)(N * HW));
}

template <class T>
void combine_fwd(const Tensor<T>& a, const Tensor<T>& mu, Tensor<T>& out) {
  const int64_t N = a.dim(0), J = a.dim(1), HW = a.dim(2) * a.dim(3);
  const int64_t D = mu.dim(1);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t d = 0; d < D; ++d)
      for (int64_t i = 0; i < HW; ++i) {
        double acc = 0;
        for (int64_t j = 0; j < J; ++j)
          acc += (double)a.data()[(n * J + j) * HW + i] * (double)mu.at2(j, d);
        out.data()[(n * D + d) * HW + i] = (T)acc;
      }
}

template <class T>
void l2norm_ch_fwd(const Tensor<T>& x, Tensor<T>& out) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      double sq = 0;
      for (int64_t c = 0; c < C; ++c) {
        const double v = (double)x.data()[(n * C + c) * HW + i];
        sq += v * v;
      }
      const double nr = std::sqrt(sq);
      for (int64_t c = 0; c < C; ++c)
        out.data()[(n * C + c) * HW + i] = (T)((double)x.data()[(n * C + c) * HW + i] / nr);
    }
}

template <class T>
void bn_fwd_train(const Tensor<T>& x, const T* gamma, const T* beta, T eps, Tensor<T>& out) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int64_t cnt = N * HW;
  for (int64_t c = 0; c < C; ++c) {
    double sum = 0, sq = 0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        const double v = (double)x.data()[(n * C + c) * HW + i];
        sum += v;
        sq += v * v;
      }
    const double mean = sum / (double)cnt;
    const double var = std::max(0.0, sq / (double)cnt - mean * mean);
    const double invstd = 1.0 / std::sqrt(var + (double)eps);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        const double v = (double)x.data()[(n * C + c) * HW + i];
        out.data()[(n * C + c) * HW + i] = (T)((double)gamma[c] * (v - mean) * invstd + (double)beta[c]);
      }
  }
}

template <class T>
void maxpool2_fwd(const Tensor<T>& x, Tensor<T>& out) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oh = 0; oh < H / 2; ++oh)
        for (int64_t ow = 0; ow < W / 2; ++ow) {
          T best = x.at4(n, c, 2 * oh, 2 * ow);
          best = std::max(best, x.at4(n, c, 2 * oh, 2 * ow + 1));
          best = std::max(best, x.at4(n, c, 2 * oh + 1, 2 * ow));
          best = std::max(best, x.at4(n, c, 2 * oh + 1, 2 * ow + 1));
          out.at4(n, c, oh, ow) = best;
        }
}

}  // namespace vmfcomp::kern::serial
