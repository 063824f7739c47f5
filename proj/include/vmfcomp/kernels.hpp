#pragma once

// OpenMP-parallel numeric kernels. Every parallel loop writes a disjoint set
// of output elements and every reduction accumulates fixed-order partials, so
// results are bitwise identical across runs and thread counts. The serial
// reference implementations live in kernels_serial.hpp and the two are
// cross-checked in tests and compared in benchmarks/.

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vmfcomp/tensor.hpp"

namespace vmfcomp::kern {

// ---------------------------------------------------------------------------
// GEMM. C (MxN) = A | A^T times B | B^T, row-major. `accumulate` adds into C.
// Parallelised over rows of C; each C element is accumulated serially along K.
// ---------------------------------------------------------------------------

template <class T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  constexpr int64_t NB = 1024;  // column panel, keeps the C rows in L1
  constexpr int64_t MR = 4;     // row unroll, 4 FMAs per B load
#pragma omp parallel for schedule(static)
  for (int64_t m0 = 0; m0 < M; m0 += MR) {
    const int64_t mend = std::min(m0 + MR, M);
    if (!accumulate)
      for (int64_t m = m0; m < mend; ++m) std::fill(C + m * N, C + (m + 1) * N, T(0));
    for (int64_t n0 = 0; n0 < N; n0 += NB) {
      const int64_t nend = std::min(n0 + NB, N);
      for (int64_t k = 0; k < K; ++k) {
        const T* Bk = B + k * N;
        for (int64_t m = m0; m < mend; ++m) {
          const T a = A[m * K + k];
          T* Cm = C + m * N;
#pragma omp simd
          for (int64_t n = n0; n < nend; ++n) Cm[n] += a * Bk[n];
        }
      }
    }
  }
}

// C (MxN) = A^T * B with A stored KxM.
template <class T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  constexpr int64_t NB = 1024;
#pragma omp parallel for schedule(static)
  for (int64_t m = 0; m < M; ++m) {
    T* Cm = C + m * N;
    if (!accumulate) std::fill(Cm, Cm + N, T(0));
    for (int64_t n0 = 0; n0 < N; n0 += NB) {
      const int64_t nend = std::min(n0 + NB, N);
      for (int64_t k = 0; k < K; ++k) {
        const T a = A[k * M + m];
        const T* Bk = B + k * N;
#pragma omp simd
        for (int64_t n = n0; n < nend; ++n) Cm[n] += a * Bk[n];
      }
    }
  }
}

// C (MxN) = A * B^T with B stored NxK; inner dot products over contiguous rows.
template <class T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (int64_t m = 0; m < M; ++m) {
    const T* Am = A + m * K;
    for (int64_t n = 0; n < N; ++n) {
      const T* Bn = B + n * K;
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (int64_t k = 0; k < K; ++k) acc += Am[k] * Bn[k];
      C[m * N + n] = accumulate ? C[m * N + n] + acc : acc;
    }
  }
}

// ---------------------------------------------------------------------------
// im2col / col2im for 2D convolution, CHW single image.
// cols has shape (C*KH*KW) x (HO*WO).
// ---------------------------------------------------------------------------

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, T* cols) {
  const int64_t HO = conv_out_dim(H, kh, stride, pad);
  const int64_t WO = conv_out_dim(W, kw, stride, pad);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < C * kh * kw; ++r) {
    const int64_t c = r / (kh * kw);
    const int64_t ki = (r / kw) % kh;
    const int64_t kj = r % kw;
    T* dst = cols + r * HO * WO;
    const T* src = x + c * H * W;
    for (int64_t oh = 0; oh < HO; ++oh) {
      const int64_t ih = oh * stride - pad + ki;
      if (ih < 0 || ih >= H) {
        std::fill(dst + oh * WO, dst + (oh + 1) * WO, T(0));
        continue;
      }
      for (int64_t ow = 0; ow < WO; ++ow) {
        const int64_t iw = ow * stride - pad + kj;
        dst[oh * WO + ow] = (iw >= 0 && iw < W) ? src[ih * W + iw] : T(0);
      }
    }
  }
}

// Gather form of col2im: each dx element sums its cols contributions in a
// fixed order, so the scatter-free loop stays deterministic under OpenMP.
template <class T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, T* dx, bool accumulate) {
  const int64_t HO = conv_out_dim(H, kh, stride, pad);
  const int64_t WO = conv_out_dim(W, kw, stride, pad);
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < C; ++c) {
    T* dst = dx + c * H * W;
    for (int64_t ih = 0; ih < H; ++ih) {
      for (int64_t iw = 0; iw < W; ++iw) {
        T acc = accumulate ? dst[ih * W + iw] : T(0);
        for (int64_t ki = 0; ki < kh; ++ki) {
          const int64_t oh_num = ih + pad - ki;
          if (oh_num < 0 || oh_num % stride) continue;
          const int64_t oh = oh_num / stride;
          if (oh >= HO) continue;
          for (int64_t kj = 0; kj < kw; ++kj) {
            const int64_t ow_num = iw + pad - kj;
            if (ow_num < 0 || ow_num % stride) continue;
            const int64_t ow = ow_num / stride;
            if (ow >= WO) continue;
            const int64_t r = (c * kh + ki) * kw + kj;
            acc += cols[r * HO * WO + oh * WO + ow];
          }
        }
        dst[ih * W + iw] = acc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Convolution, NCHW. Weights OCxICxKHxKW, bias OC (optional, may be null).
// ---------------------------------------------------------------------------

template <class T>
void conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const T* bias, int64_t stride, int64_t pad,
                Tensor<T>& out, std::vector<T>& cols_buf) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int64_t HO = conv_out_dim(H, KH, stride, pad), WO = conv_out_dim(W, KW, stride, pad);
  cols_buf.resize((size_t)(C * KH * KW * HO * WO));
  for (int64_t n = 0; n < N; ++n) {
    im2col(x.data() + n * C * H * W, C, H, W, KH, KW, stride, pad, cols_buf.data());
    gemm_nn(OC, HO * WO, C * KH * KW, w.data(), cols_buf.data(), out.data() + n * OC * HO * WO,
            false);
  }
  if (bias) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t oc = 0; oc < OC; ++oc) {
        T* o = out.data() + (n * OC + oc) * HO * WO;
        const T b = bias[oc];
#pragma omp simd
        for (int64_t i = 0; i < HO * WO; ++i) o[i] += b;
      }
  }
}

template <class T>
void conv2d_bwd_data(const Tensor<T>& gout, const Tensor<T>& w, int64_t stride, int64_t pad,
                     Tensor<T>& dx, std::vector<T>& cols_buf) {
  const int64_t N = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const int64_t OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int64_t HO = gout.dim(2), WO = gout.dim(3);
  cols_buf.resize((size_t)(C * KH * KW * HO * WO));
  for (int64_t n = 0; n < N; ++n) {
    // dcols = W^T * gout_n
    gemm_tn(C * KH * KW, HO * WO, OC, w.data(), gout.data() + n * OC * HO * WO, cols_buf.data(),
            false);
    col2im(cols_buf.data(), C, H, W, KH, KW, stride, pad, dx.data() + n * C * H * W,
           /*accumulate=*/true);
  }
}

template <class T>
void conv2d_bwd_weights(const Tensor<T>& x, const Tensor<T>& gout, int64_t stride, int64_t pad,
                        Tensor<T>& dw, T* dbias, std::vector<T>& cols_buf) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OC = dw.dim(0), KH = dw.dim(2), KW = dw.dim(3);
  const int64_t HO = gout.dim(2), WO = gout.dim(3);
  cols_buf.resize((size_t)(C * KH * KW * HO * WO));
  for (int64_t n = 0; n < N; ++n) {  // serial over batch: deterministic accumulation
    im2col(x.data() + n * C * H * W, C, H, W, KH, KW, stride, pad, cols_buf.data());
    gemm_nt(OC, C * KH * KW, HO * WO, gout.data() + n * OC * HO * WO, cols_buf.data(), dw.data(),
            /*accumulate=*/true);
  }
  if (dbias) {
#pragma omp parallel for schedule(static)
    for (int64_t oc = 0; oc < OC; ++oc) {
      double acc = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* g = gout.data() + (n * OC + oc) * HO * WO;
        for (int64_t i = 0; i < HO * WO; ++i) acc += (double)g[i];
      }
      dbias[oc] += (T)acc;
    }
  }
}

// ---------------------------------------------------------------------------
// Transposed convolution with kernel 2, stride 2 (the only upsampling used).
// Weights ICxOCx2x2. Each output pixel receives exactly one tap.
// ---------------------------------------------------------------------------

template <class T>
void convtr2_fwd(const Tensor<T>& x, const Tensor<T>& w, const T* bias, Tensor<T>& out) {
  const int64_t N = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OC = w.dim(1);
  const int64_t HO = 2 * H, WO = 2 * W;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < OC; ++oc) {
      T* o = out.data() + (n * OC + oc) * HO * WO;
      for (int64_t oh = 0; oh < HO; ++oh) {
        const int64_t ih = oh >> 1, kh = oh & 1;
        for (int64_t ow = 0; ow < WO; ++ow) {
          const int64_t iw = ow >> 1, kw = ow & 1;
          T acc = bias ? bias[oc] : T(0);
          for (int64_t ic = 0; ic < IC; ++ic)
            acc += x.at4(n, ic, ih, iw) * w.data()[((ic * OC + oc) * 2 + kh) * 2 + kw];
          o[oh * WO + ow] = acc;
        }
      }
    }
}

template <class T>
void convtr2_bwd_data(const Tensor<T>& gout, const Tensor<T>& w, Tensor<T>& dx) {
  const int64_t N = dx.dim(0), IC = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const int64_t OC = gout.dim(1);
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t ic = 0; ic < IC; ++ic)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t iw = 0; iw < W; ++iw) {
          T acc = 0;
          for (int64_t oc = 0; oc < OC; ++oc)
            for (int64_t kh = 0; kh < 2; ++kh)
              for (int64_t kw = 0; kw < 2; ++kw)
                acc += gout.at4(n, oc, 2 * h + kh, 2 * iw + kw) *
                       w.data()[((ic * OC + oc) * 2 + kh) * 2 + kw];
          dx.at4(n, ic, h, iw) += acc;
        }
}

template <class T>
void convtr2_bwd_weights(const Tensor<T>& x, const Tensor<T>& gout, Tensor<T>& dw, T* dbias) {
  const int64_t N = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OC = gout.dim(1);
#pragma omp parallel for schedule(static)
  for (int64_t ic = 0; ic < IC; ++ic)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t kh = 0; kh < 2; ++kh)
        for (int64_t kw = 0; kw < 2; ++kw) {
          double acc = 0;
          for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < H; ++h)
              for (int64_t iw = 0; iw < W; ++iw)
                acc += (double)x.at4(n, ic, h, iw) * (double)gout.at4(n, oc, 2 * h + kh, 2 * iw + kw);
          dw.data()[((ic * OC + oc) * 2 + kh) * 2 + kw] += (T)acc;
        }
  if (dbias) {
#pragma omp parallel for schedule(static)
    for (int64_t oc = 0; oc < OC; ++oc) {
      double acc = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* g = gout.data() + (n * OC + oc) * gout.dim(2) * gout.dim(3);
        for (int64_t i = 0; i < gout.dim(2) * gout.dim(3); ++i) acc += (double)g[i];
      }
      dbias[oc] += (T)acc;
    }
  }
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. idx stores the in-window argmax (0..3).
// ---------------------------------------------------------------------------

template <class T>
void maxpool2_fwd(const Tensor<T>& x, Tensor<T>& out, Tensor<int32_t>& idx) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t HO = H / 2, WO = W / 2;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oh = 0; oh < HO; ++oh)
        for (int64_t ow = 0; ow < WO; ++ow) {
          int32_t best = 0;
          T bv = x.at4(n, c, 2 * oh, 2 * ow);
          for (int32_t k = 1; k < 4; ++k) {
            const T v = x.at4(n, c, 2 * oh + (k >> 1), 2 * ow + (k & 1));
            if (v > bv) {
              bv = v;
              best = k;
            }
          }
          out.at4(n, c, oh, ow) = bv;
          idx.at4(n, c, oh, ow) = best;
        }
}

template <class T>
void maxpool2_bwd(const Tensor<T>& gout, const Tensor<int32_t>& idx, Tensor<T>& dx) {
  const int64_t N = dx.dim(0), C = dx.dim(1);
  const int64_t HO = gout.dim(2), WO = gout.dim(3);
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oh = 0; oh < HO; ++oh)
        for (int64_t ow = 0; ow < WO; ++ow) {
          const int32_t k = idx.at4(n, c, oh, ow);
          dx.at4(n, c, 2 * oh + (k >> 1), 2 * ow + (k & 1)) += gout.at4(n, c, oh, ow);
        }
}

// ---------------------------------------------------------------------------
// Batch normalisation (NCHW, per-channel). Parallel over channels; the
// per-channel reductions run serially in index order.
// ---------------------------------------------------------------------------

template <class T>
void bn_fwd_train(const Tensor<T>& x, const T* gamma, const T* beta, T eps, T momentum,
                  Tensor<T>& out, T* save_mean, T* save_invstd, T* running_mean, T* running_var) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int64_t cnt = N * HW;
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < C; ++c) {
    double sum = 0, sq = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        sum += (double)p[i];
        sq += (double)p[i] * (double)p[i];
      }
    }
    const double mean = sum / (double)cnt;
    const double var = std::max(0.0, sq / (double)cnt - mean * mean);
    const double invstd = 1.0 / std::sqrt(var + (double)eps);
    save_mean[c] = (T)mean;
    save_invstd[c] = (T)invstd;
    if (running_mean) {
      const double unbiased = cnt > 1 ? var * (double)cnt / (double)(cnt - 1) : var;
      running_mean[c] = (T)((1.0 - (double)momentum) * (double)running_mean[c] + (double)momentum * mean);
      running_var[c] = (T)((1.0 - (double)momentum) * (double)running_var[c] + (double)momentum * unbiased);
    }
    const T g = gamma[c], b = beta[c], m = (T)mean, is = (T)invstd;
    for (int64_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * HW;
      T* o = out.data() + (n * C + c) * HW;
#pragma omp simd
      for (int64_t i = 0; i < HW; ++i) o[i] = g * (p[i] - m) * is + b;
    }
  }
}

template <class T>
void bn_fwd_eval(const Tensor<T>& x, const T* gamma, const T* beta, T eps, const T* running_mean,
                 const T* running_var, Tensor<T>& out) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < C; ++c) {
    const T is = (T)(1.0 / std::sqrt((double)running_var[c] + (double)eps));
    const T g = gamma[c], b = beta[c], m = running_mean[c];
    for (int64_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * HW;
      T* o = out.data() + (n * C + c) * HW;
#pragma omp simd
      for (int64_t i = 0; i < HW; ++i) o[i] = g * (p[i] - m) * is + b;
    }
  }
}

template <class T>
void bn_bwd(const Tensor<T>& x, const Tensor<T>& gout, const T* gamma, const T* save_mean,
            const T* save_invstd, Tensor<T>& dx, T* dgamma, T* dbeta) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int64_t cnt = N * HW;
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < C; ++c) {
    const double m = (double)save_mean[c], is = (double)save_invstd[c];
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * HW;
      const T* g = gout.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        const double xhat = ((double)p[i] - m) * is;
        sum_dy += (double)g[i];
        sum_dy_xhat += (double)g[i] * xhat;
      }
    }
    dgamma[c] += (T)sum_dy_xhat;
    dbeta[c] += (T)sum_dy;
    const double k1 = sum_dy / (double)cnt, k2 = sum_dy_xhat / (double)cnt;
    const double gs = (double)gamma[c] * is;
    for (int64_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * HW;
      const T* g = gout.data() + (n * C + c) * HW;
      T* d = dx.data() + (n * C + c) * HW;
#pragma omp simd
      for (int64_t i = 0; i < HW; ++i) {
        const double xhat = ((double)p[i] - m) * is;
        d[i] += (T)(gs * ((double)g[i] - k1 - xhat * k2));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise activations.
// ---------------------------------------------------------------------------

template <class T>
void leaky_relu_fwd(const Tensor<T>& x, T slope, Tensor<T>& out) {
  const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : slope * x[i];
}

template <class T>
void leaky_relu_bwd(const Tensor<T>& x, const Tensor<T>& gout, T slope, Tensor<T>& dx) {
  const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) dx[i] += gout[i] * (x[i] > T(0) ? T(1) : slope);
}

template <class T>
void sigmoid_fwd(const Tensor<T>& x, Tensor<T>& out) {
  const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
}

template <class T>
void sigmoid_bwd(const Tensor<T>& y, const Tensor<T>& gout, Tensor<T>& dx) {
  const int64_t n = y.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) dx[i] += gout[i] * y[i] * (T(1) - y[i]);
}

// ---------------------------------------------------------------------------
// L2 normalisation across the channel dimension at every spatial position.
// norms has shape N x 1 x H x W (stored N*H*W).
// ---------------------------------------------------------------------------

template <class T>
void l2norm_ch_fwd(const Tensor<T>& x, Tensor<T>& out, std::vector<T>& norms) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  norms.resize((size_t)(N * HW));
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      double sq = 0;
      for (int64_t c = 0; c < C; ++c) {
        const double v = (double)x.data()[(n * C + c) * HW + i];
        sq += v * v;
      }
      const T nr = (T)std::sqrt(sq);
      norms[(size_t)(n * HW + i)] = nr;
      const T inv = nr > T(0) ? T(1) / nr : T(0);
      for (int64_t c = 0; c < C; ++c)
        out.data()[(n * C + c) * HW + i] = x.data()[(n * C + c) * HW + i] * inv;
    }
}

template <class T>
void l2norm_ch_bwd(const Tensor<T>& y, const std::vector<T>& norms, const Tensor<T>& gout,
                   Tensor<T>& dx) {
  const int64_t N = y.dim(0), C = y.dim(1), HW = y.dim(2) * y.dim(3);
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      double dot = 0;
      for (int64_t c = 0; c < C; ++c)
        dot += (double)gout.data()[(n * C + c) * HW + i] * (double)y.data()[(n * C + c) * HW + i];
      const T inv = T(1) / norms[(size_t)(n * HW + i)];
      for (int64_t c = 0; c < C; ++c) {
        const int64_t o = (n * C + c) * HW + i;
        dx.data()[o] += (gout.data()[o] - (T)dot * y.data()[o]) * inv;
      }
    }
}

// ---------------------------------------------------------------------------
// vMF activations: out[n,j,i] = exp(sigma * (mu_j . z_i - 1)) for unit-norm
// z_i and mu_j. Computed in log space so sigma=30 cannot overflow.
// ---------------------------------------------------------------------------

template <class T>
void vmf_act_fwd(const Tensor<T>& zn, const Tensor<T>& mu, T sigma, Tensor<T>& out) {
  const int64_t N = zn.dim(0), D = zn.dim(1), HW = zn.dim(2) * zn.dim(3);
  const int64_t J = mu.dim(0);
  for (int64_t n = 0; n < N; ++n)
    gemm_nn(J, HW, D, mu.data(), zn.data() + n * D * HW, out.data() + n * J * HW, false);
  const int64_t total = out.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < total; ++i) out[i] = std::exp(sigma * (out[i] - T(1)));
}

template <class T>
void vmf_act_bwd(const Tensor<T>& zn, const Tensor<T>& mu, T sigma, const Tensor<T>& act,
                 const Tensor<T>& gout, Tensor<T>* dzn, Tensor<T>* dmu, std::vector<T>& buf) {
  const int64_t N = zn.dim(0), D = zn.dim(1), HW = zn.dim(2) * zn.dim(3);
  const int64_t J = mu.dim(0);
  buf.resize((size_t)(J * HW));
  for (int64_t n = 0; n < N; ++n) {
    const T* a = act.data() + n * J * HW;
    const T* g = gout.data() + n * J * HW;
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < J * HW; ++i) buf[(size_t)i] = sigma * a[i] * g[i];
    if (dzn)
      gemm_tn(D, HW, J, mu.data(), buf.data(), dzn->data() + n * D * HW, /*accumulate=*/true);
    if (dmu)
      gemm_nt(J, D, HW, buf.data(), zn.data() + n * D * HW, dmu->data(), /*accumulate=*/true);
  }
}

// ---------------------------------------------------------------------------
// Clustering loss: -mean_i max_j (mu_j . z_i), mean over batch and positions.
// ---------------------------------------------------------------------------

template <class T>
T clu_loss_fwd(const Tensor<T>& mu, const Tensor<T>& zn, Tensor<int32_t>& argmax,
               std::vector<T>& dots_buf) {
  const int64_t N = zn.dim(0), D = zn.dim(1), HW = zn.dim(2) * zn.dim(3);
  const int64_t J = mu.dim(0);
  dots_buf.resize((size_t)(J * HW));
  double total = 0;
  for (int64_t n = 0; n < N; ++n) {
    gemm_nn(J, HW, D, mu.data(), zn.data() + n * D * HW, dots_buf.data(), false);
    double part = 0;
    for (int64_t i = 0; i < HW; ++i) {
      T best = dots_buf[(size_t)i];
      int32_t bj = 0;
      for (int64_t j = 1; j < J; ++j) {
        const T v = dots_buf[(size_t)(j * HW + i)];
        if (v > best) {
          best = v;
          bj = (int32_t)j;
        }
      }
      argmax[n * HW + i] = bj;
      part += (double)best;
    }
    total += part;
  }
  return (T)(-total / (double)(N * HW));
}

template <class T>
void clu_loss_bwd(const Tensor<T>& mu, const Tensor<T>& zn, const Tensor<int32_t>& argmax, T gout,
                  Tensor<T>* dmu, Tensor<T>* dzn) {
  const int64_t N = zn.dim(0), D = zn.dim(1), HW = zn.dim(2) * zn.dim(3);
  const T s = -gout / (T)(N * HW);
  if (dmu) {
    // positions sharing an argmax accumulate serially in index order
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        const int32_t j = argmax[n * HW + i];
        for (int64_t d = 0; d < D; ++d)
          dmu->at2(j, d) += s * zn.data()[(n * D + d) * HW + i];
      }
  }
  if (dzn) {
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        const int32_t j = argmax[n * HW + i];
        for (int64_t d = 0; d < D; ++d)
          dzn->data()[(n * D + d) * HW + i] += s * mu.at2(j, d);
      }
  }
}

// ---------------------------------------------------------------------------
// Kernel combination for recomposition: out[n,:,i] = mu^T a[n,:,i]
// with a already normalised across J. out is NxDxHxW.
// ---------------------------------------------------------------------------

template <class T>
void combine_fwd(const Tensor<T>& a, const Tensor<T>& mu, Tensor<T>& out) {
  const int64_t N = a.dim(0), J = a.dim(1), HW = a.dim(2) * a.dim(3);
  const int64_t D = mu.dim(1);
  for (int64_t n = 0; n < N; ++n)
    gemm_tn(D, HW, J, mu.data(), a.data() + n * J * HW, out.data() + n * D * HW, false);
}

template <class T>
void combine_bwd(const Tensor<T>& a, const Tensor<T>& mu, const Tensor<T>& gout, Tensor<T>* da,
                 Tensor<T>* dmu) {
  const int64_t N = a.dim(0), J = a.dim(1), HW = a.dim(2) * a.dim(3);
  const int64_t D = mu.dim(1);
  for (int64_t n = 0; n < N; ++n) {
    if (da)
      gemm_nn(J, HW, D, mu.data(), gout.data() + n * D * HW, da->data() + n * J * HW,
              /*accumulate=*/true);
    if (dmu)
      gemm_nt(J, D, HW, a.data() + n * J * HW, gout.data() + n * D * HW, dmu->data(),
              /*accumulate=*/true);
  }
}

// ---------------------------------------------------------------------------
// Small elementwise helpers shared by the autodiff layer.
// ---------------------------------------------------------------------------

template <class T>
void axpy(const Tensor<T>& x, T alpha, Tensor<T>& y) {
  const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void add_fwd(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <class T>
void mul_fwd(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
void mul_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] += a[i] * b[i];
}

// Fixed-order partial reduction: deterministic at any thread count.
template <class T>
T sum_all(const Tensor<T>& x) {
  const int64_t n = x.numel();
  const int64_t nblk = (n + 4095) / 4096;
  std::vector<double> partial((size_t)nblk, 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < nblk; ++b) {
    double acc = 0;
    const int64_t end = std::min(n, (b + 1) * 4096);
    for (int64_t i = b * 4096; i < end; ++i) acc += (double)x[i];
    partial[(size_t)b] = acc;
  }
  double total = 0;
  for (double p : partial) total += p;
  return (T)total;
}

}  // namespace vmfcomp::kern
