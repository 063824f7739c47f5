#pragma once

// von-Mises-Fisher kernel bank and the operations around it: feature
// normalisation, kernel activations, clustering loss, recomposition of
// features from activations, and re-projection of the kernels to the unit
// sphere. Plain value-level functions live here; the differentiable versions
// are thin wrappers over the ops in autodiff.hpp.

#include <cmath>
#include <cstdint>
#include <string>

#include "vmfcomp/autodiff.hpp"
#include "vmfcomp/errors.hpp"
#include "vmfcomp/kernels.hpp"
#include "vmfcomp/rng.hpp"
#include "vmfcomp/tensor.hpp"

namespace vmfcomp {

inline constexpr double kEpsNorm = 1e-8;       // zero-vector guard
inline constexpr double kUnitNormTol = 1e-6;   // kernel/feature unit-norm tolerance

// J learnable unit-norm mean directions plus the shared concentration.
// C(sigma) is fixed to e^sigma, which bounds activations in (0, 1] with the
// maximum reached at perfect alignment; activations are evaluated in log
// space so large sigma cannot overflow.
template <class T>
struct VMFKernelBank {
  Tensor<T> mus;  // J x D
  T sigma = T(30);
  T norm_const = T(std::exp(30.0));

  int64_t num_kernels() const { return mus.dim(0); }
  int64_t feature_dim() const { return mus.dim(1); }

  static VMFKernelBank random(int64_t num_kernels, int64_t feature_dim, T sigma, uint64_t seed) {
    VMFKernelBank b;
    b.mus = Tensor<T>({num_kernels, feature_dim});
    b.sigma = sigma;
    b.norm_const = (T)std::exp((double)sigma);
    auto eng = make_engine(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int64_t i = 0; i < b.mus.numel(); ++i) b.mus[i] = (T)nd(eng);
    project_kernels_inplace(b);
    return b;
  }

  void validate() const {
    if (mus.ndim() != 2 || num_kernels() < 1 || feature_dim() < 2)
      throw DimensionMismatch("kernel bank needs J >= 1 vectors of dimension D >= 2, got " +
                              shape_str(mus.shape()));
    if (!(sigma > T(0)) || !(norm_const > T(0)))
      throw DimensionMismatch("kernel bank needs sigma > 0 and C(sigma) > 0");
    for (int64_t j = 0; j < num_kernels(); ++j) {
      double sq = 0;
      for (int64_t d = 0; d < feature_dim(); ++d) sq += (double)mus.at2(j, d) * (double)mus.at2(j, d);
      if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTol)
        throw ZeroKernel("kernel " + std::to_string(j) + " is not unit norm: |mu| = " +
                         std::to_string(std::sqrt(sq)));
    }
  }

  friend void project_kernels_inplace(VMFKernelBank& b) {
    for (int64_t j = 0; j < b.num_kernels(); ++j) {
      double sq = 0;
      for (int64_t d = 0; d < b.feature_dim(); ++d)
        sq += (double)b.mus.at2(j, d) * (double)b.mus.at2(j, d);
      const double nr = std::sqrt(sq);
      if (nr <= kEpsNorm)
        throw ZeroKernel("kernel " + std::to_string(j) + " has near-zero norm " +
                         std::to_string(nr));
      const T inv = (T)(1.0 / nr);
      for (int64_t d = 0; d < b.feature_dim(); ++d) b.mus.at2(j, d) *= inv;
    }
  }
};

// Encoder output Z, NCHW with C = D. `normalized` marks that every spatial
// feature vector is unit norm.
template <class T>
struct FeatureMap {
  Tensor<T> values;  // N x D x H x W
  bool normalized = false;

  int64_t feature_dim() const { return values.dim(1); }
};

// Per-position kernel activations, NCHW with C = J; entries in (0, 1].
template <class T>
struct VMFActivationMap {
  Tensor<T> values;  // N x J x H x W

  int64_t num_kernels() const { return values.dim(1); }
};

// ---------------------------------------------------------------------------
// Operations (value level)
// ---------------------------------------------------------------------------

template <class T>
FeatureMap<T> normalize_features(const FeatureMap<T>& z) {
  if (z.normalized) throw std::invalid_argument("normalize_features: map is already normalized");
  FeatureMap<T> out;
  out.values = Tensor<T>(z.values.shape());
  std::vector<T> norms;
  kern::l2norm_ch_fwd(z.values, out.values, norms);
  for (size_t i = 0; i < norms.size(); ++i)
    if (!((double)norms[i] > kEpsNorm))
      throw ZeroFeatureVector("feature vector at flat position " + std::to_string(i) +
                              " has norm " + std::to_string((double)norms[i]));
  out.normalized = true;
  return out;
}

template <class T>
VMFActivationMap<T> vmf_activations(const FeatureMap<T>& zn, const VMFKernelBank<T>& bank) {
  if (!zn.normalized) throw std::invalid_argument("vmf_activations: features must be normalized");
  bank.validate();
  if (zn.feature_dim() != bank.feature_dim())
    throw DimensionMismatch("vmf_activations: D=" + std::to_string(zn.feature_dim()) +
                            " features vs D=" + std::to_string(bank.feature_dim()) + " kernels");
  VMFActivationMap<T> out;
  out.values = Tensor<T>(
      {zn.values.dim(0), bank.num_kernels(), zn.values.dim(2), zn.values.dim(3)});
  kern::vmf_act_fwd(zn.values, bank.mus, bank.sigma, out.values);
  return out;
}

template <class T>
T clustering_loss(const VMFKernelBank<T>& bank, const FeatureMap<T>& zn) {
  if (!zn.normalized) throw std::invalid_argument("clustering_loss: features must be normalized");
  bank.validate();
  if (zn.feature_dim() != bank.feature_dim())
    throw DimensionMismatch("clustering_loss: feature dim mismatch");
  const int64_t n = zn.values.dim(0) * zn.values.dim(2) * zn.values.dim(3);
  Tensor<int32_t> argmax({n});
  std::vector<T> dots;
  return kern::clu_loss_fwd(bank.mus, zn.values, argmax, dots);
}

// Recomposition: L2-normalise the activation vector across J at each position
// and combine the kernels with those coefficients.
template <class T>
FeatureMap<T> recompose(const VMFActivationMap<T>& act, const VMFKernelBank<T>& bank) {
  bank.validate();
  if (act.num_kernels() != bank.num_kernels())
    throw DimensionMismatch("recompose: J=" + std::to_string(act.num_kernels()) +
                            " activations vs J=" + std::to_string(bank.num_kernels()) + " kernels");
  Tensor<T> an(act.values.shape());
  std::vector<T> norms;
  kern::l2norm_ch_fwd(act.values, an, norms);
  for (size_t i = 0; i < norms.size(); ++i)
    if (!((double)norms[i] > kEpsNorm))
      throw DegenerateActivation("all-zero activation vector at flat position " +
                                 std::to_string(i));
  FeatureMap<T> out;
  out.values =
      Tensor<T>({act.values.dim(0), bank.feature_dim(), act.values.dim(2), act.values.dim(3)});
  kern::combine_fwd(an, bank.mus, out.values);
  return out;
}

template <class T>
VMFKernelBank<T> project_kernels(const VMFKernelBank<T>& bank) {
  VMFKernelBank<T> out = bank;
  project_kernels_inplace(out);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable versions used by the trainers
// ---------------------------------------------------------------------------

template <class T>
ad::Var<T> normalize_features_ad(ad::Var<T> z) {
  T min_norm = T(0);
  ad::Var<T> out = ad::l2norm_ch(z, &min_norm);
  if (!((double)min_norm > kEpsNorm))
    throw ZeroFeatureVector("feature map contains a vector with norm " +
                            std::to_string((double)min_norm));
  return out;
}

template <class T>
ad::Var<T> recompose_ad(ad::Var<T> act, ad::Var<T> mu) {
  T min_norm = T(0);
  ad::Var<T> an = ad::l2norm_ch(act, &min_norm);
  if (!((double)min_norm > kEpsNorm))
    throw DegenerateActivation("activation map contains an all-zero vector");
  return ad::combine_kernels(an, mu);
}

}  // namespace vmfcomp
