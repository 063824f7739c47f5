#pragma once

// The four learnable blocks: U-Net style encoder F (truncated before the last
// upsampling), reconstructor R, segmentation head T, and the weak-label
// classifier. Modules own named parameter leaves; a forward pass builds the
// autodiff graph. Copying a module shares its parameters, so independent
// twins must be constructed separately.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vmfcomp/autodiff.hpp"
#include "vmfcomp/errors.hpp"
#include "vmfcomp/rng.hpp"
#include "vmfcomp/tensor.hpp"

namespace vmfcomp {

struct ArchitectureConfig {
  int64_t height = 64;
  int64_t width = 64;
  int64_t feature_stride = 2;    // s, power of two
  int64_t feature_channels = 64; // D
  int64_t num_kernels = 12;      // J
  int64_t num_classes = 3;       // K
  int64_t classifier_hidden = 16;

  int64_t pool_levels() const {  // encoder pools; one decoder stage returns to stride s
    int64_t l = 1, s = feature_stride;
    while (s > 1) {
      s >>= 1;
      ++l;
    }
    return l;
  }
  // Emits a warning on stderr when feature_channels < num_kernels.
  void validate() const;
};

template <class T>
using NamedParam = std::pair<std::string, ad::Var<T>>;
template <class T>
using NamedBuffer = std::pair<std::string, std::shared_ptr<Tensor<T>>>;

template <class T>
struct ParamList {
  std::vector<NamedParam<T>> params;
  std::vector<NamedBuffer<T>> buffers;

  void add(const std::string& name, ad::Var<T> v) { params.emplace_back(name, std::move(v)); }
  void add_buffer(const std::string& name, std::shared_ptr<Tensor<T>> t) {
    buffers.emplace_back(name, std::move(t));
  }
  void merge(const ParamList& o) {
    params.insert(params.end(), o.params.begin(), o.params.end());
    buffers.insert(buffers.end(), o.buffers.begin(), o.buffers.end());
  }
  int64_t count() const {
    int64_t c = 0;
    for (const auto& [n, v] : params) c += v.value().numel();
    return c;
  }
};

namespace nn {

template <class T>
Tensor<T> he_normal(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / (double)fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = (T)nd(rng);
  return t;
}

template <class T>
struct Conv2d {
  ad::Var<T> w, b;
  int64_t stride = 1, pad = 1;

  static Conv2d create(int64_t ic, int64_t oc, int64_t k, int64_t stride, int64_t pad,
                       std::mt19937_64& rng) {
    Conv2d m;
    m.w = ad::Var<T>::leaf(he_normal<T>({oc, ic, k, k}, ic * k * k, rng), true);
    m.b = ad::Var<T>::leaf(Tensor<T>({oc}), true);
    m.stride = stride;
    m.pad = pad;
    return m;
  }
  ad::Var<T> forward(ad::Var<T> x) const { return ad::conv2d(x, w, b, stride, pad); }
  void collect(const std::string& p, ParamList<T>& out) const {
    out.add(p + ".w", w);
    out.add(p + ".b", b);
  }
};

template <class T>
struct ConvTr2 {
  ad::Var<T> w, b;

  static ConvTr2 create(int64_t ic, int64_t oc, std::mt19937_64& rng) {
    ConvTr2 m;
    m.w = ad::Var<T>::leaf(he_normal<T>({ic, oc, 2, 2}, ic * 4, rng), true);
    m.b = ad::Var<T>::leaf(Tensor<T>({oc}), true);
    return m;
  }
  ad::Var<T> forward(ad::Var<T> x) const { return ad::convtr2(x, w, b); }
  void collect(const std::string& p, ParamList<T>& out) const {
    out.add(p + ".w", w);
    out.add(p + ".b", b);
  }
};

template <class T>
struct BatchNorm2d {
  ad::Var<T> gamma, beta;
  std::shared_ptr<Tensor<T>> running_mean, running_var;

  static BatchNorm2d create(int64_t c) {
    BatchNorm2d m;
    m.gamma = ad::Var<T>::leaf(Tensor<T>::ones({c}), true);
    m.beta = ad::Var<T>::leaf(Tensor<T>({c}), true);
    m.running_mean = std::make_shared<Tensor<T>>(Shape{c});
    m.running_var = std::make_shared<Tensor<T>>(Tensor<T>::ones({c}));
    return m;
  }
  ad::Var<T> forward(ad::Var<T> x, bool training) const {
    ad::BNBuffers<T> buf{*running_mean, *running_var};
    ad::Var<T> y = ad::batch_norm(x, gamma, beta, buf, training);
    if (training) {  // write the updated running stats back
      *running_mean = buf.running_mean;
      *running_var = buf.running_var;
    }
    return y;
  }
  void collect(const std::string& p, ParamList<T>& out) const {
    out.add(p + ".gamma", gamma);
    out.add(p + ".beta", beta);
    out.add_buffer(p + ".running_mean", running_mean);
    out.add_buffer(p + ".running_var", running_var);
  }
};

template <class T>
struct Linear {
  ad::Var<T> w, b;

  static Linear create(int64_t in, int64_t out, std::mt19937_64& rng) {
    Linear m;
    m.w = ad::Var<T>::leaf(he_normal<T>({in, out}, in, rng), true);
    m.b = ad::Var<T>::leaf(Tensor<T>({out}), true);
    return m;
  }
  ad::Var<T> forward(ad::Var<T> x) const { return ad::linear(x, w, b); }
  void collect(const std::string& p, ParamList<T>& out) const {
    out.add(p + ".w", w);
    out.add(p + ".b", b);
  }
};

// conv3x3-BN-ReLU twice
template <class T>
struct DoubleConv {
  Conv2d<T> c1, c2;
  BatchNorm2d<T> b1, b2;

  static DoubleConv create(int64_t ic, int64_t oc, std::mt19937_64& rng) {
    DoubleConv m;
    m.c1 = Conv2d<T>::create(ic, oc, 3, 1, 1, rng);
    m.b1 = BatchNorm2d<T>::create(oc);
    m.c2 = Conv2d<T>::create(oc, oc, 3, 1, 1, rng);
    m.b2 = BatchNorm2d<T>::create(oc);
    return m;
  }
  ad::Var<T> forward(ad::Var<T> x, bool training) const {
    x = ad::relu(b1.forward(c1.forward(x), training));
    return ad::relu(b2.forward(c2.forward(x), training));
  }
  void collect(const std::string& p, ParamList<T>& out) const {
    c1.collect(p + ".c1", out);
    b1.collect(p + ".b1", out);
    c2.collect(p + ".c2", out);
    b2.collect(p + ".b2", out);
  }
};

}  // namespace nn

// ---------------------------------------------------------------------------
// Encoder: U-Net truncated before the last upsampling; emits stride-s
// features with D channels plus the skip activations the full net needs.
// Widths double per level and end at 2D in the bottleneck.
// ---------------------------------------------------------------------------

template <class T>
struct EncoderOutput {
  ad::Var<T> z;                     // N x D x H/s x W/s
  std::vector<ad::Var<T>> skips;    // pre-pool activations, full res first
};

template <class T>
struct Encoder {
  ArchitectureConfig cfg;
  std::vector<nn::DoubleConv<T>> enc;
  nn::DoubleConv<T> bott;
  nn::ConvTr2<T> up;
  nn::DoubleConv<T> dec;

  static Encoder create(const ArchitectureConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    Encoder e;
    e.cfg = cfg;
    const int64_t L = cfg.pool_levels();
    int64_t ic = 1;
    for (int64_t i = 0; i < L; ++i) {
      const int64_t w = cfg.feature_channels >> (L - 1 - i);
      e.enc.push_back(nn::DoubleConv<T>::create(ic, w, rng));
      ic = w;
    }
    e.bott = nn::DoubleConv<T>::create(cfg.feature_channels, 2 * cfg.feature_channels, rng);
    e.up = nn::ConvTr2<T>::create(2 * cfg.feature_channels, cfg.feature_channels, rng);
    e.dec = nn::DoubleConv<T>::create(2 * cfg.feature_channels, cfg.feature_channels, rng);
    return e;
  }

  EncoderOutput<T> forward(ad::Var<T> x, bool training) const {
    const auto& s = x.value().shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != cfg.height || s[3] != cfg.width)
      throw ShapeMismatch("encoder: expected Nx1x" + std::to_string(cfg.height) + "x" +
                          std::to_string(cfg.width) + " input, got " + shape_str(s));
    EncoderOutput<T> out;
    ad::Var<T> h = x;
    for (const auto& stage : enc) {
      h = stage.forward(h, training);
      out.skips.push_back(h);
      h = ad::maxpool2(h);
    }
    h = bott.forward(h, training);
    h = up.forward(h);
    h = ad::concat_ch(h, out.skips.back());
    out.z = dec.forward(h, training);
    return out;
  }

  void collect(const std::string& p, ParamList<T>& out) const {
    for (size_t i = 0; i < enc.size(); ++i) enc[i].collect(p + ".enc" + std::to_string(i), out);
    bott.collect(p + ".bott", out);
    up.collect(p + ".up", out);
    dec.collect(p + ".dec", out);
  }
};

// Full U-Net for reconstruction pre-training: the encoder plus the remaining
// upsampling stages and the 1x1 output layer.
template <class T>
struct FullUNet {
  Encoder<T> encoder;
  std::vector<nn::ConvTr2<T>> ups;
  std::vector<nn::DoubleConv<T>> decs;
  nn::Conv2d<T> out_conv;

  static FullUNet create(const ArchitectureConfig& cfg, std::mt19937_64& rng) {
    FullUNet u;
    u.encoder = Encoder<T>::create(cfg, rng);
    const int64_t L = cfg.pool_levels();
    for (int64_t j = L - 2; j >= 0; --j) {
      const int64_t wj = cfg.feature_channels >> (L - 1 - j);
      u.ups.push_back(nn::ConvTr2<T>::create(2 * wj, wj, rng));
      u.decs.push_back(nn::DoubleConv<T>::create(2 * wj, wj, rng));
    }
    const int64_t w0 = cfg.feature_channels >> (L - 1);
    u.out_conv = nn::Conv2d<T>::create(w0, 1, 1, 1, 0, rng);
    return u;
  }

  ad::Var<T> forward(ad::Var<T> x, bool training) const {
    EncoderOutput<T> eo = encoder.forward(x, training);
    ad::Var<T> h = eo.z;
    const int64_t L = (int64_t)eo.skips.size();
    for (size_t j = 0; j < ups.size(); ++j) {
      h = ups[j].forward(h);
      h = ad::concat_ch(h, eo.skips[(size_t)(L - 2 - (int64_t)j)]);
      h = decs[j].forward(h, training);
    }
    return out_conv.forward(h);
  }

  void collect(const std::string& p, ParamList<T>& out) const {
    encoder.collect(p + ".encoder", out);
    for (size_t j = 0; j < ups.size(); ++j) {
      ups[j].collect(p + ".up" + std::to_string(j), out);
      decs[j].collect(p + ".dec" + std::to_string(j), out);
    }
    out_conv.collect(p + ".out", out);
  }
};

// ---------------------------------------------------------------------------
// Reconstructor / segmentation head share one topology: process, upsample to
// full resolution, process, project. The segmentation head applies a sigmoid;
// the reconstructor output stays linear.
// ---------------------------------------------------------------------------

template <class T>
struct UpsampleHead {
  ArchitectureConfig cfg;
  int64_t in_channels = 0;
  nn::DoubleConv<T> pre;
  std::vector<nn::ConvTr2<T>> ups;
  std::vector<nn::DoubleConv<T>> mids;
  nn::Conv2d<T> out_conv;
  bool apply_sigmoid = false;

  static UpsampleHead create(const ArchitectureConfig& cfg, int64_t in_ch, int64_t out_ch,
                             bool sigmoid, std::mt19937_64& rng) {
    UpsampleHead h;
    h.cfg = cfg;
    h.in_channels = in_ch;
    h.apply_sigmoid = sigmoid;
    const int64_t w = std::max<int64_t>(16, cfg.feature_channels / 2);
    h.pre = nn::DoubleConv<T>::create(in_ch, w, rng);
    for (int64_t s = cfg.feature_stride; s > 1; s >>= 1) {
      h.ups.push_back(nn::ConvTr2<T>::create(w, w, rng));
      h.mids.push_back(nn::DoubleConv<T>::create(w, w, rng));
    }
    h.out_conv = nn::Conv2d<T>::create(w, out_ch, 1, 1, 0, rng);
    return h;
  }

  ad::Var<T> forward(ad::Var<T> x, bool training) const {
    const auto& s = x.value().shape();
    if (s[1] != in_channels || s[2] != cfg.height / cfg.feature_stride ||
        s[3] != cfg.width / cfg.feature_stride)
      throw ShapeMismatch("head: expected Nx" + std::to_string(in_channels) + "x" +
                          std::to_string(cfg.height / cfg.feature_stride) + "x" +
                          std::to_string(cfg.width / cfg.feature_stride) + ", got " + shape_str(s));
    ad::Var<T> h = pre.forward(x, training);
    for (size_t j = 0; j < ups.size(); ++j) {
      h = ups[j].forward(h);
      h = mids[j].forward(h, training);
    }
    h = out_conv.forward(h);
    return apply_sigmoid ? ad::sigmoid(h) : h;
  }

  void collect(const std::string& p, ParamList<T>& out) const {
    pre.collect(p + ".pre", out);
    for (size_t j = 0; j < ups.size(); ++j) {
      ups[j].collect(p + ".up" + std::to_string(j), out);
      mids[j].collect(p + ".mid" + std::to_string(j), out);
    }
    out_conv.collect(p + ".out", out);
  }
};

template <class T>
UpsampleHead<T> make_reconstructor(const ArchitectureConfig& cfg, std::mt19937_64& rng) {
  return UpsampleHead<T>::create(cfg, cfg.feature_channels, 1, /*sigmoid=*/false, rng);
}

template <class T>
UpsampleHead<T> make_seg_head(const ArchitectureConfig& cfg, std::mt19937_64& rng) {
  return UpsampleHead<T>::create(cfg, cfg.num_kernels, cfg.num_classes, /*sigmoid=*/true, rng);
}

// ---------------------------------------------------------------------------
// Weak-label classifier: CONV-BN-LeakyReLU stacks (kernel 4, stride 2,
// padding 1) down to a small grid, then two fully connected layers through a
// `classifier_hidden`-dim bottleneck, sigmoid output.
// ---------------------------------------------------------------------------

template <class T>
struct Classifier {
  int64_t in_h = 0, in_w = 0, in_ch = 0, out_dim = 0;
  std::vector<nn::Conv2d<T>> convs;
  std::vector<nn::BatchNorm2d<T>> bns;
  nn::Linear<T> fc1, fc2;
  int64_t flat_dim = 0;

  static Classifier create(int64_t in_ch, int64_t in_h, int64_t in_w, int64_t hidden,
                           int64_t out_dim, std::mt19937_64& rng) {
    Classifier c;
    c.in_h = in_h;
    c.in_w = in_w;
    c.in_ch = in_ch;
    c.out_dim = out_dim;
    static const int64_t widths[5] = {16, 32, 64, 64, 64};
    int64_t layers = 0, m = std::min(in_h, in_w);
    while (layers < 5 && m >= 2 && m % 2 == 0) {
      ++layers;
      m /= 2;
    }
    int64_t ic = in_ch, h = in_h, w = in_w;
    for (int64_t i = 0; i < layers; ++i) {
      c.convs.push_back(nn::Conv2d<T>::create(ic, widths[i], 4, 2, 1, rng));
      c.bns.push_back(nn::BatchNorm2d<T>::create(widths[i]));
      ic = widths[i];
      h /= 2;
      w /= 2;
    }
    c.flat_dim = ic * h * w;
    c.fc1 = nn::Linear<T>::create(c.flat_dim, hidden, rng);
    c.fc2 = nn::Linear<T>::create(hidden, out_dim, rng);
    return c;
  }

  ad::Var<T> forward(ad::Var<T> x, bool training) const {
    const auto& s = x.value().shape();
    if (s[1] != in_ch || s[2] != in_h || s[3] != in_w)
      throw ShapeMismatch("classifier: expected Nx" + std::to_string(in_ch) + "x" +
                          std::to_string(in_h) + "x" + std::to_string(in_w) + ", got " +
                          shape_str(s));
    ad::Var<T> h = x;
    for (size_t i = 0; i < convs.size(); ++i)
      h = ad::leaky_relu(bns[i].forward(convs[i].forward(h), training), T(0.01));
    h = ad::Var<T>::make(
        h.value().reshaped({s[0], flat_dim}), {h},
        [hn = h.node()](ad::Node<T>& self) {
          if (hn->requires_grad)
            kern::axpy(self.grad.reshaped(hn->value.shape()), T(1), hn->grad_ref());
        });
    h = ad::leaky_relu(fc1.forward(h), T(0.01));
    return ad::sigmoid(fc2.forward(h));
  }

  void collect(const std::string& p, ParamList<T>& out) const {
    for (size_t i = 0; i < convs.size(); ++i) {
      convs[i].collect(p + ".conv" + std::to_string(i), out);
      bns[i].collect(p + ".bn" + std::to_string(i), out);
    }
    fc1.collect(p + ".fc1", out);
    fc2.collect(p + ".fc2", out);
  }
};

}  // namespace vmfcomp
