#pragma once

// Neural building blocks over (batch, channels, frames, bins) feature maps:
// 2-D convolution, batch normalisation, the BN -> ReLU -> conv composite
// layer, 2x2 average pooling and 2x2 stride-2 transposed convolution.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mmdense/autodiff.hpp"

namespace mmdense {

enum class Mode { train, eval };

struct ConvVars {
  Var kernel;  // (out_ch, in_ch, kt, kf)
  Var bias;    // (out_ch)
};

struct BatchNormVars {
  Var gamma, beta;
};

template <class T>
struct Conv2dParams {
  Tensor<T> kernel;
  Tensor<T> bias;

  std::size_t out_ch() const { return kernel.dim(0); }
  std::size_t in_ch() const { return kernel.dim(1); }

  /// Uniform He-style fan-in initialisation: U(-b, b), b = sqrt(6 / fan_in).
  template <class Rng>
  static Conv2dParams he_uniform(std::size_t out_ch, std::size_t in_ch, std::size_t kt, std::size_t kf, Rng& rng) {
    const T bound = T(std::sqrt(6.0 / double(in_ch * kt * kf)));
    return {Tensor<T>::uniform({out_ch, in_ch, kt, kf}, -bound, bound, rng), Tensor<T>({out_ch}, T(0))};
  }

  ConvVars bind(Graph<T>& g, const std::string& prefix) const {
    return {g.parameter(kernel, prefix + ".kernel"), g.parameter(bias, prefix + ".bias")};
  }
};

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-5);

  static BatchNormState fresh(std::size_t ch, T momentum = T(0.9), T epsilon = T(1e-5)) {
    return {Tensor<T>({ch}, T(0)), Tensor<T>({ch}, T(1)), momentum, epsilon};
  }
};

template <class T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> state;

  static BatchNormParams fresh(std::size_t ch, T momentum = T(0.9), T epsilon = T(1e-5)) {
    return {Tensor<T>({ch}, T(1)), Tensor<T>({ch}, T(0)), BatchNormState<T>::fresh(ch, momentum, epsilon)};
  }

  BatchNormVars bind(Graph<T>& g, const std::string& prefix) const {
    return {g.parameter(gamma, prefix + ".gamma"), g.parameter(beta, prefix + ".beta")};
  }
};

template <class T>
struct CompositeLayerParams {
  BatchNormParams<T> bn;
  Conv2dParams<T> conv;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

inline void require_feature_map(const Shape& s, const char* op) {
  MMDENSE_REQUIRE(s.size() == 4, Errc::shape_mismatch,
          std::string(op) + ": expected (batch, channels, frames, bins), got " + to_string(s));
}

// Geometry of a stride-1 "same" convolution laid out for per-tap GEMMs.
//
// The input is copied into a channel-major buffer where every (batch, channel)
// plane is zero-padded to (frames + kt - 1) x (bins + kf - 1). With that
// layout, the contribution of kernel tap (dt, df) to every output position is
// one contiguous column range of the buffer shifted by dt * Fp + df, so each
// tap is a single (out x in) * (in x cols) product. Output columns with
// f >= bins are scratch and discarded.
struct ConvGeometry {
  std::size_t batch, frames, bins, kt, kf;
  std::size_t pad_t, pad_f;  // leading pads; trailing side gets the remainder
  std::size_t fp, plane, cols, row_len;

  ConvGeometry(std::size_t b, std::size_t t, std::size_t f, std::size_t kt_, std::size_t kf_)
      : batch(b), frames(t), bins(f), kt(kt_), kf(kf_) {
    pad_t = (kt - 1) / 2;
    pad_f = (kf - 1) / 2;
    fp = bins + kf - 1;
    plane = (frames + kt - 1) * fp;
    cols = batch * plane;
    row_len = cols + (kt - 1) * fp + (kf - 1);
  }
  std::size_t tap_offset(std::size_t dt, std::size_t df) const { return dt * fp + df; }
  std::size_t padded_index(std::size_t b, std::size_t t, std::size_t f) const {
    return b * plane + (t + pad_t) * fp + f + pad_f;
  }
  std::size_t out_index(std::size_t b, std::size_t t, std::size_t f) const { return b * plane + t * fp + f; }
};

constexpr std::size_t kConvChunk = 4096;

// (out, in) weight matrix of each tap, contiguous.
template <class T>
std::vector<RowMat<T>> split_taps(const Tensor<T>& k) {
  const std::size_t O = k.dim(0), I = k.dim(1), kt = k.dim(2), kf = k.dim(3);
  std::vector<RowMat<T>> taps(kt * kf, RowMat<T>(O, I));
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t dt = 0; dt < kt; ++dt)
        for (std::size_t df = 0; df < kf; ++df) taps[dt * kf + df](o, i) = k.at4(o, i, dt, df);
  return taps;
}

}  // namespace detail

/// Stride-1 convolution with "same" zero padding: (kt-1)/2 leading rows and
/// (kf-1)/2 leading bins; even kernels put the extra pad on the trailing
/// (later-frame, higher-frequency) side.
template <class T>
Var conv2d(Graph<T>& g, Var x, ConvVars p) {
  using namespace detail;
  const auto& xv = g.value(x);
  const auto& kv = g.value(p.kernel);
  const auto& bv = g.value(p.bias);
  require_feature_map(xv.shape(), "conv2d");
  MMDENSE_REQUIRE(kv.rank() == 4, Errc::shape_mismatch, "conv2d: kernel must be (out, in, kt, kf), got " + to_string(kv.shape()));
  const std::size_t B = xv.dim(0), I = xv.dim(1), Tn = xv.dim(2), F = xv.dim(3);
  const std::size_t O = kv.dim(0);
  MMDENSE_REQUIRE(kv.dim(1) == I, Errc::shape_mismatch,
          "conv2d: input has " + std::to_string(I) + " channels but kernel expects " + std::to_string(kv.dim(1)));
  MMDENSE_REQUIRE(bv.shape() == Shape{O}, Errc::shape_mismatch, "conv2d: bias shape " + to_string(bv.shape()));

  auto geo = std::make_shared<ConvGeometry>(B, Tn, F, kv.dim(2), kv.dim(3));
  // Padded input is kept alive for the backward pass.
  auto xp = std::make_shared<RowMat<T>>(RowMat<T>::Zero(I, geo->row_len));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t t = 0; t < Tn; ++t)
        std::copy_n(&xv.at4(b, i, t, 0), F, xp->data() + i * geo->row_len + geo->padded_index(b, t, 0));

  const auto taps = split_taps(kv);
  RowMat<T> yw = RowMat<T>::Zero(O, geo->cols);
  for (std::size_t c0 = 0; c0 < geo->cols; c0 += kConvChunk) {
    const std::size_t n = std::min(kConvChunk, geo->cols - c0);
    auto ychunk = yw.middleCols(c0, n);
    for (std::size_t dt = 0; dt < geo->kt; ++dt)
      for (std::size_t df = 0; df < geo->kf; ++df) {
        ConstStridedMap<T> xs(xp->data() + geo->tap_offset(dt, df) + c0, Eigen::Index(I), Eigen::Index(n),
                              Eigen::OuterStride<>(Eigen::Index(geo->row_len)));
        ychunk.noalias() += taps[dt * geo->kf + df] * xs;
      }
  }
  auto out = Tensor<T>::uninitialized({B, O, Tn, F});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      const T bias = bv[o];
      for (std::size_t t = 0; t < Tn; ++t) {
        const T* src = yw.data() + o * geo->cols + geo->out_index(b, t, 0);
        T* dst = &out.at4(b, o, t, 0);
        for (std::size_t f = 0; f < F; ++f) dst[f] = src[f] + bias;
      }
    }

  return g.record("conv2d", {x, p.kernel, p.bias}, std::move(out), [geo, xp](BackwardContext<T>& c) {
    const auto& go = c.grad_out();
    const auto& kv = c.input(1);
    const std::size_t B = geo->batch, Tn = geo->frames, F = geo->bins;
    const std::size_t O = kv.dim(0), I = kv.dim(1);
    RowMat<T> dyw = RowMat<T>::Zero(O, geo->cols);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t t = 0; t < Tn; ++t)
          std::copy_n(&go.at4(b, o, t, 0), F, dyw.data() + o * geo->cols + geo->out_index(b, t, 0));

    if (c.needs_grad(2)) {
      auto& gb = c.input_grad(2);
      for (std::size_t o = 0; o < O; ++o) {
        T s = 0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < Tn; ++t)
            for (std::size_t f = 0; f < F; ++f) s += go.at4(b, o, t, f);
        gb[o] += s;
      }
    }
    const auto taps = split_taps(kv);
    const std::size_t ntaps = taps.size();
    std::vector<RowMat<T>> dtaps;
    if (c.needs_grad(1)) dtaps.assign(ntaps, RowMat<T>::Zero(O, I));
    RowMat<T> dxp;
    if (c.needs_grad(0)) dxp = RowMat<T>::Zero(I, geo->row_len);

    for (std::size_t c0 = 0; c0 < geo->cols; c0 += kConvChunk) {
      const std::size_t n = std::min(kConvChunk, geo->cols - c0);
      auto dychunk = dyw.middleCols(c0, n);
      for (std::size_t dt = 0; dt < geo->kt; ++dt)
        for (std::size_t df = 0; df < geo->kf; ++df) {
          const std::size_t tap = dt * geo->kf + df;
          const std::size_t off = geo->tap_offset(dt, df) + c0;
          if (!dtaps.empty()) {
            ConstStridedMap<T> xs(xp->data() + off, Eigen::Index(I), Eigen::Index(n),
                                  Eigen::OuterStride<>(Eigen::Index(geo->row_len)));
            dtaps[tap].noalias() += dychunk * xs.transpose();
          }
          if (dxp.size() != 0) {
            StridedMap<T> dxs(dxp.data() + off, Eigen::Index(I), Eigen::Index(n),
                              Eigen::OuterStride<>(Eigen::Index(geo->row_len)));
            dxs.noalias() += taps[tap].transpose() * dychunk;
          }
        }
    }
    if (!dtaps.empty()) {
      auto& gk = c.input_grad(1);
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < I; ++i)
          for (std::size_t dt = 0; dt < geo->kt; ++dt)
            for (std::size_t df = 0; df < geo->kf; ++df) gk.at4(o, i, dt, df) += dtaps[dt * geo->kf + df](o, i);
    }
    if (dxp.size() != 0) {
      auto& gx = c.input_grad(0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < I; ++i)
          for (std::size_t t = 0; t < Tn; ++t) {
            const T* src = dxp.data() + i * geo->row_len + geo->padded_index(b, t, 0);
            T* dst = &gx.at4(b, i, t, 0);
            for (std::size_t f = 0; f < F; ++f) dst[f] += src[f];
          }
    }
  });
}

/// Batch normalisation over (batch, frames, bins) per channel. Train mode
/// normalises with the biased batch variance and folds the unbiased one into
/// the running estimate: running = momentum * running + (1 - momentum) * batch.
template <class T>
Var batch_norm(Graph<T>& g, Var x, BatchNormVars p, BatchNormState<T>& state, Mode mode) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using CMap = Eigen::Map<const Arr>;
  using MMap = Eigen::Map<Arr>;
  const auto& xv = g.value(x);
  detail::require_feature_map(xv.shape(), "batch_norm");
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  const auto& gamma = g.value(p.gamma);
  const auto& beta = g.value(p.beta);
  MMDENSE_REQUIRE(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, Errc::shape_mismatch,
          "batch_norm: input has " + std::to_string(C) + " channels, gamma/beta have " + to_string(gamma.shape()) +
              "/" + to_string(beta.shape()));
  MMDENSE_REQUIRE(state.epsilon > T(0), Errc::invalid_argument, "batch_norm: epsilon must be positive");
  auto plane = [HW, C](const T* base, std::size_t b, std::size_t ch) { return CMap(base + (b * C + ch) * HW, HW); };

  Tensor<T> mean({C}), inv_std({C});
  if (mode == Mode::train) {
    const double n = double(B * HW);
    for (std::size_t ch = 0; ch < C; ++ch) {
      double s = 0;
      for (std::size_t b = 0; b < B; ++b) s += double(plane(xv.data(), b, ch).sum());
      const double m = s / n;
      double v = 0;
      for (std::size_t b = 0; b < B; ++b) v += double((plane(xv.data(), b, ch) - T(m)).square().sum());
      const double var = v / n;
      mean[ch] = T(m);
      inv_std[ch] = T(1.0 / std::sqrt(var + double(state.epsilon)));
      if (state.running_mean.size() == C && state.running_var.size() == C) {
        const double unbiased = n > 1 ? v / (n - 1) : var;
        state.running_mean[ch] = T(state.momentum * state.running_mean[ch] + (1 - state.momentum) * m);
        state.running_var[ch] = T(state.momentum * state.running_var[ch] + (1 - state.momentum) * unbiased);
      }
    }
  } else {
    MMDENSE_REQUIRE(state.running_mean.size() == C && state.running_var.size() == C, Errc::uninitialized_state,
            "batch_norm: eval mode needs running statistics for " + std::to_string(C) + " channels");
    for (std::size_t ch = 0; ch < C; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(state.running_var[ch] + state.epsilon);
    }
  }

  auto out = Tensor<T>::uninitialized(xv.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ch = 0; ch < C; ++ch) {
      const T a = gamma[ch] * inv_std[ch];
      const T c = beta[ch] - a * mean[ch];
      MMap(out.data() + (b * C + ch) * HW, HW) = plane(xv.data(), b, ch) * a + c;
    }

  const bool train = mode == Mode::train;
  return g.record("batch_norm", {x, p.gamma, p.beta}, std::move(out),
                  [mean = std::move(mean), inv_std = std::move(inv_std), train, plane](BackwardContext<T>& c) {
                    const auto& go = c.grad_out();
                    const auto& xv = c.input(0);
                    const auto& gamma = c.input(1);
                    const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
                    const double n = double(B * HW);
                    for (std::size_t ch = 0; ch < C; ++ch) {
                      const T m = mean[ch], is = inv_std[ch];
                      double sum_dy = 0, sum_dy_xc = 0;
                      for (std::size_t b = 0; b < B; ++b) {
                        auto dy = plane(go.data(), b, ch);
                        sum_dy += double(dy.sum());
                        sum_dy_xc += double((dy * (plane(xv.data(), b, ch) - m)).sum());
                      }
                      const double sum_dy_xhat = sum_dy_xc * double(is);
                      if (c.needs_grad(1)) c.input_grad(1)[ch] += T(sum_dy_xhat);
                      if (c.needs_grad(2)) c.input_grad(2)[ch] += T(sum_dy);
                      if (!c.needs_grad(0)) continue;
                      auto& gx = c.input_grad(0);
                      const T scale = gamma[ch] * is;
                      const T a = T(sum_dy / n);
                      const T k = T(sum_dy_xhat / n) * is;
                      for (std::size_t b = 0; b < B; ++b) {
                        MMap dx(gx.data() + (b * C + ch) * HW, HW);
                        if (train)
                          dx += scale * (plane(go.data(), b, ch) - a - (plane(xv.data(), b, ch) - m) * k);
                        else
                          dx += scale * plane(go.data(), b, ch);
                      }
                    }
                  });
}

/// BN -> ReLU -> conv. The conv's out_ch is the growth rate k.
template <class T>
Var composite_layer(Graph<T>& g, Var x, BatchNormVars bn, BatchNormState<T>& state, ConvVars conv, Mode mode) {
  Var n = batch_norm(g, x, bn, state, mode);
  Var a = relu(g, n);
  g.release(n);
  Var y = conv2d(g, a, conv);
  g.release(a);
  return y;
}

/// 2x2 average pooling, stride 2.
template <class T>
Var down_sample(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  detail::require_feature_map(xv.shape(), "down_sample");
  const std::size_t B = xv.dim(0), C = xv.dim(1), Tn = xv.dim(2), F = xv.dim(3);
  MMDENSE_REQUIRE(Tn % 2 == 0 && F % 2 == 0, Errc::shape_mismatch,
          "down_sample needs even frames and bins, got " + to_string(xv.shape()));
  auto out = Tensor<T>::uninitialized({B, C, Tn / 2, F / 2});
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t t = 0; t < Tn / 2; ++t) {
      const T* r0 = xv.data() + (bc * Tn + 2 * t) * F;
      const T* r1 = r0 + F;
      T* dst = out.data() + (bc * (Tn / 2) + t) * (F / 2);
      for (std::size_t f = 0; f < F / 2; ++f)
        dst[f] = T(0.25) * (r0[2 * f] + r0[2 * f + 1] + r1[2 * f] + r1[2 * f + 1]);
    }
  return g.record("down_sample", {x}, std::move(out), [](BackwardContext<T>& c) {
    const auto& go = c.grad_out();
    auto& gx = c.input_grad(0);
    const std::size_t BC = gx.dim(0) * gx.dim(1), Tn = gx.dim(2), F = gx.dim(3);
    for (std::size_t bc = 0; bc < BC; ++bc)
      for (std::size_t t = 0; t < Tn / 2; ++t) {
        T* r0 = gx.data() + (bc * Tn + 2 * t) * F;
        T* r1 = r0 + F;
        const T* src = go.data() + (bc * (Tn / 2) + t) * (F / 2);
        for (std::size_t f = 0; f < F / 2; ++f) {
          const T d = T(0.25) * src[f];
          r0[2 * f] += d;
          r0[2 * f + 1] += d;
          r1[2 * f] += d;
          r1[2 * f + 1] += d;
        }
      }
  });
}

/// Transposed convolution, 2x2 kernel, stride 2, no padding:
/// out[b, o, 2t + dt, 2f + df] = sum_i W[o, i, dt, df] * x[b, i, t, f] + bias[o].
template <class T>
Var up_sample(Graph<T>& g, Var x, ConvVars p) {
  using namespace detail;
  const auto& xv = g.value(x);
  const auto& kv = g.value(p.kernel);
  const auto& bv = g.value(p.bias);
  require_feature_map(xv.shape(), "up_sample");
  MMDENSE_REQUIRE(kv.rank() == 4 && kv.dim(2) == 2 && kv.dim(3) == 2, Errc::shape_mismatch,
          "up_sample: kernel must be (out, in, 2, 2), got " + to_string(kv.shape()));
  const std::size_t B = xv.dim(0), I = xv.dim(1), Tn = xv.dim(2), F = xv.dim(3), O = kv.dim(0);
  MMDENSE_REQUIRE(kv.dim(1) == I, Errc::shape_mismatch,
          "up_sample: input has " + std::to_string(I) + " channels but kernel expects " + std::to_string(kv.dim(1)));
  MMDENSE_REQUIRE(bv.shape() == Shape{O}, Errc::shape_mismatch, "up_sample: bias shape " + to_string(bv.shape()));

  // Row (tap * O + o) holds W[o, :, dt, df].
  auto stacked = [](const Tensor<T>& k) {
    const std::size_t O = k.dim(0), I = k.dim(1);
    RowMat<T> w(4 * O, I);
    for (std::size_t tap = 0; tap < 4; ++tap)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < I; ++i) w(tap * O + o, i) = k.at4(o, i, tap / 2, tap % 2);
    return w;
  };
  const RowMat<T> w = stacked(kv);
  const std::size_t TF = Tn * F;
  auto out = Tensor<T>::uninitialized({B, O, 2 * Tn, 2 * F});
  RowMat<T> z(4 * O, TF);
  for (std::size_t b = 0; b < B; ++b) {
    Eigen::Map<const RowMat<T>> xb(xv.data() + b * I * TF, Eigen::Index(I), Eigen::Index(TF));
    z.noalias() = w * xb;
    for (std::size_t tap = 0; tap < 4; ++tap) {
      const std::size_t dt = tap / 2, df = tap % 2;
      for (std::size_t o = 0; o < O; ++o) {
        const T* src = z.data() + (tap * O + o) * TF;
        for (std::size_t t = 0; t < Tn; ++t) {
          T* dst = &out.at4(b, o, 2 * t + dt, df);
          for (std::size_t f = 0; f < F; ++f) dst[2 * f] = src[t * F + f] + bv[o];
        }
      }
    }
  }
  return g.record("up_sample", {x, p.kernel, p.bias}, std::move(out), [stacked](BackwardContext<T>& c) {
    const auto& go = c.grad_out();
    const auto& xv = c.input(0);
    const auto& kv = c.input(1);
    const std::size_t B = xv.dim(0), I = xv.dim(1), Tn = xv.dim(2), F = xv.dim(3), O = kv.dim(0);
    const std::size_t TF = Tn * F;
    const RowMat<T> w = stacked(kv);
    RowMat<T> dw = RowMat<T>::Zero(4 * O, I);
    RowMat<T> dz(4 * O, TF);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t tap = 0; tap < 4; ++tap) {
        const std::size_t dt = tap / 2, df = tap % 2;
        for (std::size_t o = 0; o < O; ++o) {
          T* dst = dz.data() + (tap * O + o) * TF;
          for (std::size_t t = 0; t < Tn; ++t) {
            const T* src = &go.at4(b, o, 2 * t + dt, df);
            for (std::size_t f = 0; f < F; ++f) dst[t * F + f] = src[2 * f];
          }
        }
      }
      Eigen::Map<const RowMat<T>> xb(xv.data() + b * I * TF, Eigen::Index(I), Eigen::Index(TF));
      if (c.needs_grad(1)) dw.noalias() += dz * xb.transpose();
      if (c.needs_grad(0)) {
        auto& gx = c.input_grad(0);
        Eigen::Map<RowMat<T>> gxb(gx.data() + b * I * TF, Eigen::Index(I), Eigen::Index(TF));
        gxb.noalias() += w.transpose() * dz;
      }
    }
    if (c.needs_grad(1)) {
      auto& gk = c.input_grad(1);
      for (std::size_t tap = 0; tap < 4; ++tap)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t i = 0; i < I; ++i) gk.at4(o, i, tap / 2, tap % 2) += dw(tap * O + o, i);
    }
    if (c.needs_grad(2)) {
      auto& gb = c.input_grad(2);
      const std::size_t HW = 4 * TF;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o) {
          T s = 0;
          const T* src = go.data() + (b * O + o) * HW;
          for (std::size_t i = 0; i < HW; ++i) s += src[i];
          gb[o] += s;
        }
    }
  });
}

}  // namespace mmdense
