#pragma once

// Inference: mixture magnitudes -> per-instrument magnitude estimates ->
// complex source estimates by soft masking or a multichannel Wiener filter.

#include <Eigen/Dense>

#include <complex>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "mmdense/model.hpp"
#include "mmdense/stft.hpp"
#include "mmdense/wav.hpp"

namespace mmdense {

using SourceEstimateSet = std::map<std::string, MagSpectrogram>;
using SourceSpectra = std::map<std::string, Spectrogram>;

/// Scale applied to a mixture's magnitudes (and its targets) before the
/// network sees them: the reciprocal of the mean magnitude.
inline float magnitude_scale(const MagSpectrogram& mix) {
  double s = 0;
  for (float v : mix.values) s += v;
  const double mean = mix.values.empty() ? 0.0 : s / double(mix.values.size());
  return mean > 1e-12 ? float(1.0 / mean) : 1.0f;
}

struct PadInfo {
  std::size_t frames = 0;         // before padding; crop target
  std::size_t padded_frames = 0;  // multiple of `multiple`
  std::size_t bins = 0;           // analysis bins including Nyquist
};

/// Feature map (1, channels, padded frames, bins - 1). The Nyquist bin is
/// split off; frames are zero-padded at the end to a multiple of `multiple`.
inline std::pair<Tensor<float>, PadInfo> prepare_input(const MagSpectrogram& mag, std::size_t multiple = 8,
                                                       float scale = 1.0f) {
  MMDENSE_REQUIRE(mag.frames >= 1, Errc::empty_input, "prepare_input: no frames");
  MMDENSE_REQUIRE(mag.bins >= 2, Errc::invalid_argument, "prepare_input: need at least two bins");
  PadInfo info{mag.frames, (mag.frames + multiple - 1) / multiple * multiple, mag.bins};
  const std::size_t F = mag.bins - 1;
  Tensor<float> x({1, mag.channels, info.padded_frames, F});
  for (std::size_t c = 0; c < mag.channels; ++c)
    for (std::size_t t = 0; t < mag.frames; ++t)
      for (std::size_t f = 0; f < F; ++f) x.at4(0, c, t, f) = mag.at(c, t, f) * scale;
  return {std::move(x), info};
}

/// Inverse of prepare_input. The Nyquist bin is taken from `nyquist_source`.
inline MagSpectrogram crop_output(const Tensor<float>& y, const PadInfo& info, const MagSpectrogram& nyquist_source,
                                  float inv_scale = 1.0f) {
  MMDENSE_REQUIRE(y.rank() == 4 && y.dim(0) == 1 && y.dim(2) == info.padded_frames && y.dim(3) + 1 == info.bins &&
                      y.dim(1) == nyquist_source.channels,
                  Errc::shape_mismatch, "crop_output: network output " + to_string(y.shape()) + " does not match pad info");
  MagSpectrogram m(nyquist_source.framing, y.dim(1), info.frames, info.bins);
  const std::size_t F = info.bins - 1;
  for (std::size_t c = 0; c < m.channels; ++c)
    for (std::size_t t = 0; t < info.frames; ++t) {
      for (std::size_t f = 0; f < F; ++f) m.at(c, t, f) = y.at4(0, c, t, f) * inv_scale;
      m.at(c, t, F) = nyquist_source.at(c, t, F);
    }
  return m;
}

struct SegmentOptions {
  std::size_t segment_frames = 256;
  std::size_t overlap = 32;
  long context = -1;  // extra frames each side; -1 derives it from the receptive field
};

/// Frames of context each segment needs so that its core outputs match a
/// whole-clip pass, rounded up to the pooling grid.
inline std::size_t segment_context(const ArchSpec& spec) {
  const auto rf = receptive_field(spec);
  const std::size_t reach = std::size_t(std::max(-rf.frames.lo, rf.frames.hi));
  const std::size_t div = spec.pool_factor();
  return (reach + div - 1) / div * div;
}

namespace detail {

inline Tensor<float> slice_frames(const Tensor<float>& x, std::size_t begin, std::size_t end) {
  const std::size_t B = x.dim(0), C = x.dim(1), F = x.dim(3), len = end - begin;
  auto out = Tensor<float>::uninitialized({B, C, len, F});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(&x.at4(b, c, begin, 0), len * F, &out.at4(b, c, 0, 0));
  return out;
}

}  // namespace detail

/// Runs the network over `x` (1, C, P, F) in overlapping segments, each
/// extended by context frames, and cross-fades the overlaps linearly.
inline Tensor<float> predict_segmented(const Model<float>& m, const Tensor<float>& x, const SegmentOptions& opt = {}) {
  const std::size_t P = x.dim(2), seg = opt.segment_frames, ov = opt.overlap;
  const std::size_t div = m.spec.pool_factor();
  MMDENSE_REQUIRE(seg % div == 0 && ov < seg, Errc::invalid_argument,
                  "segment length must be a multiple of " + std::to_string(div) + " and exceed the overlap");
  if (P <= seg) return predict(m, x);
  const std::size_t ctx = opt.context >= 0 ? std::size_t(opt.context) : segment_context(m.spec);

  std::vector<std::size_t> starts;
  for (std::size_t a = 0;; a += seg - ov) {
    if (a + seg >= P) {
      starts.push_back(P - seg);
      break;
    }
    starts.push_back(a);
  }

  Tensor<float> acc({x.dim(0), m.spec.io_channels, P, x.dim(3)});
  std::vector<double> wsum(P, 0.0);
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const std::size_t a = starts[k];
    const std::size_t lo = a > ctx ? (a - ctx) / div * div : 0;
    const std::size_t hi = std::min(P, (a + seg + ctx + div - 1) / div * div);
    const Tensor<float> y = predict(m, detail::slice_frames(x, lo, hi));
    for (std::size_t t = 0; t < seg; ++t) {
      double w = 1.0;
      if (k > 0 && t < ov) w = double(t + 1) / double(ov + 1);
      if (k + 1 < starts.size() && t >= seg - ov) w = std::min(w, double(seg - t) / double(ov + 1));
      wsum[a + t] += w;
      for (std::size_t b = 0; b < acc.dim(0); ++b)
        for (std::size_t c = 0; c < acc.dim(1); ++c) {
          float* dst = &acc.at4(b, c, a + t, 0);
          const float* src = &y.at4(b, c, a + t - lo, 0);
          for (std::size_t f = 0; f < acc.dim(3); ++f) dst[f] += float(w) * src[f];
        }
    }
  }
  for (std::size_t b = 0; b < acc.dim(0); ++b)
    for (std::size_t c = 0; c < acc.dim(1); ++c)
      for (std::size_t t = 0; t < P; ++t) {
        float* row = &acc.at4(b, c, t, 0);
        const float inv = float(1.0 / wsum[t]);
        for (std::size_t f = 0; f < acc.dim(3); ++f) row[f] *= inv;
      }
  return acc;
}

using ModelSet = std::map<std::string, Model<float>>;

/// Per-instrument magnitude estimates for a mixture. Every model must carry
/// `expected_fingerprint` when one is given.
inline SourceEstimateSet estimate_sources(const MagSpectrogram& mix, const ModelSet& models,
                                          const SegmentOptions& opt = {}, const std::string& expected_fingerprint = {}) {
  MMDENSE_REQUIRE(!models.empty(), Errc::empty_input, "estimate_sources: no models");
  for (const auto& [name, m] : models) {
    MMDENSE_REQUIRE(m.fingerprint == fingerprint(m.spec), Errc::fingerprint_mismatch,
                    "model '" + name + "' fingerprint " + m.fingerprint + " does not match its architecture");
    MMDENSE_REQUIRE(expected_fingerprint.empty() || m.fingerprint == expected_fingerprint, Errc::fingerprint_mismatch,
                    "model '" + name + "' has fingerprint " + m.fingerprint + ", expected " + expected_fingerprint);
  }
  const float scale = magnitude_scale(mix);
  SourceEstimateSet out;
  for (const auto& [name, m] : models) {
    auto [x, info] = prepare_input(mix, m.spec.pool_factor(), scale);
    out.emplace(name, crop_output(predict_segmented(m, x, opt), info, mix, 1.0f / scale));
  }
  return out;
}

/// mask_i = est_i^p / (sum_j est_j^p + eps), applied to the complex mixture.
inline SourceSpectra soft_mask(const SourceEstimateSet& est, const Spectrogram& mix, double exponent = 2.0,
                               double eps = 1e-10) {
  MMDENSE_REQUIRE(!est.empty(), Errc::empty_input, "soft_mask: no estimates");
  for (const auto& [name, e] : est)
    MMDENSE_REQUIRE(e.same_shape(mix), Errc::shape_mismatch, "soft_mask: estimate '" + name + "' does not match the mixture");
  const std::size_t n = mix.values.size();
  std::vector<double> denom(n, eps);
  std::map<std::string, std::vector<double>> powed;
  for (const auto& [name, e] : est) {
    auto& p = powed[name];
    p.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = exponent == 2.0 ? double(e.values[i]) * e.values[i] : std::pow(double(e.values[i]), exponent);
      denom[i] += p[i];
    }
  }
  SourceSpectra out;
  for (const auto& [name, p] : powed) {
    Spectrogram s(mix.framing, mix.channels, mix.frames, mix.bins);
    for (std::size_t i = 0; i < n; ++i) s.values[i] = mix.values[i] * float(p[i] / denom[i]);
    out.emplace(name, std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multichannel Wiener filter

using Cov2 = Eigen::Matrix2cd;

inline bool hermitian_psd(const Cov2& r, double tol) {
  if ((r - r.adjoint()).cwiseAbs().maxCoeff() > tol) return false;
  Eigen::SelfAdjointEigenSolver<Cov2> es(r, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, r.cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() >= -1e-8 * scale;
}

namespace detail {

inline Eigen::Vector2cd mix_at(const Spectrogram& s, std::size_t t, std::size_t f) {
  return {std::complex<double>(s.at(0, t, f)), std::complex<double>(s.at(1, t, f))};
}

inline Cov2 trace_normalized(const Cov2& r) {
  const double tr = r.trace().real();
  if (!(tr > 1e-30)) return Cov2::Identity();
  return r * (2.0 / tr);
}

}  // namespace detail

/// R(f) = sum_t w(t,f) x x^H / sum_t w(t,f), trace-normalised to 2.
/// `weights` is indexed t * bins + f.
inline std::vector<Cov2> spatial_covariance(const std::vector<double>& weights, const Spectrogram& mix) {
  std::vector<Cov2> R(mix.bins, Cov2::Zero());
  std::vector<double> wsum(mix.bins, 0.0);
  for (std::size_t t = 0; t < mix.frames; ++t)
    for (std::size_t f = 0; f < mix.bins; ++f) {
      const double w = weights[t * mix.bins + f];
      if (w <= 0) continue;
      const auto x = detail::mix_at(mix, t, f);
      R[f] += w * x * x.adjoint();
      wsum[f] += w;
    }
  for (std::size_t f = 0; f < mix.bins; ++f) {
    if (wsum[f] > 0) R[f] /= wsum[f];
    R[f] = detail::trace_normalized(0.5 * (R[f] + R[f].adjoint()));
  }
  return R;
}

struct MwfOptions {
  int iterations = 1;
  double delta = 1e-8;  // relative to the per-bin trace scale of the mixture model
};

/// s_i = v_i R_i (sum_j v_j R_j + delta I)^-1 x per (t, f). Iteration 1 uses
/// the network estimates for v_i and the weighted mixture covariance for
/// R_i; later iterations re-estimate both from the previous outputs.
inline SourceSpectra mwf(const SourceEstimateSet& est, const Spectrogram& mix, const MwfOptions& opt = {}) {
  MMDENSE_REQUIRE(mix.channels == 2, Errc::invalid_argument,
                  "mwf needs a stereo mixture, got " + std::to_string(mix.channels) + " channels");
  MMDENSE_REQUIRE(!est.empty(), Errc::empty_input, "mwf: no estimates");
  MMDENSE_REQUIRE(opt.iterations >= 1, Errc::invalid_argument, "mwf: iterations must be >= 1");
  for (const auto& [name, e] : est)
    MMDENSE_REQUIRE(e.same_shape(mix), Errc::shape_mismatch, "mwf: estimate '" + name + "' does not match the mixture");

  const std::size_t T = mix.frames, F = mix.bins, TF = T * F, I = est.size();
  std::vector<std::string> names;
  std::vector<std::vector<double>> v(I, std::vector<double>(TF));
  for (const auto& [name, e] : est) {
    auto& vi = v[names.size()];
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f) {
        const double a = e.at(0, t, f), b = e.at(1, t, f);
        vi[t * F + f] = 0.5 * (a * a + b * b);
      }
    names.push_back(name);
  }

  std::vector<std::vector<Cov2>> R(I);
  {
    std::vector<double> vsum(TF, 0.0);
    for (const auto& vi : v)
      for (std::size_t k = 0; k < TF; ++k) vsum[k] += vi[k];
    std::vector<double> w(TF);
    for (std::size_t i = 0; i < I; ++i) {
      for (std::size_t k = 0; k < TF; ++k) w[k] = vsum[k] > 0 ? v[i][k] / vsum[k] : 0.0;
      R[i] = spatial_covariance(w, mix);
    }
  }

  std::vector<Spectrogram> out(I, Spectrogram(mix.framing, 2, T, F));
  for (int it = 0; it < opt.iterations; ++it) {
    if (it > 0) {
      // Re-estimate v_i and R_i from the current source images.
      for (std::size_t i = 0; i < I; ++i) {
        std::vector<Cov2> acc(F, Cov2::Zero());
        std::vector<double> vs(F, 0.0);
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t f = 0; f < F; ++f) {
            const auto s = detail::mix_at(out[i], t, f);
            const double p = 0.5 * s.squaredNorm();
            v[i][t * F + f] = p;
            acc[f] += s * s.adjoint();
            vs[f] += p;
          }
        for (std::size_t f = 0; f < F; ++f)
          R[i][f] = detail::trace_normalized(vs[f] > 0 ? Cov2(acc[f] / vs[f]) : Cov2::Identity());
      }
    }
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f) {
        const std::size_t k = t * F + f;
        const auto x = detail::mix_at(mix, t, f);
        Cov2 C = Cov2::Zero();
        double vtot = 0;
        for (std::size_t i = 0; i < I; ++i) {
          C += v[i][k] * R[i][f];
          vtot += v[i][k];
        }
        if (!(vtot > 0)) {
          for (std::size_t i = 0; i < I; ++i) {
            const Eigen::Vector2cd s = x / double(I);
            out[i].at(0, t, f) = std::complex<float>(s(0));
            out[i].at(1, t, f) = std::complex<float>(s(1));
          }
          continue;
        }
        const double d = opt.delta * 0.5 * C.trace().real();
        C += d * Cov2::Identity();
        const Eigen::Vector2cd y = C.inverse() * x;
        for (std::size_t i = 0; i < I; ++i) {
          const Eigen::Vector2cd s = v[i][k] * (R[i][f] * y);
          out[i].at(0, t, f) = std::complex<float>(s(0));
          out[i].at(1, t, f) = std::complex<float>(s(1));
        }
      }
  }
  SourceSpectra result;
  for (std::size_t i = 0; i < I; ++i) result.emplace(names[i], std::move(out[i]));
  return result;
}

// ---------------------------------------------------------------------------
// End to end

enum class Method { mask, mwf };

inline Method parse_method(const std::string& s) {
  if (s == "mask") return Method::mask;
  if (s == "mwf") return Method::mwf;
  fail(Errc::invalid_argument, "unknown separation method '" + s + "' (mask or mwf)");
}

struct SeparateOptions {
  Method method = Method::mwf;
  std::size_t frame_size = 2048;
  SegmentOptions segments;
  double mask_exponent = 2.0;
  MwfOptions mwf;
};

/// Separates an in-memory clip. Output clips have the input's length.
inline std::map<std::string, AudioClip> separate_clip(const AudioClip& mixture, const ModelSet& models,
                                                      const SeparateOptions& opt = {}) {
  const Spectrogram X = stft(mixture, opt.frame_size);
  const auto est = estimate_sources(magnitude(X), models, opt.segments);
  const SourceSpectra S = opt.method == Method::mask ? soft_mask(est, X, opt.mask_exponent) : mwf(est, X, opt.mwf);
  std::map<std::string, AudioClip> out;
  for (const auto& [name, s] : S) out.emplace(name, istft(s));
  return out;
}

/// load -> separate -> `<out_dir>/<instrument>.wav` (float32). Returns the
/// written paths.
inline std::vector<std::string> separate_file(const std::string& in_path, const ModelSet& models,
                                              const std::string& out_dir, const SeparateOptions& opt = {}) {
  const AudioClip mixture = load_wav(in_path);
  const auto sources = separate_clip(mixture, models, opt);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  MMDENSE_REQUIRE(!ec, Errc::io_error, "cannot create '" + out_dir + "': " + ec.message());
  std::vector<std::string> paths;
  for (const auto& [name, clip] : sources) {
    const std::string p = (std::filesystem::path(out_dir) / (name + ".wav")).string();
    save_wav(clip, p, WavCodec::float32);
    paths.push_back(p);
  }
  return paths;
}

}  // namespace mmdense
