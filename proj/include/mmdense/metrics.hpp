#pragma once

// Signal-to-distortion ratios. si_sdr projects the estimate onto the
// reference; sdr_proj onto the span of the reference delayed by
// 0..taps-1 samples. Both are capped at +-100 dB.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmdense/wav.hpp"

namespace mmdense {

inline constexpr double kSdrCapDb = 100.0;

struct SdrResult {
  std::vector<double> per_channel;
  double mean = 0;
};

namespace detail {

inline double capped_db(double signal, double noise) {
  if (noise <= 0) return signal > 0 ? kSdrCapDb : -kSdrCapDb;
  if (signal <= 0) return -kSdrCapDb;
  return std::clamp(10.0 * std::log10(signal / noise), -kSdrCapDb, kSdrCapDb);
}

inline void require_pair(const AudioClip& est, const AudioClip& ref) {
  MMDENSE_REQUIRE(est.channels() == ref.channels() && est.length() == ref.length(), Errc::shape_mismatch,
                  "estimate and reference differ in shape");
  MMDENSE_REQUIRE(ref.length() > 0, Errc::empty_input, "empty reference");
}

// SDR of one channel after least-squares projection onto delayed copies of
// the reference.
inline double channel_sdr(const std::vector<float>& e, const std::vector<float>& r, std::size_t taps) {
  const std::size_t n = r.size();
  double rr = 0;
  for (float v : r) rr += double(v) * v;
  MMDENSE_REQUIRE(rr > 0, Errc::invalid_argument, "reference channel is identically zero");

  // Normal equations: Toeplitz autocorrelation of r and cross-correlation
  // of e with the delayed r.
  std::vector<double> ac(taps, 0.0);
  Eigen::VectorXd b(taps);
  for (std::size_t d = 0; d < taps; ++d) {
    double s = 0, c = 0;
    for (std::size_t i = d; i < n; ++i) {
      s += double(r[i]) * r[i - d];
      c += double(e[i]) * r[i - d];
    }
    ac[d] = s;
    b(Eigen::Index(d)) = c;
  }
  // Gram entry (i >= j, lag L = i - j): sum_{s=0}^{n-1-i} r[s] r[s+L], the
  // full autocorrelation minus its last j terms.
  Eigen::MatrixXd A(taps, taps);
  for (std::size_t i = 0; i < taps; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const std::size_t L = i - j;
      double v = ac[L];
      for (std::size_t s = n - std::min(n, i); s + L < n; ++s) v -= double(r[s]) * r[s + L];
      A(Eigen::Index(i), Eigen::Index(j)) = A(Eigen::Index(j), Eigen::Index(i)) = v;
    }
  Eigen::VectorXd a;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() == Eigen::Success) {
    a = llt.solve(b);
  } else {
    A.diagonal().array() += 1e-8 * ac[0];
    a = A.ldlt().solve(b);
  }

  double sig = 0, err = 0;
  for (std::size_t t = 0; t < n; ++t) {
    double p = 0;
    for (std::size_t d = 0; d < taps && d <= t; ++d) p += a(Eigen::Index(d)) * r[t - d];
    sig += p * p;
    err += (double(e[t]) - p) * (double(e[t]) - p);
  }
  return capped_db(sig, err);
}

}  // namespace detail

/// alpha = <e, r> / <r, r>;  10 log10(|alpha r|^2 / |e - alpha r|^2) per channel.
inline SdrResult si_sdr(const AudioClip& estimate, const AudioClip& reference) {
  detail::require_pair(estimate, reference);
  SdrResult res;
  for (std::size_t c = 0; c < reference.channels(); ++c) {
    const auto& e = estimate.samples[c];
    const auto& r = reference.samples[c];
    double er = 0, rr = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      er += double(e[i]) * r[i];
      rr += double(r[i]) * r[i];
    }
    MMDENSE_REQUIRE(rr > 0, Errc::invalid_argument, "reference channel is identically zero");
    const double alpha = er / rr;
    double sig = 0, err = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double p = alpha * r[i];
      sig += p * p;
      err += (e[i] - p) * (e[i] - p);
    }
    res.per_channel.push_back(detail::capped_db(sig, err));
  }
  for (double v : res.per_channel) res.mean += v;
  res.mean /= double(res.per_channel.size());
  return res;
}

/// Time-invariant projection SDR with `taps` delays; taps = 1 is si_sdr.
inline SdrResult sdr_proj(const AudioClip& estimate, const AudioClip& reference, std::size_t taps = 32) {
  detail::require_pair(estimate, reference);
  MMDENSE_REQUIRE(taps >= 1, Errc::invalid_argument, "sdr_proj needs at least one tap");
  if (taps == 1) return si_sdr(estimate, reference);
  SdrResult res;
  for (std::size_t c = 0; c < reference.channels(); ++c)
    res.per_channel.push_back(detail::channel_sdr(estimate.samples[c], reference.samples[c], taps));
  for (double v : res.per_channel) res.mean += v;
  res.mean /= double(res.per_channel.size());
  return res;
}

}  // namespace mmdense
