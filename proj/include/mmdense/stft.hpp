#pragma once

// Hann-windowed STFT at 50% overlap with half-frame reflection padding, and
// its weighted overlap-add inverse. Transforms are FFTW in double precision;
// spectrogram values are stored as complex<float>.

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstddef>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "mmdense/wav.hpp"

namespace mmdense {

struct Framing {
  std::size_t frame_size = 2048;
  std::size_t hop = 1024;
  std::size_t original_length = 0;
  std::uint32_t sample_rate = 0;

  std::size_t bins() const noexcept { return frame_size / 2 + 1; }
  friend bool operator==(const Framing&, const Framing&) = default;
};

/// Complex STFT indexed (channel, frame, bin).
struct Spectrogram {
  Framing framing;
  std::size_t channels = 0, frames = 0, bins = 0;
  std::vector<std::complex<float>> values;

  Spectrogram() = default;
  Spectrogram(Framing f, std::size_t ch, std::size_t nframes, std::size_t nbins)
      : framing(f), channels(ch), frames(nframes), bins(nbins), values(ch * nframes * nbins) {}

  std::complex<float>& at(std::size_t c, std::size_t t, std::size_t f) { return values[(c * frames + t) * bins + f]; }
  const std::complex<float>& at(std::size_t c, std::size_t t, std::size_t f) const {
    return values[(c * frames + t) * bins + f];
  }
  bool same_shape(const Spectrogram& o) const {
    return channels == o.channels && frames == o.frames && bins == o.bins;
  }
};

/// Element-wise modulus of a Spectrogram; same indexing.
struct MagSpectrogram {
  Framing framing;
  std::size_t channels = 0, frames = 0, bins = 0;
  std::vector<float> values;

  MagSpectrogram() = default;
  MagSpectrogram(Framing f, std::size_t ch, std::size_t nframes, std::size_t nbins)
      : framing(f), channels(ch), frames(nframes), bins(nbins), values(ch * nframes * nbins, 0.0f) {}

  float& at(std::size_t c, std::size_t t, std::size_t f) { return values[(c * frames + t) * bins + f]; }
  float at(std::size_t c, std::size_t t, std::size_t f) const { return values[(c * frames + t) * bins + f]; }
  template <class S>
  bool same_shape(const S& o) const {
    return channels == o.channels && frames == o.frames && bins == o.bins;
  }
};

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n));
  return w;
}

namespace detail {

// FFTW planning is not thread-safe; execution with new-array calls is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};
struct PlanFree {
  void operator()(fftw_plan p) const {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(p);
  }
};
using Plan = std::unique_ptr<std::remove_pointer_t<fftw_plan>, PlanFree>;

class RealFft {
 public:
  explicit RealFft(std::size_t n)
      : n_(n),
        real_(static_cast<double*>(fftw_malloc(sizeof(double) * n))),
        spec_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)))) {
    std::lock_guard lock(fftw_planner_mutex());
    fwd_.reset(fftw_plan_dft_r2c_1d(int(n), real_.get(), spec_.get(), FFTW_ESTIMATE));
    inv_.reset(fftw_plan_dft_c2r_1d(int(n), spec_.get(), real_.get(), FFTW_ESTIMATE));
  }
  double* real() { return real_.get(); }
  fftw_complex* spec() { return spec_.get(); }
  void forward() { fftw_execute(fwd_.get()); }
  // c2r destroys its input; callers refill spec() before every call.
  void inverse() { fftw_execute(inv_.get()); }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  std::unique_ptr<double, FftwFree> real_;
  std::unique_ptr<fftw_complex, FftwFree> spec_;
  Plan fwd_, inv_;
};

// Index into a signal of length n extended by mirror reflection (no edge
// repeat) to any integer position.
inline std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * long(n) - 2;
  long m = i % period;
  if (m < 0) m += period;
  return std::size_t(m < long(n) ? m : period - m);
}

}  // namespace detail

inline std::size_t frame_count(std::size_t length, std::size_t hop) { return 1 + (length + hop - 1) / hop; }

inline Spectrogram stft(const AudioClip& clip, std::size_t frame_size = 2048) {
  validate(clip);
  MMDENSE_REQUIRE(!clip.empty(), Errc::empty_input, "stft of an empty clip");
  MMDENSE_REQUIRE(frame_size >= 4 && frame_size % 2 == 0, Errc::invalid_argument,
                  "frame size must be even and >= 4, got " + std::to_string(frame_size));
  const std::size_t hop = frame_size / 2, pad = frame_size / 2, len = clip.length();
  const Framing fr{frame_size, hop, len, clip.sample_rate};
  Spectrogram s(fr, clip.channels(), frame_count(len, hop), fr.bins());
  const auto win = hann_window(frame_size);
  detail::RealFft fft(frame_size);
  for (std::size_t c = 0; c < clip.channels(); ++c) {
    const auto& x = clip.samples[c];
    for (std::size_t t = 0; t < s.frames; ++t) {
      double* buf = fft.real();
      for (std::size_t n = 0; n < frame_size; ++n) {
        const long i = long(t * hop + n) - long(pad);
        // Reflection at the head; past the tail the first half-frame is
        // reflected and anything beyond that is zero.
        double v = 0;
        if (i < long(len) + long(pad)) v = x[detail::reflect_index(i, len)];
        buf[n] = v * win[n];
      }
      fft.forward();
      for (std::size_t f = 0; f < s.bins; ++f)
        s.at(c, t, f) = std::complex<float>(float(fft.spec()[f][0]), float(fft.spec()[f][1]));
    }
  }
  return s;
}

inline AudioClip istft(const Spectrogram& s) {
  const Framing& fr = s.framing;
  MMDENSE_REQUIRE(fr.frame_size >= 4 && fr.hop == fr.frame_size / 2 && s.bins == fr.bins() && s.channels > 0 &&
                      s.frames == frame_count(fr.original_length, fr.hop) && fr.original_length > 0 &&
                      s.values.size() == s.channels * s.frames * s.bins,
                  Errc::invalid_argument, "istft: framing metadata inconsistent with spectrogram shape");
  const std::size_t N = fr.frame_size, hop = fr.hop, pad = N / 2;
  const std::size_t total = (s.frames - 1) * hop + N;
  const auto win = hann_window(N);
  std::vector<double> norm(total, 0.0);
  for (std::size_t t = 0; t < s.frames; ++t)
    for (std::size_t n = 0; n < N; ++n) norm[t * hop + n] += win[n] * win[n];

  AudioClip out(fr.sample_rate, s.channels, fr.original_length);
  detail::RealFft fft(N);
  std::vector<double> acc(total);
  for (std::size_t c = 0; c < s.channels; ++c) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < s.frames; ++t) {
      for (std::size_t f = 0; f < s.bins; ++f) {
        fft.spec()[f][0] = s.at(c, t, f).real();
        fft.spec()[f][1] = s.at(c, t, f).imag();
      }
      fft.inverse();
      const double* r = fft.real();
      for (std::size_t n = 0; n < N; ++n) acc[t * hop + n] += r[n] / double(N) * win[n];
    }
    for (std::size_t i = 0; i < fr.original_length; ++i) {
      const double w = norm[i + pad];
      out.samples[c][i] = float(w > 1e-12 ? acc[i + pad] / w : 0.0);
    }
  }
  return out;
}

inline MagSpectrogram magnitude(const Spectrogram& s) {
  MagSpectrogram m(s.framing, s.channels, s.frames, s.bins);
  for (std::size_t i = 0; i < s.values.size(); ++i) m.values[i] = std::abs(s.values[i]);
  return m;
}

/// Magnitude `mag` with the phase of `phase_source`. Bins where the source is
/// exactly zero take phase 0.
inline Spectrogram apply_phase(const MagSpectrogram& mag, const Spectrogram& phase_source) {
  MMDENSE_REQUIRE(mag.same_shape(phase_source), Errc::shape_mismatch, "apply_phase: magnitude and phase source differ in shape");
  Spectrogram out(phase_source.framing, mag.channels, mag.frames, mag.bins);
  for (std::size_t i = 0; i < mag.values.size(); ++i) {
    const std::complex<float> x = phase_source.values[i];
    const float a = std::abs(x);
    out.values[i] = a > 0 ? x * (mag.values[i] / a) : std::complex<float>(mag.values[i], 0.0f);
  }
  return out;
}

}  // namespace mmdense
