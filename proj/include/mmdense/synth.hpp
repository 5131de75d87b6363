#pragma once

// Synthetic multi-source stereo scenes and training-time augmentation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmdense/wav.hpp"

namespace mmdense {

enum class Recipe { tonal, noise_burst, bass, texture };

inline const char* recipe_name(Recipe r) {
  switch (r) {
    case Recipe::tonal: return "tonal";
    case Recipe::noise_burst: return "noise-burst";
    case Recipe::bass: return "bass";
    case Recipe::texture: return "texture";
  }
  return "?";
}

inline Recipe parse_recipe(const std::string& s) {
  for (auto r : {Recipe::tonal, Recipe::noise_burst, Recipe::bass, Recipe::texture})
    if (s == recipe_name(r)) return r;
  fail(Errc::invalid_argument, "unknown source recipe '" + s + "' (tonal, noise-burst, bass, texture)");
}

struct Scene {
  std::vector<std::pair<std::string, AudioClip>> sources;
  AudioClip mixture;

  const AudioClip& source(const std::string& name) const {
    for (const auto& [n, c] : sources)
      if (n == name) return c;
    fail(Errc::invalid_argument, "scene has no source '" + name + "'");
  }
  bool has_source(const std::string& name) const {
    return std::any_of(sources.begin(), sources.end(), [&](const auto& s) { return s.first == name; });
  }
};

/// Exact sample-wise sum of the sources in their stored order.
inline AudioClip mix_sources(const std::vector<std::pair<std::string, AudioClip>>& sources) {
  MMDENSE_REQUIRE(!sources.empty(), Errc::empty_input, "mix of no sources");
  AudioClip m(sources[0].second.sample_rate, sources[0].second.channels(), sources[0].second.length());
  for (const auto& [name, c] : sources) {
    MMDENSE_REQUIRE(c.channels() == m.channels() && c.length() == m.length(), Errc::shape_mismatch,
                    "source '" + name + "' differs in shape from the others");
    for (std::size_t ch = 0; ch < m.channels(); ++ch)
      for (std::size_t i = 0; i < m.length(); ++i) m.samples[ch][i] += c.samples[ch][i];
  }
  return m;
}

struct SceneConfig {
  std::uint32_t sample_rate = 16000;
  double seconds = 4.0;
  std::vector<Recipe> recipes{Recipe::tonal, Recipe::noise_burst, Recipe::bass, Recipe::texture};
};

namespace detail {

using Rng = std::mt19937_64;

inline double uni(Rng& r, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(r); }

// Raised-cosine attack and release with a flat sustain.
inline double envelope(double t, double dur, double attack, double release) {
  if (t < 0 || t >= dur) return 0;
  if (t < attack) return 0.5 - 0.5 * std::cos(std::numbers::pi * t / attack);
  if (t > dur - release) return 0.5 - 0.5 * std::cos(std::numbers::pi * (dur - t) / release);
  return 1;
}

inline std::vector<double> tonal(Rng& r, std::size_t n, double sr) {
  std::vector<double> y(n, 0.0);
  double t0 = uni(r, 0.0, 0.2);
  const double total = double(n) / sr;
  while (t0 < total) {
    const double dur = uni(r, 0.25, 0.6);
    const double f0 = 220.0 * std::pow(2.0, uni(r, -0.2, 1.8));
    const double vib_rate = uni(r, 4.0, 7.0), vib_depth = uni(r, 0.002, 0.01);
    const int harmonics = int(std::min(8.0, 0.45 * sr / f0));
    double phase = 0;
    const std::size_t a = std::size_t(t0 * sr), b = std::min(n, std::size_t((t0 + dur) * sr));
    for (std::size_t i = a; i < b; ++i) {
      const double t = double(i) / sr - t0;
      const double f = f0 * (1.0 + vib_depth * std::sin(2 * std::numbers::pi * vib_rate * t));
      phase += 2 * std::numbers::pi * f / sr;
      double s = 0;
      for (int h = 1; h <= harmonics; ++h) s += std::sin(h * phase) / h;
      y[i] += envelope(t, dur, 0.02, 0.05) * s;
    }
    t0 += dur + uni(r, 0.0, 0.15);
  }
  return y;
}

inline std::vector<double> noise_burst(Rng& r, std::size_t n, double sr) {
  std::vector<double> y(n, 0.0);
  std::normal_distribution<double> g(0.0, 1.0);
  double t0 = uni(r, 0.0, 0.1);
  const double total = double(n) / sr;
  while (t0 < total) {
    const double decay = uni(r, 0.02, 0.08);
    // One-pole high-pass with a random corner gives each burst its colour.
    const double a = std::exp(-2 * std::numbers::pi * uni(r, 200.0, 3000.0) / sr);
    const std::size_t s = std::size_t(t0 * sr), e = std::min(n, s + std::size_t(6 * decay * sr));
    double prev_in = 0, prev_out = 0;
    for (std::size_t i = s; i < e; ++i) {
      const double t = double(i - s) / sr;
      const double in = g(r);
      const double out = a * (prev_out + in - prev_in);
      prev_in = in;
      prev_out = out;
      y[i] += std::min(1.0, t / 0.002) * std::exp(-t / decay) * out;
    }
    t0 += uni(r, 0.12, 0.4);
  }
  return y;
}

inline std::vector<double> bass(Rng& r, std::size_t n, double sr) {
  std::vector<double> y(n, 0.0);
  double t0 = 0;
  const double total = double(n) / sr;
  while (t0 < total) {
    const double dur = uni(r, 0.3, 0.8);
    const double f0 = 41.2 * std::pow(2.0, uni(r, 0.0, 1.5));
    const std::size_t a = std::size_t(t0 * sr), b = std::min(n, std::size_t((t0 + dur) * sr));
    for (std::size_t i = a; i < b; ++i) {
      const double t = double(i) / sr - t0;
      double s = 0;
      // Harmonics stay below 800 Hz with a 1/h^2 roll-off.
      for (int h = 1; h * f0 < 800.0; ++h) s += std::sin(2 * std::numbers::pi * h * f0 * t) / (h * h);
      y[i] += envelope(t, dur, 0.03, 0.06) * s;
    }
    t0 += dur;
  }
  return y;
}

inline std::vector<double> texture(Rng& r, std::size_t n, double sr) {
  std::vector<double> y(n, 0.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const double lp = std::exp(-2 * std::numbers::pi * uni(r, 2000.0, 6000.0) / sr);
  const double am = uni(r, 0.3, 1.5), am_phase = uni(r, 0.0, 2 * std::numbers::pi);
  double state = 0;
  for (std::size_t i = 0; i < n; ++i) {
    state = lp * state + (1 - lp) * g(r);
    const double t = double(i) / sr;
    y[i] = (0.6 + 0.4 * std::sin(2 * std::numbers::pi * am * t + am_phase)) * state;
  }
  return y;
}

inline AudioClip render(Recipe recipe, Rng& r, std::size_t n, std::uint32_t sr) {
  std::vector<double> mono;
  switch (recipe) {
    case Recipe::tonal: mono = tonal(r, n, sr); break;
    case Recipe::noise_burst: mono = noise_burst(r, n, sr); break;
    case Recipe::bass: mono = bass(r, n, sr); break;
    case Recipe::texture: mono = texture(r, n, sr); break;
  }
  double ss = 0;
  for (double v : mono) ss += v * v;
  const double rms = std::sqrt(ss / double(std::max<std::size_t>(n, 1)));
  const double level = std::pow(10.0, uni(r, -26.0, -18.0) / 20.0);
  const double g = rms > 0 ? level / rms : 0.0;
  const double pan = uni(r, 0.1, 0.9) * std::numbers::pi / 2;  // constant-power
  AudioClip clip(sr, 2, n);
  for (std::size_t i = 0; i < n; ++i) {
    clip.samples[0][i] = float(g * std::cos(pan) * mono[i]);
    clip.samples[1][i] = float(g * std::sin(pan) * mono[i]);
  }
  return clip;
}

}  // namespace detail

/// Scene `index` of the dataset drawn with `seed`; independent of the others.
inline Scene synth_scene(std::uint64_t seed, std::size_t index, const SceneConfig& cfg = {}) {
  MMDENSE_REQUIRE(cfg.seconds > 0 && cfg.sample_rate > 0 && !cfg.recipes.empty(), Errc::invalid_argument,
                  "scene config needs a positive duration, sample rate and at least one recipe");
  std::seed_seq sq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index), std::uint32_t(index >> 32)};
  detail::Rng rng(sq);
  const std::size_t n = std::size_t(std::llround(cfg.seconds * cfg.sample_rate));
  Scene s;
  for (auto r : cfg.recipes) s.sources.emplace_back(recipe_name(r), detail::render(r, rng, n, cfg.sample_rate));
  s.mixture = mix_sources(s.sources);
  return s;
}

inline std::vector<Scene> synth_dataset(std::uint64_t seed, std::size_t n_scenes, const SceneConfig& cfg = {}) {
  MMDENSE_REQUIRE(n_scenes >= 1, Errc::invalid_argument, "synth_dataset needs at least one scene");
  std::vector<Scene> out;
  out.reserve(n_scenes);
  for (std::size_t i = 0; i < n_scenes; ++i) out.push_back(synth_scene(seed, i, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double gain_lo = 0.25, gain_hi = 1.25;
  double swap_probability = 0.5;
  bool remix = true;             // draw each source from a random scene of the pool
  std::size_t crop_samples = 0;  // 0 keeps the full length

  static AugmentConfig identity() { return {1.0, 1.0, 0.0, false, 0}; }
};

inline void swap_channels(AudioClip& c) {
  if (c.channels() == 2) std::swap(c.samples[0], c.samples[1]);
}

/// Per source: optional remix from `pool`, random gain, random channel swap;
/// then one shared random crop; the mixture is re-formed as the exact sum.
template <class Rng>
Scene augment(const Scene& scene, Rng& rng, const AugmentConfig& cfg = {}, const std::vector<Scene>* pool = nullptr) {
  Scene out;
  std::uniform_real_distribution<double> gain(cfg.gain_lo, cfg.gain_hi), coin(0.0, 1.0);
  std::size_t len = scene.mixture.length();
  for (const auto& [name, clip] : scene.sources) {
    const AudioClip* src = &clip;
    if (cfg.remix && pool && !pool->empty()) {
      const auto& other = (*pool)[std::uniform_int_distribution<std::size_t>(0, pool->size() - 1)(rng)];
      if (other.has_source(name)) src = &other.source(name);
    }
    AudioClip c = *src;
    const float g = float(gain(rng));
    if (g != 1.0f)
      for (auto& ch : c.samples)
        for (auto& v : ch) v *= g;
    if (coin(rng) < cfg.swap_probability) swap_channels(c);
    len = std::min(len, c.length());
    out.sources.emplace_back(name, std::move(c));
  }
  const std::size_t crop = cfg.crop_samples ? std::min(cfg.crop_samples, len) : len;
  const std::size_t offset = len > crop ? std::uniform_int_distribution<std::size_t>(0, len - crop)(rng) : 0;
  if (crop != scene.mixture.length() || offset != 0)
    for (auto& [name, c] : out.sources)
      for (auto& ch : c.samples) ch = std::vector<float>(ch.begin() + long(offset), ch.begin() + long(offset + crop));
  out.mixture = mix_sources(out.sources);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directories: <root>/<song>/{mixture,<instrument>...}.wav

inline void save_scene(const Scene& s, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_wav(s.mixture, (std::filesystem::path(dir) / "mixture.wav").string());
  for (const auto& [name, c] : s.sources) save_wav(c, (std::filesystem::path(dir) / (name + ".wav")).string());
}

/// Loads one song directory. Stems missing from disk are skipped; the
/// mixture is read as stored, not re-summed.
inline Scene load_scene(const std::string& dir, const std::vector<std::string>& instruments) {
  Scene s;
  s.mixture = load_wav((std::filesystem::path(dir) / "mixture.wav").string());
  for (const auto& name : instruments) {
    const auto p = std::filesystem::path(dir) / (name + ".wav");
    if (std::filesystem::exists(p)) s.sources.emplace_back(name, load_wav(p.string()));
  }
  return s;
}

/// Song directory names under `root` that contain a mixture.wav, sorted.
inline std::vector<std::string> list_songs(const std::string& root) {
  std::vector<std::string> songs;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(root, ec))
    if (e.is_directory() && std::filesystem::exists(e.path() / "mixture.wav")) songs.push_back(e.path().filename());
  MMDENSE_REQUIRE(!ec, Errc::io_error, "cannot list '" + root + "': " + ec.message());
  std::sort(songs.begin(), songs.end());
  return songs;
}

}  // namespace mmdense
