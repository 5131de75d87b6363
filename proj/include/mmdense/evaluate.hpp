#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "mmdense/metrics.hpp"
#include "mmdense/separate.hpp"
#include "mmdense/synth.hpp"

namespace mmdense {

struct MetricRow {
  std::string song;
  std::string instrument;
  std::string metric;  // SDR | SI-SDR
  double value_db = 0;
};

struct MetricSummary {
  std::string instrument;
  std::string metric;
  double median = 0;
  double mean = 0;
  std::size_t count = 0;
};

inline double median(std::vector<double> v) {
  MMDENSE_REQUIRE(!v.empty(), Errc::empty_input, "median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<MetricSummary> summarize(const std::vector<MetricRow>& rows) {
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  for (const auto& r : rows) groups[{r.instrument, r.metric}].push_back(r.value_db);
  std::vector<MetricSummary> out;
  for (const auto& [key, vals] : groups) {
    MetricSummary s{key.first, key.second, median(vals), 0, vals.size()};
    for (double v : vals) s.mean += v;
    s.mean /= double(vals.size());
    out.push_back(s);
  }
  return out;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string s = "song,instrument,metric,value_db\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f", r.value_db);
    s += r.song + "," + r.instrument + "," + r.metric + "," + buf + "\n";
  }
  return s;
}

inline std::string summary_csv(const std::vector<MetricSummary>& rows) {
  std::string s = "instrument,metric,median_db,mean_db,count\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%zu", r.median, r.mean, r.count);
    s += r.instrument + "," + r.metric + "," + buf + "\n";
  }
  return s;
}

/// Produces estimates for a song's mixture, keyed by instrument.
using Separator = std::function<std::map<std::string, AudioClip>(const AudioClip&)>;

struct EvalOptions {
  std::size_t sdr_taps = 32;
  std::ostream* warnings = &std::cerr;
};

/// Scores every instrument the separator returns against the song's stem.
/// Songs without a stem for an instrument skip that row with a warning.
inline std::vector<MetricRow> evaluate_scenes(const std::vector<std::pair<std::string, Scene>>& songs,
                                              const Separator& separator, const EvalOptions& opt = {}) {
  std::vector<MetricRow> rows;
  for (const auto& [song, scene] : songs) {
    const auto est = separator(scene.mixture);
    for (const auto& [inst, clip] : est) {
      if (!scene.has_source(inst)) {
        if (opt.warnings) *opt.warnings << "warning: " << song << " has no '" << inst << "' stem, skipped\n";
        continue;
      }
      const auto& ref = scene.source(inst);
      rows.push_back({song, inst, "SDR", sdr_proj(clip, ref, opt.sdr_taps).mean});
      rows.push_back({song, inst, "SI-SDR", si_sdr(clip, ref).mean});
    }
  }
  return rows;
}

/// Every instrument's estimate is the unseparated mixture.
inline Separator mixture_baseline(const std::vector<std::string>& instruments) {
  return [instruments](const AudioClip& mix) {
    std::map<std::string, AudioClip> out;
    for (const auto& i : instruments) out.emplace(i, mix);
    return out;
  };
}

inline Separator model_separator(const ModelSet& models, const SeparateOptions& opt) {
  return [&models, opt](const AudioClip& mix) { return separate_clip(mix, models, opt); };
}

/// Loads `<root>/<song>/{mixture,<instrument>}.wav` for every song.
inline std::vector<std::pair<std::string, Scene>> load_dataset(const std::string& root,
                                                               const std::vector<std::string>& instruments) {
  std::vector<std::pair<std::string, Scene>> out;
  for (const auto& song : list_songs(root))
    out.emplace_back(song, load_scene((std::filesystem::path(root) / song).string(), instruments));
  MMDENSE_REQUIRE(!out.empty(), Errc::empty_input, "no songs with a mixture.wav under '" + root + "'");
  return out;
}

}  // namespace mmdense
