#pragma once

// Per-instrument training on magnitude spectrograms: MSE loss, RMSprop, a
// single plateau-triggered learning-rate drop, periodic checkpoints.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmdense/checkpoint.hpp"
#include "mmdense/separate.hpp"
#include "mmdense/synth.hpp"

namespace mmdense {

struct TrainConfig {
  std::string instrument = "tonal";
  double lr_initial = 1e-3;
  double lr_reduced = 1e-4;
  std::size_t plateau_patience = 5;  // validations without a 1% improvement
  double plateau_threshold = 0.01;
  std::size_t eval_every = 50;       // steps; 0 disables validation
  std::size_t batch = 4;
  std::size_t segment_frames = 128;
  std::size_t max_steps = 1000;
  std::uint64_t seed = 0;
  std::size_t frame_size = 2048;
  std::size_t checkpoint_every = 500;  // steps; 0 saves only at the end
  bool augment_gain = true;
  bool augment_swap = true;
  bool augment_remix = true;
  bool augment_crop = true;
  // Synthetic data, used when no dataset directory is given.
  std::size_t train_scenes = 20;
  std::size_t val_scenes = 4;
  double scene_seconds = 4.0;
  std::uint32_t sample_rate = 16000;
  std::vector<std::string> recipes{"tonal", "noise-burst", "bass", "texture"};
};

inline void validate(const TrainConfig& c) {
  MMDENSE_REQUIRE(!c.instrument.empty(), Errc::invalid_argument, "train config: instrument is empty");
  MMDENSE_REQUIRE(c.lr_initial >= 0 && c.lr_reduced >= 0, Errc::invalid_argument, "train config: negative learning rate");
  MMDENSE_REQUIRE(c.lr_reduced < c.lr_initial || (c.lr_initial == 0 && c.lr_reduced == 0), Errc::invalid_argument,
                  "train config: lr_reduced must be below lr_initial");
  MMDENSE_REQUIRE(c.segment_frames > 0 && c.segment_frames % 8 == 0, Errc::invalid_argument,
                  "train config: segment_frames must be a positive multiple of 8");
  MMDENSE_REQUIRE(c.batch >= 1, Errc::invalid_argument, "train config: batch must be >= 1");
  MMDENSE_REQUIRE(c.frame_size >= 16 && (c.frame_size & (c.frame_size - 1)) == 0, Errc::invalid_argument,
                  "train config: frame_size must be a power of two >= 16");
  MMDENSE_REQUIRE(c.plateau_threshold >= 0 && c.plateau_threshold < 1, Errc::invalid_argument,
                  "train config: plateau_threshold must lie in [0, 1)");
}

inline std::string dump_config(const TrainConfig& c) {
  YAML::Emitter y;
  y << YAML::BeginMap;
  y << YAML::Key << "instrument" << YAML::Value << c.instrument;
  y << YAML::Key << "lr_initial" << YAML::Value << c.lr_initial;
  y << YAML::Key << "lr_reduced" << YAML::Value << c.lr_reduced;
  y << YAML::Key << "plateau_patience" << YAML::Value << c.plateau_patience;
  y << YAML::Key << "plateau_threshold" << YAML::Value << c.plateau_threshold;
  y << YAML::Key << "eval_every" << YAML::Value << c.eval_every;
  y << YAML::Key << "batch" << YAML::Value << c.batch;
  y << YAML::Key << "segment_frames" << YAML::Value << c.segment_frames;
  y << YAML::Key << "max_steps" << YAML::Value << c.max_steps;
  y << YAML::Key << "seed" << YAML::Value << c.seed;
  y << YAML::Key << "frame_size" << YAML::Value << c.frame_size;
  y << YAML::Key << "checkpoint_every" << YAML::Value << c.checkpoint_every;
  y << YAML::Key << "augment" << YAML::Value << YAML::BeginMap;
  y << YAML::Key << "gain" << YAML::Value << c.augment_gain;
  y << YAML::Key << "swap" << YAML::Value << c.augment_swap;
  y << YAML::Key << "remix" << YAML::Value << c.augment_remix;
  y << YAML::Key << "crop" << YAML::Value << c.augment_crop;
  y << YAML::EndMap;
  y << YAML::Key << "synthetic" << YAML::Value << YAML::BeginMap;
  y << YAML::Key << "train_scenes" << YAML::Value << c.train_scenes;
  y << YAML::Key << "val_scenes" << YAML::Value << c.val_scenes;
  y << YAML::Key << "scene_seconds" << YAML::Value << c.scene_seconds;
  y << YAML::Key << "sample_rate" << YAML::Value << c.sample_rate;
  y << YAML::Key << "recipes" << YAML::Value << YAML::Flow << c.recipes;
  y << YAML::EndMap;
  y << YAML::EndMap;
  return std::string(y.c_str()) + "\n";
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  try {
    const YAML::Node n = YAML::Load(text);
    if (!n.IsDefined() || n.IsNull()) return c;
    MMDENSE_REQUIRE(n.IsMap(), Errc::malformed_header, "train config: top level must be a mapping");
    auto get = [&](const YAML::Node& node, const char* key, auto& field) {
      if (node[key]) field = node[key].template as<std::decay_t<decltype(field)>>();
    };
    auto only = [](const YAML::Node& node, const std::string& where, std::initializer_list<const char*> keys) {
      MMDENSE_REQUIRE(node.IsMap(), Errc::malformed_header, "train config: '" + where + "' must be a mapping");
      for (const auto& kv : node) {
        const auto k = kv.first.as<std::string>();
        MMDENSE_REQUIRE(std::any_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }),
                        Errc::malformed_header, "train config: unknown key '" + k + "' in " + where);
      }
    };
    only(n, "top level",
         {"instrument", "lr_initial", "lr_reduced", "plateau_patience", "plateau_threshold", "eval_every", "batch",
          "segment_frames", "max_steps", "seed", "frame_size", "checkpoint_every", "augment", "synthetic"});
    get(n, "instrument", c.instrument);
    get(n, "lr_initial", c.lr_initial);
    get(n, "lr_reduced", c.lr_reduced);
    get(n, "plateau_patience", c.plateau_patience);
    get(n, "plateau_threshold", c.plateau_threshold);
    get(n, "eval_every", c.eval_every);
    get(n, "batch", c.batch);
    get(n, "segment_frames", c.segment_frames);
    get(n, "max_steps", c.max_steps);
    get(n, "seed", c.seed);
    get(n, "frame_size", c.frame_size);
    get(n, "checkpoint_every", c.checkpoint_every);
    if (const auto a = n["augment"]) {
      only(a, "augment", {"gain", "swap", "remix", "crop"});
      get(a, "gain", c.augment_gain);
      get(a, "swap", c.augment_swap);
      get(a, "remix", c.augment_remix);
      get(a, "crop", c.augment_crop);
    }
    if (const auto s = n["synthetic"]) {
      only(s, "synthetic", {"train_scenes", "val_scenes", "scene_seconds", "sample_rate", "recipes"});
      get(s, "train_scenes", c.train_scenes);
      get(s, "val_scenes", c.val_scenes);
      get(s, "scene_seconds", c.scene_seconds);
      get(s, "sample_rate", c.sample_rate);
      get(s, "recipes", c.recipes);
    }
  } catch (const YAML::Exception& e) {
    fail(Errc::malformed_header, std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  MMDENSE_REQUIRE(in, Errc::io_error, "cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline SceneConfig scene_config(const TrainConfig& c) {
  SceneConfig s;
  s.sample_rate = c.sample_rate;
  s.seconds = c.scene_seconds;
  s.recipes.clear();
  for (const auto& r : c.recipes) s.recipes.push_back(parse_recipe(r));
  return s;
}

struct TrainData {
  std::vector<Scene> train;
  std::vector<Scene> val;
};

/// Training and validation scenes drawn from disjoint index ranges of the
/// synthetic generator.
inline TrainData synthetic_data(const TrainConfig& c) {
  const auto sc = scene_config(c);
  TrainData d;
  for (std::size_t i = 0; i < c.train_scenes; ++i) d.train.push_back(synth_scene(c.seed, i, sc));
  for (std::size_t i = 0; i < c.val_scenes; ++i) d.val.push_back(synth_scene(c.seed, c.train_scenes + i, sc));
  return d;
}

// ---------------------------------------------------------------------------
// Loss and single steps

/// mean over all elements of (est - target)^2.
template <class T>
Var mse_loss(Graph<T>& g, Var est, Var target) {
  return reduce_mean(g, square(g, sub(g, est, target)));
}

/// (mixture, target) feature maps of shape (channels, segment_frames, bins-1)
/// for one scene, both scaled by the mixture's magnitude scale.
struct Example {
  Tensor<float> mixture, target;
};

inline Example make_example(const Scene& s, const std::string& instrument, std::size_t frame_size,
                            std::size_t segment_frames) {
  const MagSpectrogram mix = magnitude(stft(s.mixture, frame_size));
  const MagSpectrogram tgt = magnitude(stft(s.source(instrument), frame_size));
  MMDENSE_REQUIRE(mix.frames >= segment_frames, Errc::invalid_argument,
                  "scene yields " + std::to_string(mix.frames) + " frames, segment needs " +
                      std::to_string(segment_frames));
  const float scale = magnitude_scale(mix);
  const std::size_t C = mix.channels, F = mix.bins - 1;
  Example e{Tensor<float>({C, segment_frames, F}), Tensor<float>({C, segment_frames, F})};
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < segment_frames; ++t)
      for (std::size_t f = 0; f < F; ++f) {
        const std::size_t k = (c * segment_frames + t) * F + f;
        e.mixture[k] = mix.at(c, t, f) * scale;
        e.target[k] = tgt.at(c, t, f) * scale;
      }
  return e;
}

inline std::pair<Tensor<float>, Tensor<float>> stack(const std::vector<Example>& xs) {
  MMDENSE_REQUIRE(!xs.empty(), Errc::empty_input, "stack of no examples");
  Shape s{xs.size()};
  for (auto d : xs[0].mixture.shape()) s.push_back(d);
  auto x = Tensor<float>::uninitialized(s), y = Tensor<float>::uninitialized(s);
  const std::size_t n = xs[0].mixture.size();
  for (std::size_t b = 0; b < xs.size(); ++b) {
    MMDENSE_REQUIRE(xs[b].mixture.size() == n, Errc::shape_mismatch, "examples differ in shape");
    std::copy_n(xs[b].mixture.data(), n, x.data() + b * n);
    std::copy_n(xs[b].target.data(), n, y.data() + b * n);
  }
  return {std::move(x), std::move(y)};
}

/// Forward in train mode, MSE, backward, RMSprop. Returns the loss before
/// the update. A non-finite loss or gradient leaves the parameters untouched
/// and throws nan_detected.
inline double train_step(Model<float>& m, RmspropState& opt, const Tensor<float>& x, const Tensor<float>& y) {
  Graph<float> g;
  Binder<float> b(g, m);
  Var out = network_forward(b, g.constant(x), Mode::train);
  Var loss = mse_loss(g, out, g.constant(y));
  const double l = g.value(loss)[0];
  MMDENSE_REQUIRE(std::isfinite(l), Errc::nan_detected, "training loss is not finite");
  rmsprop_step(m.params, g.backward(loss), opt);
  return l;
}

inline double eval_loss(const Model<float>& m, const Tensor<float>& x, const Tensor<float>& y) {
  Graph<float> g;
  Var est = g.constant(predict(m, x));
  return g.value(mse_loss(g, est, g.constant(y)))[0];
}

// ---------------------------------------------------------------------------
// Loop

struct StepLog {
  std::uint64_t step;
  double lr;
  double train_loss;
  std::optional<double> val_loss;
};

class Trainer {
 public:
  /// Fresh run from `spec`.
  Trainer(TrainConfig cfg, const ArchSpec& spec, TrainData data)
      : cfg_(std::move(cfg)), data_(std::move(data)) {
    validate(cfg_);
    ck_.model = build_model<float>(spec);
    ck_.optimizer.lr = cfg_.lr_initial;
    ck_.progress.frame_size = cfg_.frame_size;
    ck_.progress.instrument = cfg_.instrument;
    prepare();
  }

  /// Resumes from a checkpoint; the configuration must match the run that
  /// produced it.
  Trainer(TrainConfig cfg, Checkpoint resume, TrainData data)
      : cfg_(std::move(cfg)), data_(std::move(data)), ck_(std::move(resume)) {
    validate(cfg_);
    MMDENSE_REQUIRE(ck_.progress.frame_size == cfg_.frame_size, Errc::invalid_argument,
                    "checkpoint was trained with frame size " + std::to_string(ck_.progress.frame_size));
    prepare();
  }

  /// The step's batch: scene choice, augmentation and crop all derive from
  /// (seed, step), so a resumed run sees the same data as an uninterrupted one.
  std::pair<Tensor<float>, Tensor<float>> batch_for(std::uint64_t step) const {
    std::seed_seq sq{std::uint32_t(cfg_.seed), std::uint32_t(cfg_.seed >> 32), std::uint32_t(step),
                     std::uint32_t(step >> 32), 0x7261696eu};
    std::mt19937_64 rng(sq);
    AugmentConfig ac = AugmentConfig::identity();
    if (cfg_.augment_gain) ac.gain_lo = 0.25, ac.gain_hi = 1.25;
    if (cfg_.augment_swap) ac.swap_probability = 0.5;
    ac.remix = cfg_.augment_remix;
    ac.crop_samples = crop_samples();
    std::vector<Example> ex;
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
      const auto& scene = data_.train[std::uniform_int_distribution<std::size_t>(0, data_.train.size() - 1)(rng)];
      if (!cfg_.augment_crop) ac.crop_samples = 0;
      Scene s = augment(scene, rng, ac, &data_.train);
      ex.push_back(make_example(s, cfg_.instrument, cfg_.frame_size, cfg_.segment_frames));
    }
    return stack(ex);
  }

  /// Runs until `max_steps` (or `until` if smaller). `on_step` sees every log row.
  void run(std::uint64_t until = std::numeric_limits<std::uint64_t>::max(),
           const std::function<void(const StepLog&)>& on_step = {}) {
    const std::uint64_t last = std::min<std::uint64_t>(until, cfg_.max_steps);
    while (ck_.progress.step < last) {
      const std::uint64_t step = ck_.progress.step;
      auto [x, y] = batch_for(step);
      double loss;
      try {
        loss = train_step(ck_.model, ck_.optimizer, x, y);
      } catch (const Error& e) {
        if (e.code() == Errc::nan_detected && !out_dir_.empty()) save_checkpoint(ck_, path("abort.ckpt"));
        throw;
      }
      ck_.progress.step = step + 1;
      StepLog log{ck_.progress.step, ck_.optimizer.lr, loss, std::nullopt};
      if (cfg_.eval_every && ck_.progress.step % cfg_.eval_every == 0 && val_x_) log.val_loss = validate_and_schedule();
      write_metrics(log);
      if (on_step) on_step(log);
      if (!out_dir_.empty() && cfg_.checkpoint_every && ck_.progress.step % cfg_.checkpoint_every == 0)
        save_checkpoint(ck_, path("ckpt"));
    }
    if (!out_dir_.empty()) save_checkpoint(ck_, path("ckpt"));
  }

  /// Directory for `<instrument>.ckpt` and `<instrument>_metrics.csv`.
  void set_output(const std::string& dir) {
    out_dir_ = dir;
    std::filesystem::create_directories(dir);
    const std::string p = (std::filesystem::path(dir) / (cfg_.instrument + "_metrics.csv")).string();
    const bool fresh = ck_.progress.step == 0 || !std::filesystem::exists(p);
    metrics_.open(p, fresh ? std::ios::trunc : std::ios::app);
    MMDENSE_REQUIRE(metrics_, Errc::io_error, "cannot write '" + p + "'");
    if (fresh) metrics_ << "step,lr,train_loss,val_loss\n";
  }

  std::string checkpoint_path() const { return path("ckpt"); }
  const Checkpoint& checkpoint() const { return ck_; }
  Checkpoint& checkpoint() { return ck_; }
  const TrainConfig& config() const { return cfg_; }

  std::optional<double> validation_loss() const {
    if (!val_x_) return std::nullopt;
    return eval_loss(ck_.model, *val_x_, *val_y_);
  }

 private:
  std::size_t crop_samples() const { return cfg_.segment_frames * (cfg_.frame_size / 2); }

  void prepare() {
    MMDENSE_REQUIRE(!data_.train.empty(), Errc::empty_input, "training data is empty");
    for (const auto& s : data_.train)
      MMDENSE_REQUIRE(s.has_source(cfg_.instrument), Errc::invalid_argument,
                      "a training scene lacks the '" + cfg_.instrument + "' source");
    if (!data_.val.empty()) {
      std::vector<Example> ex;
      AugmentConfig ac = AugmentConfig::identity();
      ac.crop_samples = crop_samples();
      std::mt19937_64 unused(0);
      for (const auto& s : data_.val) ex.push_back(make_example(augment(s, unused, ac), cfg_.instrument,
                                                                cfg_.frame_size, cfg_.segment_frames));
      auto [x, y] = stack(ex);
      val_x_ = std::move(x);
      val_y_ = std::move(y);
    }
  }

  // Plateau rule: a validation that fails to beat the best by the threshold
  // counts as stale; `plateau_patience` stale validations drop the rate once.
  double validate_and_schedule() {
    const double v = *validation_loss();
    auto& p = ck_.progress;
    if (p.best_val < 0 || v < p.best_val * (1.0 - cfg_.plateau_threshold)) {
      p.best_val = v;
      p.stale_evals = 0;
    } else if (++p.stale_evals >= cfg_.plateau_patience && ck_.optimizer.lr != cfg_.lr_reduced) {
      ck_.optimizer.lr = cfg_.lr_reduced;
    }
    return v;
  }

  void write_metrics(const StepLog& l) {
    if (!metrics_.is_open()) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,", static_cast<unsigned long long>(l.step), l.lr, l.train_loss);
    metrics_ << buf;
    if (l.val_loss) {
      std::snprintf(buf, sizeof buf, "%.9g", *l.val_loss);
      metrics_ << buf;
    }
    metrics_ << "\n";
    metrics_.flush();
  }

  std::string path(const std::string& ext) const {
    return (std::filesystem::path(out_dir_) / (cfg_.instrument + "." + ext)).string();
  }

  TrainConfig cfg_;
  TrainData data_;
  Checkpoint ck_;
  std::optional<Tensor<float>> val_x_, val_y_;
  std::string out_dir_;
  std::ofstream metrics_;
};

}  // namespace mmdense
