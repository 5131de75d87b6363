#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "mmdense/checkpoint.hpp"
#include "mmdense/gradcheck.hpp"
#include "mmdense/train.hpp"
#include "test_util.hpp"

using namespace mmdense;

namespace {

ArchSpec micro_arch(std::uint64_t seed = 0) {
  ArchSpec s = scale_widths(mmdensenet_table1(), 0.125);
  s.name = "micro";
  s.seed = seed;
  return s;
}

// Small enough for hundreds of steps per test: 1 s scenes at 8 kHz, 128-sample
// frames (64 network bins), 16-frame segments.
TrainConfig micro_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.instrument = "tonal";
  c.seed = seed;
  c.frame_size = 128;
  c.segment_frames = 16;
  c.batch = 2;
  c.eval_every = 0;
  c.checkpoint_every = 0;
  c.max_steps = 20;
  c.train_scenes = 3;
  c.val_scenes = 1;
  c.scene_seconds = 1.0;
  c.sample_rate = 8000;
  c.recipes = {"tonal", "noise-burst"};
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mmdense_trainer_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

void expect_same_params(const Model<float>& a, const Model<float>& b) {
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params.entries()[i].name, b.params.entries()[i].name);
    EXPECT_EQ(a.params.entries()[i].value, b.params.entries()[i].value) << a.params.entries()[i].name;
  }
}

GradMap<float> grads_of(const std::vector<std::pair<std::string, Tensor<float>>>& gs) {
  GradMap<float> m;
  std::size_t id = 0;
  for (const auto& [n, t] : gs) m.insert(Var{id++}, n, t);
  return m;
}

// Re-frames an edited YAML header so the size line stays consistent.
std::string with_header(const std::string& bytes, const std::function<void(std::string&)>& edit) {
  const auto l1 = bytes.find('\n'), l2 = bytes.find('\n', l1 + 1);
  const std::size_t n = std::stoul(bytes.substr(l1 + 1 + 13, l2 - l1 - 14));
  std::string header = bytes.substr(l2 + 1, n);
  edit(header);
  return bytes.substr(0, l1 + 1) + "header-bytes " + std::to_string(header.size()) + "\n" + header + bytes.substr(l2 + 1 + n);
}

double energy_above(const AudioClip& c, double hz) {
  const auto m = magnitude(stft(c, 1024));
  const double bin_hz = double(c.sample_rate) / 1024;
  double above = 0, total = 0;
  for (std::size_t ch = 0; ch < m.channels; ++ch)
    for (std::size_t t = 0; t < m.frames; ++t)
      for (std::size_t f = 0; f < m.bins; ++f) {
        const double p = double(m.at(ch, t, f)) * m.at(ch, t, f);
        total += p;
        if (double(f) * bin_hz > hz) above += p;
      }
  return above / total;
}

}  // namespace

TEST(Synth, SameSeedBitIdentical) {
  const SceneConfig cfg{16000, 1.0, {Recipe::tonal, Recipe::noise_burst, Recipe::bass, Recipe::texture}};
  const auto a = synth_dataset(5, 3, cfg), b = synth_dataset(5, 3, cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].mixture, b[i].mixture);
    EXPECT_EQ(a[i].sources, b[i].sources);
    EXPECT_EQ(a[i].mixture, synth_scene(5, i, cfg).mixture);
  }
  EXPECT_NE(a[0].mixture, a[1].mixture);
  EXPECT_NE(synth_scene(6, 0, cfg).mixture, a[0].mixture);
}

TEST(Synth, MixtureIsExactSumOfSources) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scene s = synth_scene(seed, seed * 7, SceneConfig{16000, 0.5, {Recipe::tonal, Recipe::bass, Recipe::texture}});
    ASSERT_EQ(s.sources.size(), 3u);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < s.mixture.length(); ++i) {
        float sum = 0;
        for (const auto& [n, clip] : s.sources) sum += clip.samples[c][i];
        ASSERT_EQ(s.mixture.samples[c][i] - sum, 0.0f);
      }
  }
}

TEST(Synth, BassStaysBelowTwoKilohertz) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scene s = synth_scene(seed, 0, SceneConfig{16000, 2.0, {Recipe::bass}});
    EXPECT_LT(energy_above(s.source("bass"), 2000.0), 0.01) << seed;
  }
}

TEST(Synth, RecipesAreNamed) {
  EXPECT_EQ(parse_recipe("noise-burst"), Recipe::noise_burst);
  EXPECT_ERRC(parse_recipe("vocals"), Errc::invalid_argument);
  const Scene s = synth_scene(0, 0, SceneConfig{8000, 0.25, {Recipe::tonal, Recipe::noise_burst}});
  EXPECT_TRUE(s.has_source("tonal"));
  EXPECT_TRUE(s.has_source("noise-burst"));
  EXPECT_EQ(s.mixture.channels(), 2u);
  EXPECT_EQ(s.mixture.length(), 2000u);
}

TEST(Synth, DatasetRoundTripsThroughDisk) {
  const auto dir = temp_dir("dataset");
  const SceneConfig cfg{8000, 0.25, {Recipe::tonal, Recipe::noise_burst}};
  save_scene(synth_scene(1, 0, cfg), (dir / "song_a").string());
  save_scene(synth_scene(1, 1, cfg), (dir / "song_b").string());
  EXPECT_EQ(list_songs(dir.string()), (std::vector<std::string>{"song_a", "song_b"}));
  const Scene back = load_scene((dir / "song_b").string(), {"tonal", "noise-burst"});
  EXPECT_EQ(back.mixture, synth_scene(1, 1, cfg).mixture);
  EXPECT_EQ(back.source("tonal"), synth_scene(1, 1, cfg).source("tonal"));
}

TEST(Augment, IdentityConfigIsIdentity) {
  const Scene s = synth_scene(2, 0, SceneConfig{8000, 0.5, {Recipe::tonal, Recipe::noise_burst}});
  std::mt19937_64 rng(1);
  const Scene a = augment(s, rng, AugmentConfig::identity());
  EXPECT_EQ(a.mixture, s.mixture);
  EXPECT_EQ(a.sources, s.sources);
}

TEST(Augment, MixtureAlwaysExactSum) {
  const SceneConfig cfg{8000, 0.5, {Recipe::tonal, Recipe::noise_burst, Recipe::texture}};
  const auto pool = synth_dataset(3, 4, cfg);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    AugmentConfig ac;
    ac.crop_samples = trial % 2 ? 1000 : 0;
    const Scene a = augment(pool[std::size_t(trial) % 4], rng, ac, &pool);
    if (trial % 2) {
      ASSERT_EQ(a.mixture.length(), 1000u);
    }
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < a.mixture.length(); ++i) {
        float sum = 0;
        for (const auto& [n, clip] : a.sources) sum += clip.samples[c][i];
        ASSERT_EQ(a.mixture.samples[c][i], sum);
      }
  }
}

TEST(Augment, GainWithinRange) {
  const Scene s = synth_scene(4, 0, SceneConfig{8000, 0.5, {Recipe::tonal}});
  std::mt19937_64 rng(3);
  AugmentConfig ac = AugmentConfig::identity();
  ac.gain_lo = 0.25;
  ac.gain_hi = 1.25;
  const auto& ref = s.source("tonal").samples[0];
  std::size_t k = 0;
  while (ref[k] == 0.0f) ++k;
  for (int trial = 0; trial < 20; ++trial) {
    const Scene a = augment(s, rng, ac);
    const auto& got = a.source("tonal").samples[0];
    const double g = double(got[k]) / ref[k];
    EXPECT_GE(g, 0.25 - 1e-6);
    EXPECT_LE(g, 1.25 + 1e-6);
  }
}

TEST(Augment, ChannelSwapIsInvolution) {
  const Scene s = synth_scene(5, 0, SceneConfig{8000, 0.5, {Recipe::tonal}});
  AudioClip c = s.source("tonal");
  swap_channels(c);
  EXPECT_NE(c, s.source("tonal"));
  swap_channels(c);
  EXPECT_EQ(c, s.source("tonal"));
  AugmentConfig always = AugmentConfig::identity();
  always.swap_probability = 1.0;
  std::mt19937_64 r1(4);
  const Scene once = augment(s, r1, always);
  std::mt19937_64 r2(4);
  EXPECT_EQ(augment(once, r2, always).mixture, s.mixture);
}

TEST(MseLoss, Examples) {
  std::mt19937_64 rng(5);
  auto t = Tensor<double>::uniform({2, 3, 4}, -1, 1, rng);
  Graph<double> g;
  EXPECT_EQ(g.value(mse_loss(g, g.constant(t), g.constant(t)))[0], 0.0);
  auto plus = t;
  for (auto& v : plus.values()) v += 1.0;
  EXPECT_NEAR(g.value(mse_loss(g, g.constant(plus), g.constant(t)))[0], 1.0, 1e-12);
  EXPECT_ERRC(mse_loss(g, g.constant(t), g.constant(Tensor<double>({2, 3, 5}))), Errc::shape_mismatch);
}

TEST(MseLoss, GradientIsTwiceResidualOverN) {
  std::mt19937_64 rng(6);
  const auto est = Tensor<double>::uniform({2, 3, 4}, -1, 1, rng), tgt = Tensor<double>::uniform({2, 3, 4}, -1, 1, rng);
  Graph<double> g;
  Var e = g.parameter(est, "est");
  auto grads = g.backward(mse_loss(g, e, g.constant(tgt)));
  for (std::size_t i = 0; i < est.size(); ++i) EXPECT_NEAR(grads[e][i], 2 * (est[i] - tgt[i]) / 24.0, 1e-15);
  auto r = grad_check([&](Graph<double>& h, Var v) { return mse_loss(h, v, h.constant(tgt)); }, est, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Rmsprop, ZeroGradientLeavesParametersAndDecaysAccumulator) {
  ParamStore<float> p;
  p.add("w", "w", Tensor<float>({3}, {1, 2, 3}));
  RmspropState s;
  rmsprop_step(p, grads_of({{"w", Tensor<float>({3}, 0.5f)}}), s);
  const auto after_first = p.at("w");
  const float acc = s.mean_square.at("w")[0];
  EXPECT_NEAR(acc, 0.1f * 0.25f, 1e-9);
  rmsprop_step(p, grads_of({{"w", Tensor<float>({3}, 0.0f)}}), s);
  EXPECT_EQ(p.at("w"), after_first);
  EXPECT_NEAR(s.mean_square.at("w")[0], 0.9f * acc, 1e-9);
}

TEST(Rmsprop, FirstStepIsScaledSign) {
  for (float gv : {2.0f, -0.3f, 1e-3f}) {
    ParamStore<float> p;
    p.add("w", "w", Tensor<float>({1}, 0.0f));
    RmspropState s;
    rmsprop_step(p, grads_of({{"w", Tensor<float>({1}, gv)}}), s);
    const double want = -1e-3 * gv / (std::sqrt(0.1) * std::abs(gv) + 1e-8);
    EXPECT_NEAR(p.at("w")[0], want, 1e-8) << gv;
    EXPECT_NEAR(p.at("w")[0], -1e-3 * (gv > 0 ? 1 : -1) / std::sqrt(0.1), 1e-6);
  }
}

TEST(Rmsprop, IdenticalGradientsUpdateIdentically) {
  ParamStore<float> p;
  p.add("a", "a", Tensor<float>({2}, {0.5f, -1}));
  p.add("b", "b", Tensor<float>({2}, {0.5f, -1}));
  RmspropState s;
  const auto g = grads_of({{"a", Tensor<float>({2}, {0.3f, -2})}, {"b", Tensor<float>({2}, {0.3f, -2})}});
  for (int i = 0; i < 5; ++i) rmsprop_step(p, g, s);
  EXPECT_EQ(p.at("a"), p.at("b"));
}

TEST(Rmsprop, NonFiniteGradientRefusesWholeStep) {
  ParamStore<float> p;
  p.add("a", "a", Tensor<float>({2}, 1.0f));
  p.add("b", "b", Tensor<float>({2}, 1.0f));
  RmspropState s;
  const auto g = grads_of({{"a", Tensor<float>({2}, 0.5f)},
                           {"b", Tensor<float>({2}, {0.5f, std::numeric_limits<float>::quiet_NaN()})}});
  try {
    rmsprop_step(p, g, s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::nan_detected);
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_EQ(p.at("a"), Tensor<float>({2}, 1.0f));
  EXPECT_TRUE(s.mean_square.empty());
}

TEST(TrainConfig, ParseDefaultsAndNesting) {
  const auto c = parse_config(
      "instrument: noise-burst\nbatch: 2\nsegment_frames: 64\naugment: {remix: false}\n"
      "synthetic: {train_scenes: 7, recipes: [tonal, noise-burst]}\n");
  EXPECT_EQ(c.instrument, "noise-burst");
  EXPECT_EQ(c.batch, 2u);
  EXPECT_EQ(c.segment_frames, 64u);
  EXPECT_FALSE(c.augment_remix);
  EXPECT_TRUE(c.augment_gain);
  EXPECT_EQ(c.train_scenes, 7u);
  EXPECT_EQ(c.recipes, (std::vector<std::string>{"tonal", "noise-burst"}));
  EXPECT_EQ(c.lr_initial, 1e-3);
  EXPECT_EQ(c.lr_reduced, 1e-4);
  EXPECT_EQ(parse_config("").batch, TrainConfig{}.batch);
}

TEST(TrainConfig, DumpRoundTrips) {
  auto c = micro_config(9);
  c.augment_swap = false;
  const auto back = parse_config(dump_config(c));
  EXPECT_EQ(dump_config(back), dump_config(c));
  EXPECT_EQ(back.seed, 9u);
  EXPECT_FALSE(back.augment_swap);
}

TEST(TrainConfig, RejectsBadValuesAndUnknownKeys) {
  EXPECT_ERRC(parse_config("segment_frames: 12\n"), Errc::invalid_argument);
  EXPECT_ERRC(parse_config("lr_initial: 0.001\nlr_reduced: 0.01\n"), Errc::invalid_argument);
  EXPECT_ERRC(parse_config("train_scenes: 5\n"), Errc::malformed_header);
  EXPECT_ERRC(parse_config("augment: {gain: true, flip: true}\n"), Errc::malformed_header);
  EXPECT_ERRC(parse_config("batch: [1, 2]\n"), Errc::malformed_header);
  EXPECT_ERRC(parse_config("- a\n"), Errc::malformed_header);
}

TEST(Trainer, ZeroLearningRateLeavesParameters) {
  auto c = micro_config(1);
  c.lr_initial = c.lr_reduced = 0;
  c.max_steps = 3;
  const auto before = build_model<float>(micro_arch());
  Trainer t(c, micro_arch(), synthetic_data(c));
  std::vector<StepLog> logs;
  t.run(std::numeric_limits<std::uint64_t>::max(), [&](const StepLog& l) { logs.push_back(l); });
  ASSERT_EQ(logs.size(), 3u);
  for (const auto& l : logs) EXPECT_TRUE(std::isfinite(l.train_loss) && l.train_loss > 0);
  expect_same_params(t.checkpoint().model, before);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  auto c = micro_config(2);
  c.eval_every = 5;
  c.plateau_patience = 1;
  c.max_steps = 16;
  std::vector<double> straight;
  {
    Trainer t(c, micro_arch(), synthetic_data(c));
    t.run(std::numeric_limits<std::uint64_t>::max(), [&](const StepLog& l) { straight.push_back(l.train_loss); });
  }
  const auto dir = temp_dir("resume");
  std::vector<double> resumed;
  {
    Trainer t(c, micro_arch(), synthetic_data(c));
    t.set_output(dir.string());
    t.run(10, [&](const StepLog& l) { resumed.push_back(l.train_loss); });
  }
  Trainer t(c, load_checkpoint((dir / "tonal.ckpt").string()), synthetic_data(c));
  EXPECT_EQ(t.checkpoint().progress.step, 10u);
  t.run(std::numeric_limits<std::uint64_t>::max(), [&](const StepLog& l) { resumed.push_back(l.train_loss); });
  ASSERT_EQ(resumed.size(), straight.size());
  for (std::size_t i = 0; i < straight.size(); ++i)
    EXPECT_NEAR(resumed[i], straight[i], 1e-6 * std::max(1.0, std::abs(straight[i]))) << "step " << i + 1;
}

TEST(Trainer, PlateauDropsLearningRateOnce) {
  auto c = micro_config(3);
  c.lr_initial = 1e-12;
  c.lr_reduced = 1e-13;
  c.eval_every = 1;
  c.plateau_patience = 3;
  c.max_steps = 6;
  Trainer t(c, micro_arch(), synthetic_data(c));
  std::vector<double> lrs;
  t.run(std::numeric_limits<std::uint64_t>::max(), [&](const StepLog& l) {
    ASSERT_TRUE(l.val_loss.has_value());
    lrs.push_back(t.checkpoint().optimizer.lr);
  });
  // Evaluation 1 sets the best; evaluations 2-4 are stale.
  EXPECT_EQ(lrs, (std::vector<double>{1e-12, 1e-12, 1e-12, 1e-13, 1e-13, 1e-13}));
}

TEST(Trainer, WritesMetricsAndCheckpoint) {
  auto c = micro_config(4);
  c.max_steps = 4;
  c.eval_every = 2;
  c.checkpoint_every = 2;
  const auto dir = temp_dir("metrics");
  Trainer t(c, micro_arch(), synthetic_data(c));
  t.set_output(dir.string());
  t.run();
  std::ifstream in(dir / "tonal_metrics.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "step,lr,train_loss,val_loss");
  EXPECT_TRUE(lines[1].ends_with(","));
  EXPECT_FALSE(lines[2].ends_with(","));
  const auto ck = load_checkpoint((dir / "tonal.ckpt").string());
  EXPECT_EQ(ck.progress.step, 4u);
  EXPECT_EQ(ck.progress.instrument, "tonal");
  EXPECT_EQ(ck.progress.frame_size, 128u);
}

TEST(Trainer, DivergenceAbortsWithCheckpoint) {
  auto c = micro_config(5);
  const auto dir = temp_dir("abort");
  Trainer t(c, micro_arch(), synthetic_data(c));
  t.set_output(dir.string());
  t.checkpoint().model.params.at("final.bias")[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_ERRC(t.run(), Errc::nan_detected);
  EXPECT_TRUE(std::filesystem::exists(dir / "tonal.abort.ckpt"));
  EXPECT_EQ(t.checkpoint().progress.step, 0u);
}

TEST(Trainer, MissingInstrumentRejected) {
  auto c = micro_config(6);
  c.instrument = "bass";
  EXPECT_ERRC((void)Trainer(c, micro_arch(), synthetic_data(micro_config(6))), Errc::invalid_argument);
}

// Overfitting one short scene (no augmentation, one segment covering the
// whole clip, so every step sees the same batch). The loss on that fixed
// batch, scored through the eval path, must fall in at least 9 of 10 seeds,
// and the training loss must end below where it started.
TEST(Trainer, OverfitsSingleScene) {
  int improved = 0, train_improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = micro_config(seed);
    c.train_scenes = 1;
    c.val_scenes = 0;
    c.batch = 1;
    c.scene_seconds = 0.25;
    c.segment_frames = 32;
    c.max_steps = 500;
    c.augment_gain = c.augment_swap = c.augment_remix = c.augment_crop = false;
    Trainer t(c, micro_arch(seed), synthetic_data(c));
    const auto [x, y] = t.batch_for(0);
    const double before = eval_loss(t.checkpoint().model, x, y);
    double first = -1, last = 0;
    t.run(c.max_steps, [&](const StepLog& l) {
      if (first < 0) first = l.train_loss;
      last = l.train_loss;
    });
    const double after = eval_loss(t.checkpoint().model, x, y);
    improved += after < before;
    train_improved += last < first;
    EXPECT_GT(first, 0.0) << "seed " << seed << ": target is silent, the batch is trivial";
  }
  EXPECT_GE(improved, 9);
  EXPECT_EQ(train_improved, 10);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  auto c = micro_config(7);
  c.max_steps = 3;
  Trainer t(c, micro_arch(), synthetic_data(c));
  t.run();
  const Checkpoint& ck = t.checkpoint();
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  expect_same_params(back.model, ck.model);
  EXPECT_EQ(back.model.fingerprint, ck.model.fingerprint);
  EXPECT_EQ(back.model.spec, ck.model.spec);
  ASSERT_EQ(back.model.bn_states.size(), ck.model.bn_states.size());
  for (const auto& [k, s] : ck.model.bn_states) {
    EXPECT_EQ(back.model.bn_states.at(k).running_mean, s.running_mean);
    EXPECT_EQ(back.model.bn_states.at(k).running_var, s.running_var);
  }
  EXPECT_EQ(back.optimizer.mean_square, ck.optimizer.mean_square);
  EXPECT_EQ(back.optimizer.lr, ck.optimizer.lr);
  EXPECT_EQ(back.progress.step, 3u);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, DistinctErrors) {
  Checkpoint ck;
  ck.model = build_model<float>(micro_arch());
  const std::string bytes = encode_checkpoint(ck);

  std::string v2 = bytes;
  v2.replace(v2.find("version: 1"), 10, "version: 7");
  EXPECT_ERRC(decode_checkpoint(v2), Errc::version_mismatch);

  std::string fp = bytes;
  const auto at = fp.find(ck.model.fingerprint);
  fp.replace(at, 16, "0123456789abcdef");
  EXPECT_ERRC(decode_checkpoint(fp), Errc::fingerprint_mismatch);

  EXPECT_ERRC(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), Errc::truncated_payload);
  EXPECT_ERRC(decode_checkpoint(bytes.substr(0, 60)), Errc::truncated_payload);
  EXPECT_ERRC(decode_checkpoint("not a checkpoint"), Errc::malformed_header);

  Checkpoint wrong = ck;
  wrong.model.params.at("final.bias") = Tensor<float>({3});
  EXPECT_ERRC(decode_checkpoint(encode_checkpoint(wrong)), Errc::shape_mismatch);

  Model<float> other = build_model<float>(mdensenet_table1());
  EXPECT_ERRC(load_into(other, ck), Errc::fingerprint_mismatch);
  Model<float> same = build_model<float>(micro_arch(3));
  load_into(same, ck);
  expect_same_params(same, ck.model);
}

TEST(Checkpoint, OffsetPastEndIsTruncation) {
  Checkpoint ck;
  ck.model = build_model<float>(micro_arch());
  const std::string bytes = with_header(encode_checkpoint(ck), [](std::string& h) {
    const auto key = h.rfind("offset: ");
    h.replace(key, h.find_first_of(",}", key) - key, "offset: 99999999");
  });
  EXPECT_ERRC(decode_checkpoint(bytes), Errc::truncated_payload);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = temp_dir("file");
  Checkpoint ck;
  ck.model = build_model<float>(micro_arch(4));
  ck.progress.step = 42;
  save_checkpoint(ck, (dir / "x.ckpt").string());
  const auto back = load_checkpoint((dir / "x.ckpt").string());
  expect_same_params(back.model, ck.model);
  EXPECT_EQ(back.progress.step, 42u);
  EXPECT_FALSE(std::filesystem::exists(dir / "x.ckpt.tmp"));
  EXPECT_ERRC(load_checkpoint((dir / "missing.ckpt").string()), Errc::io_error);
}
