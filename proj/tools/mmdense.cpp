// mmdense: command-line front end for training, separation, evaluation and
// architecture analysis.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "mmdense/gradsuite.hpp"
#include "mmdense/mmdense.hpp"

namespace fs = std::filesystem;
using namespace mmdense;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitFailure = 2;

void write_or_print(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream f(out);
  MMDENSE_REQUIRE(f, Errc::io_error, "cannot write '" + out + "'");
  f << text;
}

// Every `<instrument>.ckpt` in `dir`, keyed by instrument. All must share
// one frame size, which is returned.
std::size_t load_models(const std::string& dir, ModelSet& models) {
  std::size_t frame = 0;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ckpt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    Checkpoint ck = load_checkpoint(p.string());
    MMDENSE_REQUIRE(frame == 0 || ck.progress.frame_size == frame, Errc::invalid_argument,
                    p.string() + " was trained with a different frame size");
    frame = ck.progress.frame_size;
    models.emplace(p.stem().string(), std::move(ck.model));
  }
  MMDENSE_REQUIRE(!models.empty(), Errc::empty_input, "no .ckpt files in '" + dir + "'");
  return frame;
}

struct Common {
  std::uint64_t seed = 0;
  std::string arch = "mmdensenet-table1";
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool with_arch = true) {
  app->add_option("--seed", c.seed, "Random seed");
  if (with_arch) app->add_option("--arch", c.arch, "Architecture preset name or YAML file")->capture_default_str();
  app->add_option("--out", c.out, "Output file or directory");
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Multi-scale multi-band DenseNet source separation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  // train
  Common tc;
  std::string config_path, data_root, resume, instrument;
  long steps = -1;
  double width = 1.0;
  auto* train = app.add_subcommand("train", "Train one instrument model");
  add_common(train, tc);
  train->add_option("--config", config_path, "Training config (YAML)");
  train->add_option("--instrument", instrument, "Override the config's instrument");
  train->add_option("--steps", steps, "Override max_steps");
  train->add_option("--width", width, "Scale all architecture widths by this factor")->check(CLI::PositiveNumber);
  train->add_option("--data", data_root, "Dataset root <root>/<song>/{mixture,<instrument>}.wav (default: synthetic)");
  train->add_option("--resume", resume, "Checkpoint to resume from");

  // separate
  Common sc;
  std::string input, models_dir, method = "mwf";
  int mwf_iters = 1;
  auto* separate = app.add_subcommand("separate", "Separate a mixture WAV into <out>/<instrument>.wav");
  add_common(separate, sc, false);
  separate->add_option("input", input, "Mixture WAV")->required();
  separate->add_option("--models", models_dir, "Directory of <instrument>.ckpt files")->required();
  separate->add_option("--method", method, "mask or mwf")->check(CLI::IsMember({"mask", "mwf"}))->capture_default_str();
  separate->add_option("--mwf-iterations", mwf_iters, "Wiener filter iterations")->check(CLI::PositiveNumber);

  // evaluate
  Common ec;
  std::string eval_root, eval_models;
  std::string eval_method = "mwf";
  bool baseline = false;
  auto* evaluate = app.add_subcommand("evaluate", "Score separations on a dataset directory");
  add_common(evaluate, ec, false);
  evaluate->add_option("root", eval_root, "Dataset root")->required();
  evaluate->add_option("--models", eval_models, "Directory of <instrument>.ckpt files");
  evaluate->add_option("--method", eval_method, "mask or mwf")->check(CLI::IsMember({"mask", "mwf"}));
  evaluate->add_option("--instruments", instrument, "Comma-separated instruments for --baseline");
  evaluate->add_flag("--baseline", baseline, "Score the unseparated mixture as every estimate");

  // analyze
  Common ac;
  std::string what, ckpt_path;
  auto* analyze = app.add_subcommand("analyze", "params | rf | knorm as CSV");
  add_common(analyze, ac);
  analyze->add_option("what", what, "params, rf or knorm")->required()->check(CLI::IsMember({"params", "rf", "knorm"}));
  analyze->add_option("--checkpoint", ckpt_path, "Analyze a trained checkpoint instead of a fresh build");

  // gradcheck
  Common gc;
  bool quick = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  add_common(gradcheck, gc, false);
  gradcheck->add_flag("--quick", quick, "Skip the end-to-end network check");

  // synth
  Common yc;
  std::size_t scenes = 10;
  double seconds = 4.0;
  std::uint32_t rate = 16000;
  std::vector<std::string> recipes{"tonal", "noise-burst", "bass", "texture"};
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset <out>/<song>/{mixture,<source>}.wav");
  add_common(synth, yc, false);
  synth->add_option("--scenes", scenes, "Scene count")->check(CLI::PositiveNumber);
  synth->add_option("--seconds", seconds, "Scene duration")->check(CLI::PositiveNumber);
  synth->add_option("--rate", rate, "Sample rate")->check(CLI::PositiveNumber);
  synth->add_option("--recipes", recipes, "Source recipes")->delimiter(',');

  // arch
  Common rc;
  auto* arch = app.add_subcommand("arch", "Print an architecture as YAML");
  add_common(arch, rc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) {
      TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
      if (!instrument.empty()) cfg.instrument = instrument;
      if (steps >= 0) cfg.max_steps = std::size_t(steps);
      if (train->count("--seed")) cfg.seed = tc.seed;
      validate(cfg);
      TrainData data;
      if (data_root.empty()) {
        data = synthetic_data(cfg);
      } else {
        auto songs = load_dataset(data_root, {cfg.instrument});
        // The last tenth of the songs (at least one, if there are two or more) validates.
        const std::size_t n_val = songs.size() > 1 ? std::max<std::size_t>(1, songs.size() / 10) : 0;
        for (std::size_t i = 0; i < songs.size(); ++i)
          (i + n_val < songs.size() ? data.train : data.val).push_back(std::move(songs[i].second));
      }
      const std::string out = tc.out.empty() ? "checkpoints" : tc.out;
      std::optional<Trainer> trainer;
      if (!resume.empty()) {
        trainer.emplace(cfg, load_checkpoint(resume), std::move(data));
      } else {
        ArchSpec spec = load_arch(tc.arch);
        if (width != 1.0) spec = scale_widths(spec, width);
        spec.seed = cfg.seed;
        trainer.emplace(cfg, spec, std::move(data));
      }
      trainer->set_output(out);
      trainer->run(std::numeric_limits<std::uint64_t>::max(), [](const StepLog& l) {
        if (l.val_loss)
          std::cerr << "step " << l.step << "  lr " << l.lr << "  train " << l.train_loss << "  val " << *l.val_loss
                    << "\n";
      });
      std::cout << trainer->checkpoint_path() << "\n";
    } else if (*separate) {
      ModelSet models;
      SeparateOptions opt;
      opt.frame_size = load_models(models_dir, models);
      opt.method = parse_method(method);
      opt.mwf.iterations = mwf_iters;
      for (const auto& p : separate_file(input, models, sc.out.empty() ? "separated" : sc.out, opt))
        std::cout << p << "\n";
    } else if (*evaluate) {
      std::vector<std::string> insts;
      ModelSet models;
      SeparateOptions opt;
      opt.method = parse_method(eval_method);
      Separator sep;
      if (baseline) {
        std::stringstream ss(instrument.empty() ? "bass,drums,other,vocals" : instrument);
        for (std::string s; std::getline(ss, s, ',');) insts.push_back(s);
        sep = mixture_baseline(insts);
      } else {
        MMDENSE_REQUIRE(!eval_models.empty(), Errc::invalid_argument, "evaluate needs --models or --baseline");
        opt.frame_size = load_models(eval_models, models);
        for (const auto& [k, m] : models) insts.push_back(k);
        sep = model_separator(models, opt);
      }
      const auto rows = evaluate_scenes(load_dataset(eval_root, insts), sep);
      const auto summary = summarize(rows);
      if (ec.out.empty()) {
        std::cout << metrics_csv(rows) << "\n" << summary_csv(summary);
      } else {
        fs::create_directories(ec.out);
        write_or_print(metrics_csv(rows), (fs::path(ec.out) / "metrics.csv").string());
        write_or_print(summary_csv(summary), (fs::path(ec.out) / "summary.csv").string());
        std::cout << summary_csv(summary);
      }
    } else if (*analyze) {
      Model<float> m = ckpt_path.empty() ? [&] {
        ArchSpec s = load_arch(ac.arch);
        s.seed = ac.seed;
        return build_model<float>(s);
      }() : load_checkpoint(ckpt_path).model;
      std::string csv;
      if (what == "params") csv = param_count_csv(count_params(m));
      if (what == "rf") csv = receptive_field_csv(receptive_field(m.spec));
      if (what == "knorm") csv = kernel_norm_csv(kernel_norm_report(m));
      write_or_print(csv, ac.out);
    } else if (*gradcheck) {
      bool ok = true;
      for (const auto& r : run_gradient_suite(gc.seed ? gc.seed : 7, !quick)) {
        std::printf("%-24s max_rel_error %.3e  tol %.0e  %s\n", r.name.c_str(), r.result.max_rel_error, r.tolerance,
                    r.pass() ? "ok" : "FAIL");
        ok = ok && r.pass();
      }
      return ok ? 0 : kExitFailure;
    } else if (*synth) {
      SceneConfig cfg;
      cfg.seconds = seconds;
      cfg.sample_rate = rate;
      cfg.recipes.clear();
      for (const auto& r : recipes) cfg.recipes.push_back(parse_recipe(r));
      const std::string out = yc.out.empty() ? "synthetic" : yc.out;
      for (std::size_t i = 0; i < scenes; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene%03zu", i);
        save_scene(synth_scene(yc.seed, i, cfg), (fs::path(out) / name).string());
      }
      std::cout << out << "\n";
    } else if (*arch) {
      ArchSpec s = load_arch(rc.arch);
      write_or_print(dump_arch(s), rc.out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}
