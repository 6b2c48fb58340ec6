#include "vitscope/cli/app.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <optional>
#include <ostream>

#include "vitscope/cli/pipeline.hpp"
#include "vitscope/cli/report.hpp"

namespace vitscope::cli {

namespace fs = std::filesystem;

namespace {

struct AnalyzeFlags {
  std::string checkpoint;
  std::string data;
  std::string directions;
  std::string out;
  std::size_t jobs = 1;
  bool plot = false;
  std::string mode = "cls";
  double scale = 1.0;
  std::optional<std::size_t> layer;
  double eps = AdvConfig{}.epsilon;
  double step_size = AdvConfig{}.step_size;
  std::size_t steps = AdvConfig{}.steps;
  std::string start = "backdoor";
  std::string layers;
  std::string thresholds = "0.02:2:20";
  double z_cut = 3.0;
  double min_fraction = 0.25;
};

DataBundle load_data(const AnalyzeFlags& f, const Checkpoint& ckpt) {
  if (f.data.empty()) throw UsageError("this command needs --data (a data.archive file)");
  if (!fs::exists(f.data)) throw UsageError("data file not found: " + f.data);
  DataBundle d = data_from_archive(decode_archive(read_file(f.data)));
  check_compatible(ckpt, d);
  return d;
}

DirectionSet load_or_derive(const AnalyzeFlags& f, const Checkpoint& ckpt,
                            const DataBundle& data, SteeringMode mode) {
  const auto& cfg = ckpt.params.config;
  if (!f.directions.empty()) {
    DirectionSet d = directions_from_archive(decode_archive(read_file(f.directions)));
    if (d.layers() != cfg.n_taps()) {
      throw UsageError("directions file has " + std::to_string(d.layers()) +
                       " layers, the model has " + std::to_string(cfg.n_taps()) + " taps");
    }
    if (d.mode == SteeringMode::all_tokens && mode == SteeringMode::cls) {
      return cls_directions(d, cfg.d_model);
    }
    if (d.mode != mode) throw UsageError("directions file holds CLS vectors only");
    return d;
  }
  if (data.pairs.size() == 0) {
    throw UsageError("no contrastive pairs: the data file holds none and no --directions given");
  }
  return derive_directions(ckpt.params, data.pairs, mode);
}

void finish(const fs::path& dir, std::ostream& out) {
  write_manifest(dir);
  out << "wrote " << (dir / "manifest.txt").string() << '\n';
}

int analyze_derive(const AnalyzeFlags& f, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const DataBundle data = load_data(f, ckpt);
  const SteeringMode mode = steering_mode_from_string(f.mode);
  const DirectionSet dirs = load_or_derive(f, ckpt, data, mode);
  const fs::path dir = f.out;
  const std::string stem = "directions_" + to_string(mode);
  write_file(dir / (stem + ".archive"), encode_archive(to_archive(dirs)));
  write_text(dir / (stem + ".csv"), direction_norms_csv(dirs));
  finish(dir, out);
  return kExitOk;
}

int analyze_sweep(const AnalyzeFlags& f, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const DataBundle data = load_data(f, ckpt);
  const SteeringMode mode = steering_mode_from_string(f.mode);
  const DirectionSet dirs = load_or_derive(f, ckpt, data, mode);
  const SteeringSweep sw = steering_sweep(ckpt.params, data.clean_test, data.triggered_test,
                                          data.target_class, dirs, f.scale, f.jobs);
  const fs::path dir = f.out;
  const std::string stem = "sweep_" + to_string(mode);
  write_text(dir / (stem + ".csv"), sweep_csv(sw));
  if (f.plot) write_text(dir / (stem + ".svg"), sweep_svg(sw));
  for (std::size_t l = 0; l < sw.layers(); ++l) {
    out << "layer " << l << ": ASR+ " << fixed(sw.asr_plus[l], 3) << "  RA- "
        << fixed(sw.ra_minus[l], 3) << '\n';
  }
  finish(dir, out);
  return kExitOk;
}

int analyze_orthogonalize(const AnalyzeFlags& f, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const DataBundle data = load_data(f, ckpt);
  const DirectionSet dirs = load_or_derive(f, ckpt, data, SteeringMode::cls);
  SteeringSweep sw;
  if (!f.layer) {
    sw = steering_sweep(ckpt.params, data.clean_test, data.triggered_test, data.target_class,
                        dirs, f.scale, f.jobs);
  }
  const SurgeryOutcome s = run_surgery(ckpt.params, data, sw, dirs, f.layer);
  const fs::path dir = f.out;
  write_text(dir / "surgery.csv", surgery_csv(s));
  write_text(dir / "surgery_metrics.csv",
             metrics_csv({{"original", s.before}, {"orthogonalized", s.after}}));
  Checkpoint edited{s.edit.params, ckpt.meta};
  edited.meta["surgery.layer"] = std::to_string(s.rhat.layer);
  save_checkpoint(dir / "orthogonalized.ckpt", edited);
  out << "r_hat from layer " << s.rhat.layer << ": ASR " << fixed(s.before.asr, 3) << " -> "
      << fixed(s.after.asr, 3) << ", CA " << fixed(s.before.ca, 3) << " -> "
      << fixed(s.after.ca, 3) << '\n';
  finish(dir, out);
  return kExitOk;
}

AdvStart parse_start(const std::string& s) {
  if (s == "backdoor") return AdvStart::backdoor;
  if (s == "clean") return AdvStart::clean;
  throw UsageError("--start must be backdoor or clean");
}

void write_adversarial(const fs::path& dir, const AdversarialOutcome& a, bool plot) {
  const std::string stem = a.start == AdvStart::backdoor ? "adversarial_backdoor"
                                                         : "adversarial_clean";
  write_text(dir / (stem + "_classes.csv"), adversarial_classes_csv(a));
  write_text(dir / (stem + "_cosines.csv"), adversarial_cosines_csv(a));
  if (plot) write_text(dir / (stem + ".svg"), adversarial_svg(a));
}

int analyze_adversarial(const AnalyzeFlags& f, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const DataBundle data = load_data(f, ckpt);
  const DirectionSet dirs = load_or_derive(f, ckpt, data, SteeringMode::cls);
  AdvConfig cfg{f.eps, f.steps, f.step_size};
  const AdversarialOutcome a =
      run_adversarial(ckpt.params, data, dirs, cfg, parse_start(f.start), f.jobs);
  write_adversarial(f.out, a, f.plot);
  out << "original " << fixed(a.classes.original_fraction, 3) << ", target "
      << fixed(a.classes.target_fraction, 3) << ", max |a - x| " << fixed(a.max_linf, 6) << '\n';
  finish(f.out, out);
  return kExitOk;
}

void summary_row(CsvTable& table, const std::string& name, const DetectVerdict& v) {
  table.row({name, std::to_string(v.top_class), fixed(v.top_fraction), fixed(v.any_rate),
             v.flagged ? std::to_string(*v.flagged) : "none"});
}

CsvTable detect_summary_table() {
  return CsvTable({"model", "top_class", "top_fraction", "any_flag_rate", "flagged"});
}

int analyze_detect(const AnalyzeFlags& f, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const auto& cfg = ckpt.params.config;
  std::vector<std::size_t> layers;
  if (f.layers.empty()) {
    layers.resize(cfg.n_blocks);
    std::iota(layers.begin(), layers.end(), std::size_t{1});
  } else {
    layers = parse_layers(f.layers);
  }
  const auto thresholds = parse_thresholds(f.thresholds);
  ZGrid grid;
  try {
    grid = grid_search(ckpt.params, layers, thresholds, f.z_cut, f.jobs);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const DetectVerdict v = detect_verdict(grid, cfg.n_classes, f.min_fraction);
  const fs::path dir = f.out;
  write_text(dir / "detect.csv", grid_csv(grid));
  CsvTable summary = detect_summary_table();
  summary_row(summary, fs::path(f.checkpoint).stem().string(), v);
  write_text(dir / "detect_summary.csv", summary.str());
  if (f.plot) write_text(dir / "detect.svg", grid_svg(grid, "Z over (n, t)"));
  out << "class " << v.top_class << " flagged in " << fixed(100.0 * v.top_fraction, 1)
      << "% of cells; any-class rate " << fixed(100.0 * v.any_rate, 1) << "%\n";
  finish(dir, out);
  if (v.flagged) {
    out << "backdoor flagged: class " << *v.flagged << '\n';
    return kExitFlagged;
  }
  out << "no backdoor flagged\n";
  return kExitOk;
}

RunConfig config_with_overrides(const std::string& path, const std::string& out_dir) {
  RunConfig c = load_run_config(path);
  if (!out_dir.empty()) c.output_dir = out_dir;
  return c;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  const fs::path dir = c.output_dir;
  const TrainedRun run = train_models(c, out);
  write_training(dir, c, run);
  finish(dir, out);
  return kExitOk;
}

int cmd_run(const RunConfig& c, std::ostream& out) {
  const fs::path dir = c.output_dir;
  const auto& a = c.analysis;
  const TrainedRun run = train_models(c, out);
  write_training(dir, c, run);
  const ModelParams& p = run.backdoored.params;
  const DataBundle& data = run.data;
  std::vector<std::pair<std::string, EvalMetrics>> metrics{
      {"backdoored", run.backdoored_metrics}, {"clean", run.clean_metrics}};

  if (a.sweep || a.surgery || a.adversarial) {
    out << "analysis: deriving directions\n";
    const DirectionSet all = derive_directions(p, data.pairs, SteeringMode::all_tokens);
    const DirectionSet cls = cls_directions(all, p.config.d_model);
    for (const auto* d : {&all, &cls}) {
      const std::string stem = "directions_" + to_string(d->mode);
      write_file(dir / (stem + ".archive"), encode_archive(to_archive(*d)));
      write_text(dir / (stem + ".csv"), direction_norms_csv(*d));
    }
    SteeringSweep cls_sweep;
    if (a.sweep || a.surgery) {
      out << "analysis: steering sweep\n";
      cls_sweep = steering_sweep(p, data.clean_test, data.triggered_test, data.target_class,
                                 cls, a.steer_scale, a.jobs);
      write_text(dir / "sweep_cls.csv", sweep_csv(cls_sweep));
      if (a.plot) write_text(dir / "sweep_cls.svg", sweep_svg(cls_sweep));
    }
    if (a.sweep) {
      const SteeringSweep sw = steering_sweep(p, data.clean_test, data.triggered_test,
                                              data.target_class, all, a.steer_scale, a.jobs);
      write_text(dir / "sweep_all_tokens.csv", sweep_csv(sw));
      if (a.plot) write_text(dir / "sweep_all_tokens.svg", sweep_svg(sw));
    }
    if (a.surgery) {
      out << "analysis: orthogonalization\n";
      const SurgeryOutcome s = run_surgery(p, data, cls_sweep, cls);
      write_text(dir / "surgery.csv", surgery_csv(s));
      Checkpoint edited{s.edit.params, run.backdoored.meta};
      edited.meta["surgery.layer"] = std::to_string(s.rhat.layer);
      save_checkpoint(dir / "orthogonalized.ckpt", edited);
      metrics.emplace_back("orthogonalized", s.after);
    }
    if (a.adversarial) {
      out << "analysis: adversarial probe\n";
      const AdvConfig ac{a.adv_epsilon, a.adv_steps, a.adv_step_size};
      write_adversarial(dir, run_adversarial(p, data, cls, ac, AdvStart::backdoor, a.jobs),
                        a.plot);
    }
  }
  if (a.detect) {
    out << "analysis: weight detector\n";
    std::vector<std::size_t> layers(p.config.n_blocks);
    std::iota(layers.begin(), layers.end(), std::size_t{1});
    const auto thresholds = geometric_thresholds(a.detect_t_min, a.detect_t_max, a.detect_t_count);
    CsvTable summary = detect_summary_table();
    for (const auto* ck : {&run.backdoored, &run.clean}) {
      const std::string name = ck == &run.backdoored ? "backdoored" : "clean";
      const ZGrid g = grid_search(ck->params, layers, thresholds, a.detect_z_cut, a.jobs);
      write_text(dir / ("detect_" + name + ".csv"), grid_csv(g));
      if (a.plot) write_text(dir / ("detect_" + name + ".svg"), grid_svg(g, name + " model Z"));
      summary_row(summary, name, detect_verdict(g, p.config.n_classes, a.detect_min_fraction));
    }
    write_text(dir / "detect_summary.csv", summary.str());
  }
  write_text(dir / "metrics.csv", metrics_csv(metrics));
  finish(dir, out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"vitscope: backdoor analysis for toy vision transformers", "vitscope"};
  app.require_subcommand(1);

  std::string config_path, out_override;
  auto* train_cmd = app.add_subcommand("train", "Train backdoored and clean reference models");
  auto* run_cmd = app.add_subcommand("run", "Train, then run every enabled analysis");
  std::size_t run_jobs = 0;
  bool run_plot = false;
  for (auto* cmd : {train_cmd, run_cmd}) {
    cmd->add_option("--config", config_path, "Run configuration (YAML)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", out_override, "Override output_dir");
  }
  run_cmd->add_option("--jobs", run_jobs, "Override analysis.jobs")->check(CLI::PositiveNumber);
  run_cmd->add_flag("--plot", run_plot, "Also write SVG figures");

  AnalyzeFlags f;
  auto* analyze = app.add_subcommand("analyze", "Analyses on a saved checkpoint");
  analyze->require_subcommand(1);
  auto common = [&f](CLI::App* c, bool needs_data) {
    c->add_option("--checkpoint", f.checkpoint, "Model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    auto* d = c->add_option("--data", f.data, "data.archive with pairs and test splits");
    if (needs_data) d->required();
    c->add_option("--out", f.out, "Report directory")->required();
    c->add_option("--jobs", f.jobs, "Worker threads")->check(CLI::PositiveNumber);
    c->add_flag("--plot", f.plot, "Also write SVG figures");
  };
  auto* derive = analyze->add_subcommand("derive", "Backdoor directions per layer");
  common(derive, true);
  derive->add_option("--mode", f.mode, "cls or all")->check(CLI::IsMember({"cls", "all", "all_tokens"}));

  auto* sweep = analyze->add_subcommand("sweep", "Steering sweep over layers");
  common(sweep, true);
  sweep->add_option("--mode", f.mode, "cls or all")->check(CLI::IsMember({"cls", "all", "all_tokens"}));
  sweep->add_option("--scale", f.scale, "Steering scale")->check(CLI::PositiveNumber);
  sweep->add_option("--directions", f.directions, "Directions archive")->check(CLI::ExistingFile);

  auto* ortho = analyze->add_subcommand("orthogonalize", "Remove r_hat from residual writers");
  common(ortho, true);
  ortho->add_option("--scale", f.scale, "Steering scale used to select r_hat")
      ->check(CLI::PositiveNumber);
  ortho->add_option("--layer", f.layer, "Use this layer instead of the selected one");
  ortho->add_option("--directions", f.directions, "Directions archive")->check(CLI::ExistingFile);

  auto* adv = analyze->add_subcommand("adversarial", "PGD probe against the backdoor direction");
  common(adv, true);
  adv->add_option("--eps", f.eps, "L-infinity radius")->check(CLI::NonNegativeNumber);
  adv->add_option("--steps", f.steps, "PGD steps")->check(CLI::PositiveNumber);
  adv->add_option("--step-size", f.step_size, "PGD step size")->check(CLI::PositiveNumber);
  adv->add_option("--start", f.start, "backdoor or clean")
      ->check(CLI::IsMember({"backdoor", "clean"}));
  adv->add_option("--directions", f.directions, "Directions archive")->check(CLI::ExistingFile);

  auto* det = analyze->add_subcommand("detect", "Weight-alignment detector over an (n, t) grid");
  common(det, false);
  det->add_option("--layers", f.layers, "Block counts, e.g. 1-4 or 1,2 (default: all)");
  det->add_option("--thresholds", f.thresholds, "lo:hi:count or a comma list");
  det->add_option("--z-cut", f.z_cut, "Flag cells with Z above this");
  det->add_option("--min-fraction", f.min_fraction,
                  "Share of cells a class must be flagged in")
      ->check(CLI::Range(0.0, 1.0));

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_with_overrides(config_path, out_override), out);
    if (run_cmd->parsed()) {
      RunConfig c = config_with_overrides(config_path, out_override);
      if (run_jobs > 0) c.analysis.jobs = run_jobs;
      if (run_plot) c.analysis.plot = true;
      return cmd_run(c, out);
    }
    if (derive->parsed()) return analyze_derive(f, out);
    if (sweep->parsed()) return analyze_sweep(f, out);
    if (ortho->parsed()) return analyze_orthogonalize(f, out);
    if (adv->parsed()) return analyze_adversarial(f, out);
    if (det->parsed()) return analyze_detect(f, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}

}  // namespace vitscope::cli
