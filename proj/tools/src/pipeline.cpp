#include "vitscope/cli/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ostream>
#include <sstream>

#include "vitscope/cli/report.hpp"
#include "vitscope/poison.hpp"
#include "vitscope/train.hpp"

namespace vitscope::cli {

namespace {

std::string shortest(double v) {
  char buf[64];
  return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
}

std::string sci(double v) {
  char buf[64];
  return std::string(
      buf, std::to_chars(buf, buf + sizeof buf, v, std::chars_format::scientific, 3).ptr);
}

std::map<std::string, std::string> provenance(const RunConfig& c, const std::string& role) {
  return {
      {"role", role},
      {"dataset.task", to_string(c.dataset.task)},
      {"dataset.seed", std::to_string(c.dataset.seed)},
      {"trigger.kind", to_string(c.trigger.kind)},
      {"trigger.seed", std::to_string(c.trigger.seed)},
      {"poison.rate", shortest(c.poison.rate)},
      {"poison.target_class", std::to_string(c.poison.target_class)},
      {"poison.seed", std::to_string(c.poison.seed)},
      {"train.epochs", std::to_string(c.train.epochs)},
      {"train.seed", std::to_string(c.train.seed)},
  };
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, text);
}

TrainedRun train_models(const RunConfig& c, std::ostream& log) {
  const ToyDataset ds =
      generate_toy_dataset(c.dataset.n_per_class, c.model, c.dataset.seed, dataset_options(c));
  const TriggerSpec trigger = make_trigger(c);
  const PoisonResult pr =
      poison_dataset(ds, trigger, {c.poison.rate, c.poison.target_class}, c.poison.seed);
  const ModelParams init = init_params(c.model, c.seed);

  TrainedRun run;
  run.data = {pr.pairs, pr.dataset.clean_test, pr.dataset.triggered_test,
              c.poison.target_class};

  log << "train: backdoored model, " << to_string(trigger.kind) << " trigger, "
      << pr.dataset.poison_indices.size() << " poisoned of " << ds.train.size() << '\n';
  auto bd = train(init, pr.dataset.training_set(), c.train);
  log << "train: clean reference model\n";
  auto cl = train(init, ds.train, c.train);

  const auto& d = run.data;
  run.backdoored = {std::move(bd.params), provenance(c, "backdoored")};
  run.clean = {std::move(cl.params), provenance(c, "clean")};
  run.backdoored_loss = std::move(bd.loss_history);
  run.clean_loss = std::move(cl.loss_history);
  run.backdoored_metrics =
      evaluate(run.backdoored.params, d.clean_test, d.triggered_test, d.target_class);
  run.clean_metrics = evaluate(run.clean.params, d.clean_test, d.triggered_test, d.target_class);
  log << "train: backdoored CA " << fixed(run.backdoored_metrics.ca, 3) << " ASR "
      << fixed(run.backdoored_metrics.asr, 3) << "; clean CA " << fixed(run.clean_metrics.ca, 3)
      << " ASR " << fixed(run.clean_metrics.asr, 3) << '\n';
  return run;
}

std::string metrics_csv(const std::vector<std::pair<std::string, EvalMetrics>>& rows) {
  CsvTable t({"model", "ca", "asr", "ra", "clean_correct", "clean_total",
              "triggered_to_target", "triggered_to_original", "triggered_total"});
  for (const auto& [name, m] : rows) {
    t.row({name, fixed(m.ca), fixed(m.asr), fixed(m.ra), std::to_string(m.clean_correct),
           std::to_string(m.clean_total), std::to_string(m.triggered_to_target),
           std::to_string(m.triggered_to_original), std::to_string(m.triggered_total)});
  }
  return t.str();
}

void write_training(const std::filesystem::path& dir, const RunConfig& config,
                    const TrainedRun& run) {
  write_text(dir / "config.yaml", emit_run_config(config));
  write_file(dir / "data.archive", encode_archive(to_archive(run.data)));
  save_checkpoint(dir / "backdoored.ckpt", run.backdoored);
  save_checkpoint(dir / "clean.ckpt", run.clean);
  write_text(dir / "metrics.csv", metrics_csv({{"backdoored", run.backdoored_metrics},
                                               {"clean", run.clean_metrics}}));
  CsvTable loss({"epoch", "backdoored", "clean"});
  for (std::size_t e = 0; e < run.backdoored_loss.size(); ++e) {
    loss.row({std::to_string(e + 1), fixed(run.backdoored_loss[e], 8),
              fixed(e < run.clean_loss.size() ? run.clean_loss[e] : NAN, 8)});
  }
  write_text(dir / "loss.csv", loss.str());
}

void check_compatible(const Checkpoint& ckpt, const DataBundle& data) {
  const auto& c = ckpt.params.config;
  auto fits = [&](const Tensor& t) {
    if (!t.defined() || t.ndim() != 4) return false;
    return Shape(t.shape().begin() + 1, t.shape().end()) == c.image_shape();
  };
  if (!fits(data.clean_test.images) || (data.pairs.size() > 0 && !fits(data.pairs.clean))) {
    throw UsageError("incompatible checkpoint and data: model expects images of shape " +
                     shape_str(c.image_shape()));
  }
  if (data.target_class < 0 || static_cast<std::size_t>(data.target_class) >= c.n_classes) {
    throw UsageError("incompatible checkpoint and data: target class " +
                     std::to_string(data.target_class) + " but the model has " +
                     std::to_string(c.n_classes) + " classes");
  }
  for (int label : data.clean_test.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= c.n_classes) {
      throw UsageError("incompatible checkpoint and data: label " + std::to_string(label) +
                       " outside the model's classes");
    }
  }
}

std::string direction_norms_csv(const DirectionSet& dirs) {
  CsvTable t({"layer", "mode", "norm"});
  for (std::size_t l = 0; l < dirs.layers(); ++l) {
    double n = 0.0;
    for (double x : dirs.vectors[l]) n += x * x;
    t.row({std::to_string(l), to_string(dirs.mode), fixed(std::sqrt(n), 8)});
  }
  return t.str();
}

std::string sweep_csv(const SteeringSweep& sweep) {
  CsvTable t({"layer", "asr_plus", "ra_minus"});
  for (std::size_t l = 0; l < sweep.layers(); ++l) {
    t.row({std::to_string(l), fixed(sweep.asr_plus[l]), fixed(sweep.ra_minus[l])});
  }
  return t.str();
}

std::string sweep_svg(const SteeringSweep& sweep) {
  return line_chart_svg("steering sweep, " + to_string(sweep.mode) + " mode, scale " +
                            fixed(sweep.scale, 2),
                        "layer", {{"ASR+", sweep.asr_plus}, {"RA-", sweep.ra_minus}});
}

SurgeryOutcome run_surgery(const ModelParams& params, const DataBundle& data,
                           const SteeringSweep& cls_sweep, const DirectionSet& cls_dirs,
                           std::optional<std::size_t> forced_layer) {
  SurgeryOutcome s;
  if (forced_layer) {
    const std::size_t l = *forced_layer;
    if (l >= cls_dirs.layers()) {
      throw UsageError("--layer " + std::to_string(l) + " is outside 0.." +
                       std::to_string(cls_dirs.layers() - 1));
    }
    const auto& r = cls_dirs.vectors[l];
    double n = 0.0;
    for (double x : r) n += x * x;
    n = std::sqrt(n);
    if (n == 0.0) throw UsageError("direction at layer " + std::to_string(l) + " is zero");
    s.rhat.layer = l;
    s.rhat.score = NAN;
    for (double x : r) s.rhat.direction.push_back(x / n);
  } else {
    s.rhat = select_rhat(cls_sweep, cls_dirs);
  }
  s.edit = orthogonalize_params(params, s.rhat.direction);
  s.before = evaluate(params, data.clean_test, data.triggered_test, data.target_class);
  s.after = verify_removal(s.edit.params, data.clean_test, data.triggered_test,
                           data.target_class);
  return s;
}

std::string surgery_csv(const SurgeryOutcome& s) {
  CsvTable t({"layer", "score", "max_leak", "ca_before", "asr_before", "ra_before",
              "ca_after", "asr_after", "ra_after"});
  t.row({std::to_string(s.rhat.layer), fixed(s.rhat.score), sci(s.edit.report.max_leak),
         fixed(s.before.ca), fixed(s.before.asr), fixed(s.before.ra), fixed(s.after.ca),
         fixed(s.after.asr), fixed(s.after.ra)});
  return t.str();
}

AdversarialOutcome run_adversarial(const ModelParams& params, const DataBundle& data,
                                   const DirectionSet& cls_dirs, const AdvConfig& cfg,
                                   AdvStart start, std::size_t jobs) {
  const bool backdoor = start == AdvStart::backdoor;
  const LabeledImages& src = backdoor ? data.triggered_test : data.clean_test;
  if (src.size() == 0) throw UsageError("adversarial: no start images in the data bundle");
  std::vector<int> attack = src.labels;
  if (backdoor) std::fill(attack.begin(), attack.end(), data.target_class);

  AdversarialOutcome out;
  out.start = start;
  const Tensor adv = pgd_attack(params, src.images, attack, cfg, 64, jobs);
  const auto preds = argmax_rows(predict_logits(params, adv));
  const std::size_t k = params.config.n_classes;
  out.classes = class_distribution(preds, src.labels, data.target_class, k);

  std::vector<std::size_t> other(k, 0);
  std::vector<bool> group(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] != src.labels[i]) ++other[static_cast<std::size_t>(preds[i])];
    group[i] = backdoor ? preds[i] == src.labels[i]
                        : preds[i] == data.target_class && src.labels[i] != data.target_class;
  }
  const auto top = std::max_element(other.begin(), other.end());
  out.max_other = *top;
  out.max_other_class = static_cast<int>(top - other.begin());

  const auto x = src.images.data();
  const auto a = adv.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.max_linf = std::max(out.max_linf, std::abs(a[i] - x[i]));
    if (a[i] < 0.0 || a[i] > 1.0) out.in_box = false;
  }
  out.trace = cosine_trace(activation_diffs(params, src.images, adv), cls_dirs, group);
  return out;
}

std::string adversarial_classes_csv(const AdversarialOutcome& a) {
  CsvTable t({"class", "count", "fraction"});
  for (std::size_t c = 0; c < a.classes.histogram.size(); ++c) {
    const double f = a.classes.total ? static_cast<double>(a.classes.histogram[c]) /
                                           static_cast<double>(a.classes.total)
                                     : 0.0;
    t.row({std::to_string(c), std::to_string(a.classes.histogram[c]), fixed(f)});
  }
  const auto frac = [&](std::size_t n) {
    return a.classes.total ? static_cast<double>(n) / static_cast<double>(a.classes.total) : 0.0;
  };
  t.row({"original", std::to_string(static_cast<std::size_t>(
                         std::llround(a.classes.original_fraction * a.classes.total))),
         fixed(a.classes.original_fraction)});
  t.row({"max_other", std::to_string(a.max_other), fixed(frac(a.max_other))});
  return t.str();
}

namespace {

std::pair<std::string, std::string> group_names(AdvStart s) {
  return s == AdvStart::backdoor ? std::pair{"reverted", "not_reverted"}
                                 : std::pair{"flipped", "not_flipped"};
}

}  // namespace

std::string adversarial_cosines_csv(const AdversarialOutcome& a) {
  CsvTable t({"layer", "group", "count", "mean", "std", "median"});
  const auto [in, out] = group_names(a.start);
  for (std::size_t l = 0; l < a.trace.cosines.size(); ++l) {
    const auto emit = [&](const std::string& name, const CosineStats& s) {
      t.row({std::to_string(l), name, std::to_string(s.count), fixed(s.mean), fixed(s.std),
             fixed(s.median)});
    };
    emit("all", summarize(a.trace.cosines[l]));
    emit(in, a.trace.in_group[l]);
    emit(out, a.trace.out_group[l]);
  }
  return t.str();
}

std::string adversarial_svg(const AdversarialOutcome& a) {
  const auto [in, out] = group_names(a.start);
  Series all{"all", {}}, gin{in, {}}, gout{out, {}};
  for (std::size_t l = 0; l < a.trace.cosines.size(); ++l) {
    const auto s = summarize(a.trace.cosines[l]);
    all.values.push_back(s.count ? s.median : NAN);
    gin.values.push_back(a.trace.in_group[l].count ? a.trace.in_group[l].median : NAN);
    gout.values.push_back(a.trace.out_group[l].count ? a.trace.out_group[l].median : NAN);
  }
  return line_chart_svg("median cosine of CLS shift with r", "layer", {all, gin, gout}, -1.0,
                        1.0);
}

DetectVerdict detect_verdict(const ZGrid& grid, std::size_t n_classes, double min_fraction) {
  DetectVerdict v;
  std::vector<std::size_t> count(n_classes, 0);
  for (const auto& c : grid.cells) {
    if (c.flagged) ++count.at(static_cast<std::size_t>(c.top_class));
  }
  const auto top = std::max_element(count.begin(), count.end());
  v.top_class = static_cast<int>(top - count.begin());
  v.top_fraction = grid.flag_fraction(v.top_class);
  v.any_rate = grid.any_flag_rate();
  if (*top > 0 && v.top_fraction >= min_fraction) v.flagged = v.top_class;
  return v;
}

std::string grid_csv(const ZGrid& grid) {
  CsvTable t({"n_layers", "threshold", "z", "top_class", "flagged"});
  for (const auto& c : grid.cells) {
    t.row({std::to_string(c.n_layers), fixed(c.threshold), fixed(c.z),
           std::to_string(c.top_class), c.flagged ? "1" : "0"});
  }
  return t.str();
}

std::string grid_svg(const ZGrid& grid, const std::string& title) {
  std::vector<std::string> rows, cols;
  for (auto n : grid.layers) rows.push_back("n=" + std::to_string(n));
  for (double t : grid.thresholds) cols.push_back(fixed(t, 3));
  std::vector<double> z;
  for (const auto& c : grid.cells) z.push_back(c.z);
  return heatmap_svg(title, rows, cols, z, grid.z_cut);
}

std::vector<std::size_t> parse_layers(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string part;
  auto number = [&](const std::string& s) {
    std::size_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw UsageError("--layers: cannot read '" + s + "'");
    }
    return v;
  };
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      out.push_back(number(part));
    } else {
      const std::size_t lo = number(part.substr(0, dash)), hi = number(part.substr(dash + 1));
      if (hi < lo) throw UsageError("--layers: empty range '" + part + "'");
      for (std::size_t n = lo; n <= hi; ++n) out.push_back(n);
    }
  }
  if (out.empty()) throw UsageError("--layers: no layers given");
  return out;
}

std::vector<double> parse_thresholds(const std::string& text) {
  auto number = [](const std::string& s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw UsageError("--thresholds: cannot read '" + s + "'");
    }
    return v;
  };
  std::vector<std::string> parts;
  const char sep = text.find(':') != std::string::npos ? ':' : ',';
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, sep);) parts.push_back(p);
  if (sep == ':') {
    if (parts.size() != 3) throw UsageError("--thresholds: expected lo:hi:count");
    const double count = number(parts[2]);
    if (count < 1 || count != std::floor(count)) {
      throw UsageError("--thresholds: count must be a positive integer");
    }
    try {
      return geometric_thresholds(number(parts[0]), number(parts[1]),
                                  static_cast<std::size_t>(count));
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--thresholds: ") + e.what());
    }
  }
  std::vector<double> out;
  for (const auto& p : parts) {
    const double t = number(p);
    if (!(t > 0.0)) throw UsageError("--thresholds: values must be positive");
    out.push_back(t);
  }
  if (out.empty()) throw UsageError("--thresholds: no thresholds given");
  return out;
}

}  // namespace vitscope::cli
