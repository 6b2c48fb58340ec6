#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vitscope/adversarial.hpp"
#include "vitscope/checkpoint.hpp"
#include "vitscope/cli/run_config.hpp"
#include "vitscope/detect.hpp"
#include "vitscope/directions.hpp"
#include "vitscope/surgery.hpp"

namespace vitscope::cli {

/// Incompatible inputs, bad flags or missing files.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainedRun {
  Checkpoint backdoored;
  Checkpoint clean;
  DataBundle data;
  EvalMetrics backdoored_metrics;
  EvalMetrics clean_metrics;
  std::vector<double> backdoored_loss;
  std::vector<double> clean_loss;
};

/// Dataset, poisoning and both trainings (backdoored and clean reference).
TrainedRun train_models(const RunConfig& config, std::ostream& log);

/// config.yaml, data.archive, both checkpoints, metrics.csv and loss.csv.
void write_training(const std::filesystem::path& dir, const RunConfig& config,
                    const TrainedRun& run);

std::string metrics_csv(const std::vector<std::pair<std::string, EvalMetrics>>& rows);

/// Fails with UsageError when the data bundle does not fit the model.
void check_compatible(const Checkpoint& ckpt, const DataBundle& data);

std::string direction_norms_csv(const DirectionSet& dirs);
/// Header (layer, asr_plus, ra_minus), one row per swept layer.
std::string sweep_csv(const SteeringSweep& sweep);
std::string sweep_svg(const SteeringSweep& sweep);

struct SurgeryOutcome {
  RHat rhat;
  OrthoResult edit;
  EvalMetrics before;
  EvalMetrics after;
};

/// Picks r_hat from a CLS sweep (or uses `forced_layer`) and edits the model.
SurgeryOutcome run_surgery(const ModelParams& params, const DataBundle& data,
                           const SteeringSweep& cls_sweep, const DirectionSet& cls_dirs,
                           std::optional<std::size_t> forced_layer = std::nullopt);
std::string surgery_csv(const SurgeryOutcome& s);

enum class AdvStart { backdoor, clean };

struct AdversarialOutcome {
  AdvStart start = AdvStart::backdoor;
  ClassDistribution classes;
  /// Largest count of items landing in one class that is neither their
  /// original label. The target counts as such a class.
  std::size_t max_other = 0;
  int max_other_class = -1;
  CosineTrace trace;
  /// max |a - x| and whether every pixel stayed in [0, 1].
  double max_linf = 0.0;
  bool in_box = true;
};

/// Backdoor starts attack the target label on triggered images; clean
/// starts attack the true label. The cosine group is "reverted to the
/// original class" or "flipped to the target" respectively.
AdversarialOutcome run_adversarial(const ModelParams& params, const DataBundle& data,
                                   const DirectionSet& cls_dirs, const AdvConfig& cfg,
                                   AdvStart start, std::size_t jobs);
std::string adversarial_classes_csv(const AdversarialOutcome& a);
std::string adversarial_cosines_csv(const AdversarialOutcome& a);
std::string adversarial_svg(const AdversarialOutcome& a);

struct DetectVerdict {
  std::optional<int> flagged;
  int top_class = 0;
  double top_fraction = 0.0;
  double any_rate = 0.0;
};

/// The class most often flagged across cells, reported when its share of
/// cells reaches `min_fraction`.
DetectVerdict detect_verdict(const ZGrid& grid, std::size_t n_classes, double min_fraction);
std::string grid_csv(const ZGrid& grid);
std::string grid_svg(const ZGrid& grid, const std::string& title);

/// "1-4", "2" or "1,3".
std::vector<std::size_t> parse_layers(const std::string& text);
/// "lo:hi:count" (log-spaced) or a comma list.
std::vector<double> parse_thresholds(const std::string& text);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace vitscope::cli
