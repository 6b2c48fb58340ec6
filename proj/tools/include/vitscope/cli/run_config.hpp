#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "vitscope/poison.hpp"
#include "vitscope/train.hpp"
#include "vitscope/vit.hpp"

namespace vitscope::cli {

/// Parse or validation failure. `line` is 1-based, 0 when unknown.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, std::size_t line, const std::string& what);

  const std::string& key() const { return key_; }
  std::size_t line() const { return line_; }

 private:
  std::string key_;
  std::size_t line_;
};

struct DatasetSection {
  ToyTask task = ToyTask::gratings;
  std::size_t n_per_class = 200;
  std::size_t n_test_per_class = 100;
  double noise = 0.05;
  double grain = 0.05;
  std::uint64_t seed = 1;

  bool operator==(const DatasetSection&) const = default;
};

struct TriggerSection {
  TriggerKind kind = TriggerKind::warp;
  std::size_t patch_size = 3;
  std::size_t patch_margin = 1;
  double blend_alpha = 0.15;
  double warp_amplitude = 1.0;
  std::size_t warp_grid = 4;
  std::uint64_t seed = 11;

  bool operator==(const TriggerSection&) const = default;
};

struct PoisonSection {
  double rate = 0.1;
  int target_class = 0;
  std::uint64_t seed = 3;

  bool operator==(const PoisonSection&) const = default;
};

struct AnalysisSection {
  bool sweep = true;
  bool surgery = true;
  bool adversarial = true;
  bool detect = true;
  bool plot = false;
  std::size_t jobs = 1;
  double steer_scale = 1.0;
  double adv_epsilon = 8.0 / 255.0;
  double adv_step_size = 2.0 / 255.0;
  std::size_t adv_steps = 15;
  double detect_t_min = 0.02;
  double detect_t_max = 2.0;
  std::size_t detect_t_count = 20;
  double detect_z_cut = 3.0;
  /// A class is reported as flagged when it tops at least this fraction of
  /// grid cells with Z above the cut.
  double detect_min_fraction = 0.25;

  bool operator==(const AnalysisSection&) const = default;
};

struct RunConfig {
  /// Seeds model initialization; data, trigger, poison and shuffling have
  /// their own seeds.
  std::uint64_t seed = 5;
  std::string output_dir = "runs/toy";
  ViTConfig model;
  DatasetSection dataset;
  TriggerSection trigger;
  PoisonSection poison;
  TrainConfig train;
  AnalysisSection analysis;

  /// Cross-field checks; throws ConfigError naming the key.
  void validate() const;
};

bool operator==(const TrainConfig& a, const TrainConfig& b);
bool operator==(const RunConfig& a, const RunConfig& b);

/// Missing keys keep their defaults. Unknown keys, wrong types and invalid
/// values raise ConfigError with the line number.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical text: every key, fixed order, shortest round-trip numbers.
/// parse_run_config(emit_run_config(c)) == c.
std::string emit_run_config(const RunConfig& config);

/// Builders for the core types the config describes.
TriggerSpec make_trigger(const RunConfig& config);
DatasetOptions dataset_options(const RunConfig& config);

}  // namespace vitscope::cli
