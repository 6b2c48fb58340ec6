#include "vitscope/cli/run_config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace vitscope::cli {

ConfigError::ConfigError(std::string key, std::size_t line, const std::string& what)
    : std::runtime_error(line > 0 ? "config line " + std::to_string(line) + ", key '" + key +
                                        "': " + what
                                  : "config key '" + key + "': " + what),
      key_(std::move(key)),
      line_(line) {}

bool operator==(const TrainConfig& a, const TrainConfig& b) {
  return a.epochs == b.epochs && a.batch_size == b.batch_size &&
         a.learning_rate == b.learning_rate && a.optimizer == b.optimizer &&
         a.momentum == b.momentum && a.weight_decay == b.weight_decay && a.seed == b.seed;
}

bool operator==(const RunConfig& a, const RunConfig& b) {
  return a.seed == b.seed && a.output_dir == b.output_dir && a.model == b.model &&
         a.dataset == b.dataset && a.trigger == b.trigger && a.poison == b.poison &&
         a.train == b.train && a.analysis == b.analysis;
}

namespace {

std::size_t line_of(const YAML::Node& n) {
  const auto m = n.Mark();
  return m.line >= 0 ? static_cast<std::size_t>(m.line) + 1 : 0;
}

std::string scalar(const YAML::Node& n, const std::string& key) {
  if (!n.IsScalar()) throw ConfigError(key, line_of(n), "expected a scalar value");
  return n.Scalar();
}

std::uint64_t to_u64(const YAML::Node& n, const std::string& key) {
  const std::string s = scalar(n, key);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError(key, line_of(n), "expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

double to_f64(const YAML::Node& n, const std::string& key) {
  const std::string s = scalar(n, key);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(key, line_of(n), "expected a finite number, got '" + s + "'");
  }
  return v;
}

bool to_bool(const YAML::Node& n, const std::string& key) {
  const std::string s = scalar(n, key);
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError(key, line_of(n), "expected true or false, got '" + s + "'");
}

template <typename Fn>
auto enum_value(const YAML::Node& n, const std::string& key, Fn from_string) {
  const std::string s = scalar(n, key);
  try {
    return from_string(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, line_of(n), e.what());
  }
}

using Setter = std::function<void(const YAML::Node&, const std::string&)>;

void apply_map(const YAML::Node& node, const std::string& prefix,
               const std::map<std::string, Setter>& setters) {
  if (!node.IsMap()) {
    throw ConfigError(prefix.empty() ? "<root>" : prefix, line_of(node), "expected a mapping");
  }
  for (const auto& kv : node) {
    const std::string name = kv.first.Scalar();
    const std::string key = prefix.empty() ? name : prefix + "." + name;
    auto it = setters.find(name);
    if (it == setters.end()) throw ConfigError(key, line_of(kv.first), "unknown key");
    it->second(kv.second, key);
  }
}

Setter u64(std::uint64_t& dst) {
  return [&dst](const YAML::Node& n, const std::string& k) { dst = to_u64(n, k); };
}
Setter size(std::size_t& dst) {
  return [&dst](const YAML::Node& n, const std::string& k) {
    dst = static_cast<std::size_t>(to_u64(n, k));
  };
}
Setter f64(double& dst) {
  return [&dst](const YAML::Node& n, const std::string& k) { dst = to_f64(n, k); };
}
Setter boolean(bool& dst) {
  return [&dst](const YAML::Node& n, const std::string& k) { dst = to_bool(n, k); };
}
Setter section(const std::map<std::string, Setter>& inner) {
  return [inner](const YAML::Node& n, const std::string& k) { apply_map(n, k, inner); };
}

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, 0, what);
}

}  // namespace

void RunConfig::validate() const {
  require(!output_dir.empty(), "output_dir", "must not be empty");
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model", 0, e.what());
  }
  require(dataset.n_per_class > 0, "dataset.n_per_class", "must be positive");
  require(dataset.n_test_per_class > 0, "dataset.n_test_per_class", "must be positive");
  require(dataset.noise >= 0.0, "dataset.noise", "must be >= 0");
  require(dataset.grain >= 0.0, "dataset.grain", "must be >= 0");
  require(poison.rate > 0.0 && poison.rate < 1.0, "poison.rate", "must be in (0, 1)");
  require(poison.target_class >= 0 &&
              static_cast<std::size_t>(poison.target_class) < model.n_classes,
          "poison.target_class", "must name a model class");
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", 0, e.what());
  }
  try {
    make_trigger(*this).validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("trigger", 0, e.what());
  }
  require(analysis.jobs >= 1, "analysis.jobs", "must be >= 1");
  require(analysis.adv_steps >= 1, "analysis.adv_steps", "must be >= 1");
  require(analysis.steer_scale > 0.0, "analysis.steer_scale", "must be positive");
  require(analysis.adv_epsilon >= 0.0, "analysis.adv_epsilon", "must be >= 0");
  require(analysis.adv_step_size > 0.0, "analysis.adv_step_size", "must be positive");
  require(analysis.detect_t_min > 0.0 && analysis.detect_t_max >= analysis.detect_t_min,
          "analysis.detect_t_min", "need 0 < detect_t_min <= detect_t_max");
  require(analysis.detect_t_count >= 1, "analysis.detect_t_count", "must be >= 1");
  require(analysis.detect_min_fraction > 0.0 && analysis.detect_min_fraction <= 1.0,
          "analysis.detect_min_fraction", "must be in (0, 1]");
}

RunConfig parse_run_config(std::string_view text) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError("<syntax>", static_cast<std::size_t>(e.mark.line) + 1, e.msg);
  }
  RunConfig c;
  if (root.IsNull()) {
    c.model.seed = c.seed;
    c.validate();
    return c;
  }
  auto& m = c.model;
  auto& d = c.dataset;
  auto& t = c.trigger;
  auto& p = c.poison;
  auto& tr = c.train;
  auto& a = c.analysis;
  const std::map<std::string, Setter> top{
      {"seed", u64(c.seed)},
      {"output_dir",
       [&](const YAML::Node& n, const std::string& k) { c.output_dir = scalar(n, k); }},
      {"model", section({{"image_size", size(m.image_size)},
                         {"channels", size(m.channels)},
                         {"patch_size", size(m.patch_size)},
                         {"n_blocks", size(m.n_blocks)},
                         {"d_model", size(m.d_model)},
                         {"n_heads", size(m.n_heads)},
                         {"mlp_hidden", size(m.mlp_hidden)},
                         {"n_classes", size(m.n_classes)}})},
      {"dataset", section({{"task",
                            [&](const YAML::Node& n, const std::string& k) {
                              d.task = enum_value(n, k, toy_task_from_string);
                            }},
                           {"n_per_class", size(d.n_per_class)},
                           {"n_test_per_class", size(d.n_test_per_class)},
                           {"noise", f64(d.noise)},
                           {"grain", f64(d.grain)},
                           {"seed", u64(d.seed)}})},
      {"trigger", section({{"kind",
                            [&](const YAML::Node& n, const std::string& k) {
                              t.kind = enum_value(n, k, trigger_kind_from_string);
                            }},
                           {"patch_size", size(t.patch_size)},
                           {"patch_margin", size(t.patch_margin)},
                           {"blend_alpha", f64(t.blend_alpha)},
                           {"warp_amplitude", f64(t.warp_amplitude)},
                           {"warp_grid", size(t.warp_grid)},
                           {"seed", u64(t.seed)}})},
      {"poison", section({{"rate", f64(p.rate)},
                          {"target_class",
                           [&](const YAML::Node& n, const std::string& k) {
                             const auto v = to_u64(n, k);
                             if (v > 1u << 20) throw ConfigError(k, line_of(n), "too large");
                             p.target_class = static_cast<int>(v);
                           }},
                          {"seed", u64(p.seed)}})},
      {"train", section({{"epochs", size(tr.epochs)},
                         {"batch_size", size(tr.batch_size)},
                         {"learning_rate", f64(tr.learning_rate)},
                         {"optimizer",
                          [&](const YAML::Node& n, const std::string& k) {
                            tr.optimizer = enum_value(n, k, optimizer_from_string);
                          }},
                         {"momentum", f64(tr.momentum)},
                         {"weight_decay", f64(tr.weight_decay)},
                         {"seed", u64(tr.seed)}})},
      {"analysis", section({{"sweep", boolean(a.sweep)},
                            {"surgery", boolean(a.surgery)},
                            {"adversarial", boolean(a.adversarial)},
                            {"detect", boolean(a.detect)},
                            {"plot", boolean(a.plot)},
                            {"jobs", size(a.jobs)},
                            {"steer_scale", f64(a.steer_scale)},
                            {"adv_epsilon", f64(a.adv_epsilon)},
                            {"adv_step_size", f64(a.adv_step_size)},
                            {"adv_steps", size(a.adv_steps)},
                            {"detect_t_min", f64(a.detect_t_min)},
                            {"detect_t_max", f64(a.detect_t_max)},
                            {"detect_t_count", size(a.detect_t_count)},
                            {"detect_z_cut", f64(a.detect_z_cut)},
                            {"detect_min_fraction", f64(a.detect_min_fraction)}})},
  };
  apply_map(root, "", top);
  c.model.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("<file>", 0, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string emit_run_config(const RunConfig& c) {
  std::ostringstream o;
  auto b = [](bool v) { return v ? "true" : "false"; };
  o << "seed: " << c.seed << '\n'
    << "output_dir: " << quoted(c.output_dir) << '\n'
    << "model:\n"
    << "  image_size: " << c.model.image_size << '\n'
    << "  channels: " << c.model.channels << '\n'
    << "  patch_size: " << c.model.patch_size << '\n'
    << "  n_blocks: " << c.model.n_blocks << '\n'
    << "  d_model: " << c.model.d_model << '\n'
    << "  n_heads: " << c.model.n_heads << '\n'
    << "  mlp_hidden: " << c.model.mlp_hidden << '\n'
    << "  n_classes: " << c.model.n_classes << '\n'
    << "dataset:\n"
    << "  task: " << to_string(c.dataset.task) << '\n'
    << "  n_per_class: " << c.dataset.n_per_class << '\n'
    << "  n_test_per_class: " << c.dataset.n_test_per_class << '\n'
    << "  noise: " << num(c.dataset.noise) << '\n'
    << "  grain: " << num(c.dataset.grain) << '\n'
    << "  seed: " << c.dataset.seed << '\n'
    << "trigger:\n"
    << "  kind: " << to_string(c.trigger.kind) << '\n'
    << "  patch_size: " << c.trigger.patch_size << '\n'
    << "  patch_margin: " << c.trigger.patch_margin << '\n'
    << "  blend_alpha: " << num(c.trigger.blend_alpha) << '\n'
    << "  warp_amplitude: " << num(c.trigger.warp_amplitude) << '\n'
    << "  warp_grid: " << c.trigger.warp_grid << '\n'
    << "  seed: " << c.trigger.seed << '\n'
    << "poison:\n"
    << "  rate: " << num(c.poison.rate) << '\n'
    << "  target_class: " << c.poison.target_class << '\n'
    << "  seed: " << c.poison.seed << '\n'
    << "train:\n"
    << "  epochs: " << c.train.epochs << '\n'
    << "  batch_size: " << c.train.batch_size << '\n'
    << "  learning_rate: " << num(c.train.learning_rate) << '\n'
    << "  optimizer: " << to_string(c.train.optimizer) << '\n'
    << "  momentum: " << num(c.train.momentum) << '\n'
    << "  weight_decay: " << num(c.train.weight_decay) << '\n'
    << "  seed: " << c.train.seed << '\n'
    << "analysis:\n"
    << "  sweep: " << b(c.analysis.sweep) << '\n'
    << "  surgery: " << b(c.analysis.surgery) << '\n'
    << "  adversarial: " << b(c.analysis.adversarial) << '\n'
    << "  detect: " << b(c.analysis.detect) << '\n'
    << "  plot: " << b(c.analysis.plot) << '\n'
    << "  jobs: " << c.analysis.jobs << '\n'
    << "  steer_scale: " << num(c.analysis.steer_scale) << '\n'
    << "  adv_epsilon: " << num(c.analysis.adv_epsilon) << '\n'
    << "  adv_step_size: " << num(c.analysis.adv_step_size) << '\n'
    << "  adv_steps: " << c.analysis.adv_steps << '\n'
    << "  detect_t_min: " << num(c.analysis.detect_t_min) << '\n'
    << "  detect_t_max: " << num(c.analysis.detect_t_max) << '\n'
    << "  detect_t_count: " << c.analysis.detect_t_count << '\n'
    << "  detect_z_cut: " << num(c.analysis.detect_z_cut) << '\n'
    << "  detect_min_fraction: " << num(c.analysis.detect_min_fraction) << '\n';
  return o.str();
}

TriggerSpec make_trigger(const RunConfig& c) {
  switch (c.trigger.kind) {
    case TriggerKind::patch:
      return make_patch_trigger(c.model, c.trigger.patch_size, c.trigger.patch_margin);
    case TriggerKind::blended:
      return make_blended_trigger(c.model, c.trigger.blend_alpha, c.trigger.seed);
    case TriggerKind::warp:
      break;
  }
  return make_warp_trigger(c.model, c.trigger.warp_amplitude, c.trigger.warp_grid,
                           c.trigger.seed);
}

DatasetOptions dataset_options(const RunConfig& c) {
  DatasetOptions o;
  o.task = c.dataset.task;
  o.n_test_per_class = c.dataset.n_test_per_class;
  o.noise = c.dataset.noise;
  o.grain = c.dataset.grain;
  return o;
}

}  // namespace vitscope::cli
