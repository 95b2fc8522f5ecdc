#pragma once

// Flat "key = value" configuration with [sections], parsed with
// Boost.PropertyTree's INI reader. Unknown keys are rejected and every value
// is validated before any compute starts.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "nightrain/adam.hpp"
#include "nightrain/data_synth.hpp"
#include "nightrain/diffusion.hpp"
#include "nightrain/error.hpp"
#include "nightrain/noise_net.hpp"
#include "nightrain/self_training.hpp"

namespace nightrain {

struct PretrainConfig {
  std::size_t steps = 5000;
  std::size_t videos_per_step = 8;  // P
  std::size_t clips_per_video = 4;  // K
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 100;
};

struct ScheduleConfig {
  std::size_t steps = 200;
  double beta_start = 1e-4;
  double beta_end = 0.05;
};

struct PathsConfig {
  std::filesystem::path data_root = "nightrain_data";
  std::filesystem::path pretrain_checkpoint = "pretrain.nrck";
  std::filesystem::path selftrain_checkpoint = "selftrain.nrck";
};

struct Config {
  ModelConfig model;
  ScheduleConfig schedule;
  AdamConfig optimizer;
  PretrainConfig pretrain;
  SelfTrainConfig selftrain;
  float ema_decay = 0.999f;
  std::size_t sampler_steps = 25;
  DatasetSpec data;  // root and geometry are filled from [paths] / [model]
  std::uint64_t seed = 0;
  PathsConfig paths;

  [[nodiscard]] NoiseSchedule make_noise_schedule() const {
    return make_schedule(schedule.steps, schedule.beta_start, schedule.beta_end);
  }

  [[nodiscard]] DatasetSpec dataset_spec() const {
    DatasetSpec d = data;
    d.root = paths.data_root;
    d.height = model.clip.height;
    d.width = model.clip.width;
    d.seed = seed;
    return d;
  }

  /// The self-training settings with the shared fields filled in.
  [[nodiscard]] SelfTrainConfig selftrain_config() const {
    SelfTrainConfig s = selftrain;
    s.sampler_steps = sampler_steps;
    s.seed = mix64(seed ^ 0x5E1F7A11ull);
    return s;
  }

  void validate() const {
    model.validate();
    if (model.clip.channels != 3) throw ConfigError("clips must have 3 channels");
    (void)make_noise_schedule();
    (void)step_subsequence(sampler_steps, schedule.steps);
    if (!(optimizer.lr > 0.0f)) throw ConfigError("optimizer.lr must be positive");
    if (!(optimizer.beta1 >= 0.0f && optimizer.beta1 < 1.0f && optimizer.beta2 >= 0.0f && optimizer.beta2 < 1.0f))
      throw ConfigError("optimizer betas must lie in [0, 1)");
    if (!(optimizer.eps > 0.0f)) throw ConfigError("optimizer.eps must be positive");
    if (pretrain.videos_per_step == 0 || pretrain.clips_per_video == 0)
      throw ConfigError("pretrain.videos_per_step and clips_per_video must be positive");
    if (pretrain.checkpoint_every == 0 || pretrain.log_every == 0)
      throw ConfigError("pretrain.checkpoint_every and log_every must be positive");
    if (selftrain.samples == 0) throw ConfigError("selftrain.samples must be >= 1");
    if (!(selftrain.t_u > 0.0f)) throw ConfigError("selftrain.t_u must be positive");
    if (!(selftrain.t_d >= 0.0f)) throw ConfigError("selftrain.t_d must be non-negative");
    if (selftrain.videos_per_step == 0 || selftrain.clips_per_video == 0 || selftrain.refresh == 0)
      throw ConfigError("selftrain batch sizes and refresh interval must be positive");
    if (selftrain.rain_ratio + selftrain.correction_ratio == 0) throw ConfigError("selftrain branch ratio is 0:0");
    if (!(selftrain.augment.max_variance > 0.0) || selftrain.augment.mask_ratio < 0.0 || selftrain.augment.mask_ratio > 1.0)
      throw ConfigError("selftrain augmentation settings out of range");
    if (!(ema_decay > 0.0f && ema_decay < 1.0f)) throw ConfigError("selftrain.ema_decay must lie in (0, 1)");
    if (data.frames < model.clip.frames)
      throw ConfigError("data.video_frames must be at least model.clip_frames");
  }
};

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline std::string format_float(float v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<float>::max_digits10) << v;
  return os.str();
}

// Ordered (section, key) -> text.
using KeyValues = std::map<std::string, std::map<std::string, std::string>>;

inline KeyValues to_key_values(const Config& c) {
  KeyValues kv;
  auto& m = kv["model"];
  m["clip_channels"] = std::to_string(c.model.clip.channels);
  m["clip_frames"] = std::to_string(c.model.clip.frames);
  m["clip_height"] = std::to_string(c.model.clip.height);
  m["clip_width"] = std::to_string(c.model.clip.width);
  m["patch_time"] = std::to_string(c.model.patch.ts);
  m["patch_space"] = std::to_string(c.model.patch.ss);
  m["token_width"] = std::to_string(c.model.patch.width);
  m["blocks"] = std::to_string(c.model.n_blocks);
  m["heads"] = std::to_string(c.model.heads);
  m["mlp_ratio"] = std::to_string(c.model.mlp_ratio);
  auto& s = kv["schedule"];
  s["steps"] = std::to_string(c.schedule.steps);
  s["beta_start"] = format_double(c.schedule.beta_start);
  s["beta_end"] = format_double(c.schedule.beta_end);
  auto& o = kv["optimizer"];
  o["lr"] = format_float(c.optimizer.lr);
  o["beta1"] = format_float(c.optimizer.beta1);
  o["beta2"] = format_float(c.optimizer.beta2);
  o["eps"] = format_float(c.optimizer.eps);
  auto& p = kv["pretrain"];
  p["steps"] = std::to_string(c.pretrain.steps);
  p["videos_per_step"] = std::to_string(c.pretrain.videos_per_step);
  p["clips_per_video"] = std::to_string(c.pretrain.clips_per_video);
  p["checkpoint_every"] = std::to_string(c.pretrain.checkpoint_every);
  p["log_every"] = std::to_string(c.pretrain.log_every);
  auto& st = kv["selftrain"];
  st["steps"] = std::to_string(c.selftrain.steps);
  st["samples"] = std::to_string(c.selftrain.samples);
  st["t_u"] = format_float(c.selftrain.t_u);
  st["t_d"] = format_float(c.selftrain.t_d);
  st["videos_per_step"] = std::to_string(c.selftrain.videos_per_step);
  st["clips_per_video"] = std::to_string(c.selftrain.clips_per_video);
  st["refresh"] = std::to_string(c.selftrain.refresh);
  st["rain_ratio"] = std::to_string(c.selftrain.rain_ratio);
  st["correction_ratio"] = std::to_string(c.selftrain.correction_ratio);
  st["ema_decay"] = format_float(c.ema_decay);
  st["correction_condition"] =
      c.selftrain.correction_condition == CorrectionCondition::prediction ? "prediction" : "clear";
  st["augment_max_variance"] = format_double(c.selftrain.augment.max_variance);
  st["augment_mask_ratio"] = format_double(c.selftrain.augment.mask_ratio);
  kv["sampler"]["steps"] = std::to_string(c.sampler_steps);
  auto& d = kv["data"];
  d["video_frames"] = std::to_string(c.data.frames);
  d["paired"] = std::to_string(c.data.n_paired);
  d["paired_eval"] = std::to_string(c.data.n_paired_eval);
  d["unlabeled_rain"] = std::to_string(c.data.n_unlabeled_rain);
  d["unlabeled_rain_eval"] = std::to_string(c.data.n_unlabeled_rain_eval);
  d["clear"] = std::to_string(c.data.n_clear);
  d["clear_eval"] = std::to_string(c.data.n_clear_eval);
  kv["run"]["seed"] = std::to_string(c.seed);
  auto& pa = kv["paths"];
  pa["data_root"] = c.paths.data_root.string();
  pa["pretrain_checkpoint"] = c.paths.pretrain_checkpoint.string();
  pa["selftrain_checkpoint"] = c.paths.selftrain_checkpoint.string();
  return kv;
}

template <class V>
V parse_value(const std::string& section, const std::string& key, const std::string& text) {
  const std::string where = section + "." + key;
  try {
    std::size_t used = 0;
    V v{};
    if constexpr (std::is_same_v<V, double>) {
      v = std::stod(text, &used);
    } else if constexpr (std::is_same_v<V, float>) {
      v = std::stof(text, &used);
    } else if constexpr (std::is_same_v<V, std::uint64_t>) {
      if (!text.empty() && text[0] == '-') throw ConfigError(where + " must be non-negative");
      v = std::stoull(text, &used);
    } else if constexpr (std::is_same_v<V, std::size_t>) {
      if (!text.empty() && text[0] == '-') throw ConfigError(where + " must be non-negative");
      v = static_cast<std::size_t>(std::stoull(text, &used));
    }
    if (used != text.size()) throw ConfigError(where + ": trailing characters in '" + text + "'");
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(where + ": cannot parse '" + text + "'");
  }
}

}  // namespace detail

/// Serializes every field; parse_config(to_config_text(c)) reproduces c.
inline std::string to_config_text(const Config& c) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [section, keys] : detail::to_key_values(c)) {
    if (!first) os << '\n';
    first = false;
    os << '[' << section << "]\n";
    for (const auto& [k, v] : keys) os << k << " = " << v << '\n';
  }
  return os.str();
}

/// Parses configuration text on top of the defaults and validates it.
inline Config parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }

  Config c;
  const auto known = detail::to_key_values(c);
  for (const auto& [section, keys] : tree) {
    const auto s = known.find(section);
    if (s == known.end()) throw ConfigError("unknown config section [" + section + "]");
    if (keys.empty() && !keys.data().empty()) throw ConfigError("config key '" + section + "' outside a section");
    for (const auto& [key, value] : keys)
      if (!s->second.contains(key)) throw ConfigError("unknown config key " + section + "." + key);
  }

  auto get = [&](const char* section, const char* key, auto& field) {
    using V = std::remove_reference_t<decltype(field)>;
    const auto node = tree.get_child_optional(pt::ptree::path_type(std::string(section) + "/" + key, '/'));
    if (!node) return;
    field = detail::parse_value<V>(section, key, node->get_value<std::string>());
  };

  get("model", "clip_channels", c.model.clip.channels);
  get("model", "clip_frames", c.model.clip.frames);
  get("model", "clip_height", c.model.clip.height);
  get("model", "clip_width", c.model.clip.width);
  get("model", "patch_time", c.model.patch.ts);
  get("model", "patch_space", c.model.patch.ss);
  get("model", "token_width", c.model.patch.width);
  get("model", "blocks", c.model.n_blocks);
  get("model", "heads", c.model.heads);
  get("model", "mlp_ratio", c.model.mlp_ratio);
  get("schedule", "steps", c.schedule.steps);
  get("schedule", "beta_start", c.schedule.beta_start);
  get("schedule", "beta_end", c.schedule.beta_end);
  get("optimizer", "lr", c.optimizer.lr);
  get("optimizer", "beta1", c.optimizer.beta1);
  get("optimizer", "beta2", c.optimizer.beta2);
  get("optimizer", "eps", c.optimizer.eps);
  get("pretrain", "steps", c.pretrain.steps);
  get("pretrain", "videos_per_step", c.pretrain.videos_per_step);
  get("pretrain", "clips_per_video", c.pretrain.clips_per_video);
  get("pretrain", "checkpoint_every", c.pretrain.checkpoint_every);
  get("pretrain", "log_every", c.pretrain.log_every);
  get("selftrain", "steps", c.selftrain.steps);
  get("selftrain", "samples", c.selftrain.samples);
  get("selftrain", "t_u", c.selftrain.t_u);
  get("selftrain", "t_d", c.selftrain.t_d);
  get("selftrain", "videos_per_step", c.selftrain.videos_per_step);
  get("selftrain", "clips_per_video", c.selftrain.clips_per_video);
  get("selftrain", "refresh", c.selftrain.refresh);
  get("selftrain", "rain_ratio", c.selftrain.rain_ratio);
  get("selftrain", "correction_ratio", c.selftrain.correction_ratio);
  get("selftrain", "ema_decay", c.ema_decay);
  get("selftrain", "augment_max_variance", c.selftrain.augment.max_variance);
  get("selftrain", "augment_mask_ratio", c.selftrain.augment.mask_ratio);
  if (auto v = tree.get_optional<std::string>(pt::ptree::path_type("selftrain/correction_condition", '/'))) {
    if (*v == "prediction") c.selftrain.correction_condition = CorrectionCondition::prediction;
    else if (*v == "clear") c.selftrain.correction_condition = CorrectionCondition::clear;
    else throw ConfigError("selftrain.correction_condition must be 'prediction' or 'clear'");
  }
  get("sampler", "steps", c.sampler_steps);
  get("data", "video_frames", c.data.frames);
  get("data", "paired", c.data.n_paired);
  get("data", "paired_eval", c.data.n_paired_eval);
  get("data", "unlabeled_rain", c.data.n_unlabeled_rain);
  get("data", "unlabeled_rain_eval", c.data.n_unlabeled_rain_eval);
  get("data", "clear", c.data.n_clear);
  get("data", "clear_eval", c.data.n_clear_eval);
  get("run", "seed", c.seed);
  if (auto v = tree.get_optional<std::string>(pt::ptree::path_type("paths/data_root", '/'))) c.paths.data_root = *v;
  if (auto v = tree.get_optional<std::string>(pt::ptree::path_type("paths/pretrain_checkpoint", '/')))
    c.paths.pretrain_checkpoint = *v;
  if (auto v = tree.get_optional<std::string>(pt::ptree::path_type("paths/selftrain_checkpoint", '/')))
    c.paths.selftrain_checkpoint = *v;

  c.validate();
  return c;
}

inline Config load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

}  // namespace nightrain
