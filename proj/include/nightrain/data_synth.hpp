#pragma once

// Procedural nighttime clips: dark scenes with glowing lights, moving
// objects and luminance-dependent sensor noise, plus temporally coherent
// rain streaks. Writes paired, unlabeled-rain and clear splits with a
// line-oriented manifest.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nightrain/clip.hpp"
#include "nightrain/error.hpp"
#include "nightrain/frame_io.hpp"
#include "nightrain/parallel.hpp"
#include "nightrain/rng.hpp"

namespace nightrain {

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t frames = 8, height = 16, width = 16;
  std::size_t n_lights = 2;
  float base_luminance = 0.06f;  // [0, 0.2]
  float sensor_noise_sigma = 0.02f;
  float object_speed = 1.0f;  // pixels per frame
  float light_gain = 1.0f;    // scales glow intensity

  void validate() const {
    if (frames == 0 || height == 0 || width == 0) throw ConfigError("scene geometry must be positive");
    if (base_luminance < 0.0f || base_luminance > 0.2f) throw ConfigError("base_luminance must lie in [0, 0.2]");
    if (sensor_noise_sigma < 0.0f || light_gain < 0.0f) throw ConfigError("scene noise and gain must be non-negative");
  }
};

struct RainSpec {
  float density = 0.25f;         // [0, 1]
  float angle = 0.0f;            // degrees from vertical
  float streak_length = 4.0f;    // pixels
  float streak_brightness = 0.6f;  // (0, 1]
  float fall_speed = 3.0f;       // pixels per frame
  float glow_boost = 0.0f;       // extra brightness for streaks crossing bright regions
  std::uint64_t seed = 0;

  void validate() const {
    if (density < 0.0f || density > 1.0f) throw ConfigError("rain density must lie in [0, 1]");
    if (density > 0.0f && (streak_brightness <= 0.0f || streak_brightness > 1.0f))
      throw ConfigError("streak brightness must lie in (0, 1]");
    if (streak_length < 0.0f || glow_boost < 0.0f) throw ConfigError("streak length and glow boost must be >= 0");
  }
};

inline nlohmann::json to_json(const SceneSpec& s) {
  return {{"seed", s.seed},         {"frames", s.frames},
          {"height", s.height},     {"width", s.width},
          {"n_lights", s.n_lights}, {"base_luminance", s.base_luminance},
          {"sensor_noise_sigma", s.sensor_noise_sigma}, {"object_speed", s.object_speed},
          {"light_gain", s.light_gain}};
}

inline nlohmann::json to_json(const RainSpec& r) {
  return {{"density", r.density},       {"angle", r.angle},
          {"streak_length", r.streak_length}, {"streak_brightness", r.streak_brightness},
          {"fall_speed", r.fall_speed}, {"glow_boost", r.glow_boost},
          {"seed", r.seed}};
}

namespace detail {

inline double luminance01(const Clip& x, std::size_t t, std::size_t y, std::size_t xx) {
  double acc = 0.0;
  for (std::size_t c = 0; c < x.geometry.channels; ++c) acc += internal_to_unit(x.at(c, t, y, xx));
  return acc / static_cast<double>(x.geometry.channels);
}

}  // namespace detail

/// A clear night clip in the internal [-1, 1] range. Pure function of spec.
inline Clip gen_night_scene(const SceneSpec& spec) {
  spec.validate();
  const ClipGeometry g{3, spec.frames, spec.height, spec.width};
  const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
  CounterRng root(spec.seed);
  CounterRng palette = root.split(1);
  CounterRng light_rng = root.split(2);
  CounterRng object_rng = root.split(3);
  CounterRng noise_rng = root.split(4);

  const double tint[3] = {palette.uniform(0.8, 1.0), palette.uniform(0.8, 1.0), palette.uniform(0.95, 1.2)};

  struct Light {
    double cx, cy, radius, intensity, color[3];
  };
  std::vector<Light> lights;
  for (std::size_t i = 0; i < spec.n_lights; ++i) {
    Light l{};
    l.cx = light_rng.uniform(0.0, W);
    l.cy = light_rng.uniform(0.0, H * 0.75);
    l.radius = light_rng.uniform(1.0, 2.5);
    l.intensity = light_rng.uniform(0.5, 1.4) * spec.light_gain;
    const bool warm = light_rng.uniform() < 0.7;
    l.color[0] = 1.0;
    l.color[1] = warm ? light_rng.uniform(0.65, 0.85) : light_rng.uniform(0.9, 1.0);
    l.color[2] = warm ? light_rng.uniform(0.35, 0.55) : light_rng.uniform(0.95, 1.1);
    lights.push_back(l);
  }

  struct Object {
    double x, y, w, h, color[3];
  };
  std::vector<Object> objects;
  const std::size_t n_objects = 1 + object_rng.below(2);
  for (std::size_t i = 0; i < n_objects; ++i) {
    Object o{};
    o.w = object_rng.uniform(3.0, 6.0);
    o.h = object_rng.uniform(2.0, 4.0);
    o.x = object_rng.uniform(0.0, W);
    o.y = object_rng.uniform(H * 0.5, H - o.h);
    const double base = object_rng.uniform(0.05, 0.3);
    for (double& c : o.color) c = base * object_rng.uniform(0.7, 1.3);
    objects.push_back(o);
  }

  Clip clip(g, ClipRole::pixel);
  std::vector<double> rgb(3);
  for (std::size_t t = 0; t < g.frames; ++t) {
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) {
        const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
        const double ramp = 0.6 + 0.4 * py / H;
        for (int c = 0; c < 3; ++c) rgb[c] = spec.base_luminance * tint[c] * ramp;
        for (const auto& o : objects) {
          // Objects drift horizontally and wrap around the frame.
          double ox = std::fmod(o.x + spec.object_speed * static_cast<double>(t), W + o.w);
          if (ox < 0) ox += W + o.w;
          ox -= o.w;
          if (px >= ox && px < ox + o.w && py >= o.y && py < o.y + o.h)
            for (int c = 0; c < 3; ++c) rgb[c] = o.color[c];
        }
        for (const auto& l : lights) {
          const double d2 = (px - l.cx) * (px - l.cx) + (py - l.cy) * (py - l.cy);
          const double glow = l.intensity * std::exp(-d2 / (2.0 * l.radius * l.radius));
          for (int c = 0; c < 3; ++c) rgb[c] += glow * l.color[c];
        }
        double lum = 0.0;
        for (int c = 0; c < 3; ++c) {
          rgb[c] = std::clamp(rgb[c], 0.0, 1.0);
          lum += rgb[c] / 3.0;
        }
        const double sigma = spec.sensor_noise_sigma * (1.0 - lum);
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = std::clamp(rgb[c] + sigma * noise_rng.gaussian(), 0.0, 1.0);
          clip.at(c, t, y, x) = unit_to_internal(static_cast<float>(v));
        }
      }
    }
  }
  return clip;
}

/// Rain composite plus the per-position streak opacity that produced it.
struct RainResult {
  Clip rain;
  PixelMap alpha;  // (T, H, W), 0 where no streak touches
};

/// Composites bright line segments over `x`. Each streak keeps its shape and
/// advances by fall_speed along its direction every frame, wrapping
/// vertically. density == 0 returns x unchanged.
inline RainResult add_rain_with_alpha(const Clip& x, const RainSpec& spec) {
  spec.validate();
  const auto& g = x.geometry;
  RainResult result{x, PixelMap(g)};
  if (spec.density == 0.0f) return result;

  const double H = static_cast<double>(g.height), W = static_cast<double>(g.width);
  const double theta = static_cast<double>(spec.angle) * std::numbers::pi / 180.0;
  const double dx = std::sin(theta), dy = std::cos(theta);
  const double len = spec.streak_length;
  const double period = H + 2.0 * len;
  const auto count = static_cast<std::size_t>(std::lround(spec.density * H * W / 10.0));
  CounterRng rng(spec.seed);

  struct Streak {
    double x0, y0, brightness;
  };
  std::vector<Streak> streaks(count);
  for (auto& s : streaks) {
    s.y0 = rng.uniform(0.0, period);
    s.x0 = rng.uniform(-len, W + len);
    s.brightness = spec.streak_brightness * rng.uniform(0.6, 1.0);
  }

  constexpr double half_width = 0.8;
  constexpr float streak_color[3] = {0.95f, 0.97f, 1.0f};
  std::vector<double> keep(g.height * g.width);
  for (std::size_t t = 0; t < g.frames; ++t) {
    std::fill(keep.begin(), keep.end(), 1.0);
    for (const auto& s : streaks) {
      const double travel = spec.fall_speed * static_cast<double>(t);
      double hy = std::fmod(s.y0 + travel * dy, period);
      if (hy < 0) hy += period;
      hy -= len;
      const double hx = s.x0 + travel * dx;
      const double tx = hx - len * dx, ty = hy - len * dy;  // tail
      double b = s.brightness;
      if (spec.glow_boost > 0.0f) {
        const auto my = static_cast<long>(std::floor((hy + ty) * 0.5));
        const auto mx = static_cast<long>(std::floor((hx + tx) * 0.5));
        if (my >= 0 && my < static_cast<long>(g.height) && mx >= 0 && mx < static_cast<long>(g.width))
          b *= 1.0 + spec.glow_boost * detail::luminance01(x, t, static_cast<std::size_t>(my), static_cast<std::size_t>(mx));
        b = std::min(b, 1.0);
      }
      const long y_lo = std::max(0L, static_cast<long>(std::floor(std::min(hy, ty) - half_width)));
      const long y_hi = std::min(static_cast<long>(g.height) - 1, static_cast<long>(std::ceil(std::max(hy, ty) + half_width)));
      const long x_lo = std::max(0L, static_cast<long>(std::floor(std::min(hx, tx) - half_width)));
      const long x_hi = std::min(static_cast<long>(g.width) - 1, static_cast<long>(std::ceil(std::max(hx, tx) + half_width)));
      for (long y = y_lo; y <= y_hi; ++y) {
        for (long xx = x_lo; xx <= x_hi; ++xx) {
          const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(xx) + 0.5;
          // Distance from pixel centre to the segment tail -> head.
          const double vx = hx - tx, vy = hy - ty;
          const double vv = vx * vx + vy * vy;
          double u = vv > 0 ? ((px - tx) * vx + (py - ty) * vy) / vv : 0.0;
          u = std::clamp(u, 0.0, 1.0);
          const double ex = px - (tx + u * vx), ey = py - (ty + u * vy);
          const double d = std::sqrt(ex * ex + ey * ey);
          const double a = b * std::max(0.0, 1.0 - d / half_width);
          if (a > 0.0) keep[static_cast<std::size_t>(y) * g.width + static_cast<std::size_t>(xx)] *= 1.0 - a;
        }
      }
    }
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t xx = 0; xx < g.width; ++xx) {
        const double a = 1.0 - keep[y * g.width + xx];
        if (a <= 0.0) continue;
        result.alpha.values[(t * g.height + y) * g.width + xx] = static_cast<float>(a);
        for (std::size_t c = 0; c < g.channels; ++c) {
          const float v = internal_to_unit(x.at(c, t, y, xx));
          const float mixed = v + static_cast<float>(a) * (streak_color[c % 3] - v);
          result.rain.at(c, t, y, xx) = unit_to_internal(std::clamp(mixed, 0.0f, 1.0f));
        }
      }
    }
  }
  return result;
}

inline Clip add_rain(const Clip& x, const RainSpec& spec) { return add_rain_with_alpha(x, spec).rain; }

// ---------------------------------------------------------------------------
// Datasets

enum class Split { paired, paired_eval, unlabeled_rain, unlabeled_rain_eval, clear, clear_eval };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::paired: return "paired";
    case Split::paired_eval: return "paired_eval";
    case Split::unlabeled_rain: return "unlabeled_rain";
    case Split::unlabeled_rain_eval: return "unlabeled_rain_eval";
    case Split::clear: return "clear";
    case Split::clear_eval: return "clear_eval";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  for (Split v : {Split::paired, Split::paired_eval, Split::unlabeled_rain, Split::unlabeled_rain_eval, Split::clear,
                  Split::clear_eval})
    if (s == split_name(v)) return v;
  throw DataError("unknown split '" + s + "'");
}

inline bool split_has_rain(Split s) { return s != Split::clear && s != Split::clear_eval; }
inline bool split_is_shifted(Split s) { return s == Split::unlabeled_rain || s == Split::unlabeled_rain_eval; }

struct DatasetSpec {
  std::filesystem::path root;
  std::uint64_t seed = 1;
  std::size_t frames = 8, height = 16, width = 16;
  std::size_t n_paired = 8;
  std::size_t n_paired_eval = 4;
  std::size_t n_unlabeled_rain = 8;
  std::size_t n_unlabeled_rain_eval = 4;
  std::size_t n_clear = 8;
  std::size_t n_clear_eval = 6;

  [[nodiscard]] std::size_t count(Split s) const {
    switch (s) {
      case Split::paired: return n_paired;
      case Split::paired_eval: return n_paired_eval;
      case Split::unlabeled_rain: return n_unlabeled_rain;
      case Split::unlabeled_rain_eval: return n_unlabeled_rain_eval;
      case Split::clear: return n_clear;
      case Split::clear_eval: return n_clear_eval;
    }
    return 0;
  }
};

struct ManifestEntry {
  Split split = Split::paired;
  std::string video_id;
  std::string path;  // relative to the dataset root
  nlohmann::json params;
};

using Manifest = std::vector<ManifestEntry>;

inline constexpr const char* kManifestName = "manifest.tsv";

/// Seeds for video `index` of `split`; the split tag occupies the high bits
/// so splits never share a seed.
inline std::uint64_t video_seed(std::uint64_t base, Split split, std::size_t index, std::uint64_t purpose) {
  const std::uint64_t tag = (static_cast<std::uint64_t>(split) + 1) << 56 | (purpose << 48) | index;
  return mix64(mix64(base) ^ tag) ^ tag;
}

/// Scene parameters. The clear splits use brighter lights so that predicted
/// saturation errors are visible.
inline SceneSpec scene_for(const DatasetSpec& d, Split split, std::size_t index) {
  CounterRng rng(video_seed(d.seed, split, index, 1));
  SceneSpec s;
  s.seed = video_seed(d.seed, split, index, 2);
  s.frames = d.frames;
  s.height = d.height;
  s.width = d.width;
  const bool clear = !split_has_rain(split);
  s.n_lights = clear ? 3 + rng.below(4) : 1 + rng.below(4);
  s.base_luminance = static_cast<float>(clear ? rng.uniform(0.08, 0.2) : rng.uniform(0.02, 0.12));
  s.sensor_noise_sigma = static_cast<float>(rng.uniform(0.01, 0.03));
  s.object_speed = static_cast<float>(rng.uniform(0.5, 1.5));
  s.light_gain = clear ? 1.5f : 1.0f;
  return s;
}

/// Rain parameters. The unlabeled rain splits draw from a shifted
/// distribution: denser, longer, brighter streaks that light up near glows.
inline RainSpec rain_for(const DatasetSpec& d, Split split, std::size_t index) {
  CounterRng rng(video_seed(d.seed, split, index, 3));
  RainSpec r;
  r.seed = video_seed(d.seed, split, index, 4);
  if (split_is_shifted(split)) {
    r.density = static_cast<float>(rng.uniform(0.35, 0.6));
    r.streak_length = static_cast<float>(rng.uniform(6.0, 10.0));
    r.streak_brightness = static_cast<float>(rng.uniform(0.6, 0.9));
    r.angle = static_cast<float>(rng.uniform(-25.0, 25.0));
    r.glow_boost = 1.0f;
  } else {
    r.density = static_cast<float>(rng.uniform(0.15, 0.35));
    r.streak_length = static_cast<float>(rng.uniform(3.0, 6.0));
    r.streak_brightness = static_cast<float>(rng.uniform(0.4, 0.7));
    r.angle = static_cast<float>(rng.uniform(-15.0, 15.0));
    r.glow_boost = 0.0f;
  }
  r.fall_speed = static_cast<float>(rng.uniform(2.0, 4.0));
  return r;
}

/// Streak opacity stored as a gray clip in [-1, 1] (alpha 0 -> -1).
inline Clip alpha_to_clip(const PixelMap& alpha) {
  Clip c({3, alpha.frames, alpha.height, alpha.width}, ClipRole::pixel);
  const std::size_t n = alpha.values.size();
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < n; ++i) c.values[ch * n + i] = unit_to_internal(alpha.values[i]);
  return c;
}

inline PixelMap clip_to_alpha(const Clip& c) {
  PixelMap a(c.geometry);
  const std::size_t n = c.geometry.pixels();
  for (std::size_t i = 0; i < n; ++i) a.values[i] = internal_to_unit(c.values[i]);
  return a;
}

inline void write_manifest(const std::filesystem::path& file, const Manifest& m) {
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw DataError("cannot write manifest " + file.string());
    for (const auto& e : m) os << split_name(e.split) << '\t' << e.video_id << '\t' << e.path << '\t' << e.params.dump() << '\n';
    if (!os) throw DataError("write failed for manifest " + file.string());
  }
  std::filesystem::rename(tmp, file);
}

inline Manifest read_manifest(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open manifest " + file.string());
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (int k = 0; k < 3; ++k) {
      const auto tab = line.find('\t', start);
      if (tab == std::string::npos) throw DataError(file.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
      cols.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    cols.push_back(line.substr(start));
    ManifestEntry e;
    e.split = parse_split(cols[0]);
    e.video_id = cols[1];
    e.path = cols[2];
    try {
      e.params = nlohmann::json::parse(cols[3]);
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(file.string() + ":" + std::to_string(lineno) + ": bad parameter blob: " + ex.what());
    }
    m.push_back(std::move(e));
  }
  return m;
}

/// Generates every split under spec.root and writes the manifest. Each video
/// folder has clean/ and, for rain splits, rain/ and streaks/ (opacity).
inline Manifest make_dataset(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(spec.root, ec);
  if (ec) throw DataError("cannot create dataset root " + spec.root.string() + ": " + ec.message());

  Manifest manifest;
  for (Split split : {Split::paired, Split::paired_eval, Split::unlabeled_rain, Split::unlabeled_rain_eval,
                      Split::clear, Split::clear_eval}) {
    for (std::size_t i = 0; i < spec.count(split); ++i) {
      ManifestEntry e;
      e.split = split;
      e.video_id = std::string(split_name(split)) + "_" + std::to_string(i);
      e.path = std::string(split_name(split)) + "/" + e.video_id;
      const SceneSpec scene = scene_for(spec, split, i);
      e.params = {{"frames", spec.frames}, {"height", spec.height}, {"width", spec.width}, {"scene", to_json(scene)}};
      if (split_has_rain(split)) e.params["rain"] = to_json(rain_for(spec, split, i));
      manifest.push_back(std::move(e));
    }
  }

  parallel_for(manifest.size(), [&](std::size_t k) {
    const auto& e = manifest[k];
    const std::size_t index = std::stoul(e.video_id.substr(e.video_id.rfind('_') + 1));
    const Clip clean = gen_night_scene(scene_for(spec, e.split, index));
    const fs::path dir = spec.root / e.path;
    // Quantize first so clean and rain frames agree bit-for-bit off-streak.
    const Clip clean_q = quantize_clip(clean);
    save_clip(clean_q, dir / "clean");
    if (split_has_rain(e.split)) {
      const auto rain = add_rain_with_alpha(clean_q, rain_for(spec, e.split, index));
      save_clip(rain.rain, dir / "rain");
      save_clip(alpha_to_clip(rain.alpha), dir / "streaks");
    }
  });
  write_manifest(spec.root / kManifestName, manifest);
  return manifest;
}

/// A paired video: rain input and its clean ground truth.
struct PairedVideo {
  std::string id;
  Clip clean;
  Clip rain;
  PixelMap streaks;
};

/// An unlabeled rain video; carries no ground truth by construction.
struct RainVideo {
  std::string id;
  Clip rain;
};

struct ClearVideo {
  std::string id;
  Clip clear;
};

inline std::size_t expected_frames(const ManifestEntry& e) {
  if (!e.params.contains("frames")) throw DataError("manifest entry " + e.video_id + " has no frame count");
  return e.params.at("frames").get<std::size_t>();
}

inline std::vector<const ManifestEntry*> entries_of(const Manifest& m, Split s) {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : m)
    if (e.split == s) out.push_back(&e);
  return out;
}

/// Paired videos (rain + hidden clean + streak opacity) of a rain split.
inline std::vector<PairedVideo> load_paired(const std::filesystem::path& root, const Manifest& m, Split s) {
  if (!split_has_rain(s)) throw DataError(std::string(split_name(s)) + " has no rain videos");
  std::vector<PairedVideo> out;
  for (const auto* e : entries_of(m, s)) {
    const auto n = expected_frames(*e);
    const auto dir = root / e->path;
    out.push_back({e->video_id, load_clip(dir / "clean", n), load_clip(dir / "rain", n),
                   clip_to_alpha(load_clip(dir / "streaks", n))});
  }
  return out;
}

/// Reads only the rain/ folders of a split.
inline std::vector<RainVideo> load_rain_only(const std::filesystem::path& root, const Manifest& m, Split s) {
  if (!split_has_rain(s)) throw DataError(std::string(split_name(s)) + " has no rain videos");
  std::vector<RainVideo> out;
  for (const auto* e : entries_of(m, s)) out.push_back({e->video_id, load_clip(root / e->path / "rain", expected_frames(*e))});
  return out;
}

inline std::vector<ClearVideo> load_clear(const std::filesystem::path& root, const Manifest& m, Split s) {
  std::vector<ClearVideo> out;
  for (const auto* e : entries_of(m, s)) out.push_back({e->video_id, load_clip(root / e->path / "clean", expected_frames(*e))});
  return out;
}

}  // namespace nightrain
