#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "nightrain/error.hpp"
#include "nightrain/rng.hpp"
#include "nightrain/tensor.hpp"

namespace nightrain {

struct ClipGeometry {
  std::size_t channels = 3;
  std::size_t frames = 4;
  std::size_t height = 16;
  std::size_t width = 16;

  [[nodiscard]] std::size_t pixels() const { return frames * height * width; }
  [[nodiscard]] std::size_t size() const { return channels * pixels(); }
  [[nodiscard]] Shape shape() const { return {channels, frames, height, width}; }
  bool operator==(const ClipGeometry&) const = default;
};

inline std::string to_string(const ClipGeometry& g) {
  return std::to_string(g.channels) + "x" + std::to_string(g.frames) + "x" + std::to_string(g.height) + "x" +
         std::to_string(g.width);
}

enum class ClipRole { pixel, latent, noise, condition };

/// A video tensor (C, T, H, W) stored by value. Pixel clips live in [-1, 1];
/// the [0, 1] range only exists at file boundaries.
struct Clip {
  ClipGeometry geometry;
  ClipRole role = ClipRole::pixel;
  std::vector<float> values;

  Clip() = default;
  Clip(ClipGeometry g, ClipRole r, float fill = 0.0f) : geometry(g), role(r), values(g.size(), fill) {}
  Clip(ClipGeometry g, ClipRole r, std::vector<float> v) : geometry(g), role(r), values(std::move(v)) {
    if (values.size() != geometry.size())
      throw DimensionError("clip data length " + std::to_string(values.size()) + " does not match geometry " +
                           to_string(geometry));
  }

  [[nodiscard]] std::size_t index(std::size_t c, std::size_t t, std::size_t y, std::size_t x) const {
    return ((c * geometry.frames + t) * geometry.height + y) * geometry.width + x;
  }
  float& at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) { return values[index(c, t, y, x)]; }
  [[nodiscard]] float at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) const {
    return values[index(c, t, y, x)];
  }

  [[nodiscard]] Tensor tensor() const { return Tensor(geometry.shape(), values); }

  static Clip from_tensor(const Tensor& t, ClipRole role) {
    if (t.rank() != 4) throw DimensionError("clip tensor must have rank 4, got " + shape_str(t.shape()));
    return Clip({t.dim(0), t.dim(1), t.dim(2), t.dim(3)}, role, t.values());
  }

  /// Standard Gaussian draw.
  static Clip gaussian(ClipGeometry g, CounterRng& rng) {
    Clip c(g, ClipRole::noise);
    for (auto& v : c.values) v = static_cast<float>(rng.gaussian());
    return c;
  }

  void clamp_pixels() {
    for (auto& v : values) v = std::clamp(v, -1.0f, 1.0f);
  }

  /// Frames [first, first + count) as a new clip.
  [[nodiscard]] Clip frames(std::size_t first, std::size_t count) const {
    if (first + count > geometry.frames || count == 0)
      throw DimensionError("frame range out of bounds for clip " + to_string(geometry));
    ClipGeometry g = geometry;
    g.frames = count;
    Clip out(g, role);
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t t = 0; t < count; ++t)
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(index(c, first + t, 0, 0)), g.height * g.width,
                    out.values.begin() + static_cast<std::ptrdiff_t>(out.index(c, t, 0, 0)));
    return out;
  }
};

inline void require_same_geometry(const Clip& a, const Clip& b, const std::string& what) {
  if (a.geometry != b.geometry)
    throw DimensionError(what + ": geometry mismatch " + to_string(a.geometry) + " vs " + to_string(b.geometry));
}

/// Per-position map over (T, H, W), shared by confidence and difference maps.
struct PixelMap {
  std::size_t frames = 0, height = 0, width = 0;
  std::vector<float> values;

  PixelMap() = default;
  PixelMap(std::size_t t, std::size_t h, std::size_t w, float fill = 0.0f)
      : frames(t), height(h), width(w), values(t * h * w, fill) {}
  explicit PixelMap(const ClipGeometry& g, float fill = 0.0f) : PixelMap(g.frames, g.height, g.width, fill) {}

  [[nodiscard]] bool matches(const ClipGeometry& g) const {
    return frames == g.frames && height == g.height && width == g.width;
  }
};

/// Channel-averaged absolute difference |a - b|.
inline PixelMap l1_map(const Clip& a, const Clip& b) {
  require_same_geometry(a, b, "l1_map");
  const auto& g = a.geometry;
  PixelMap d(g);
  const std::size_t n = g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < n; ++i) d.values[i] += std::abs(a.values[c * n + i] - b.values[c * n + i]);
  for (auto& v : d.values) v /= static_cast<float>(g.channels);
  return d;
}

inline double mean_abs_diff(const Clip& a, const Clip& b) {
  require_same_geometry(a, b, "mean_abs_diff");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) acc += std::abs(static_cast<double>(a.values[i]) - b.values[i]);
  return acc / static_cast<double>(a.values.size());
}

}  // namespace nightrain
