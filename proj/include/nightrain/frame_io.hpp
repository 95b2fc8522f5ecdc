#pragma once

// Binary PPM (P6, maxval 255) frames and frame-folder clips. Pixel clips are
// [-1, 1] internally and map linearly onto [0, 1] -> {0..255} on disk.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nightrain/clip.hpp"
#include "nightrain/error.hpp"

namespace nightrain {

namespace fs = std::filesystem;

struct Frame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved
};

inline std::uint8_t quantize_unit(float v01) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v01, 0.0f, 1.0f) * 255.0f));
}

inline float internal_to_unit(float v) { return (v + 1.0f) * 0.5f; }
inline float unit_to_internal(float v) { return v * 2.0f - 1.0f; }
inline float byte_to_internal(std::uint8_t b) { return static_cast<float>(b) / 255.0f * 2.0f - 1.0f; }

inline void write_ppm(const fs::path& path, const Frame& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << "P6\n" << f.width << ' ' << f.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(f.rgb.data()), static_cast<std::streamsize>(f.rgb.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

inline Frame read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open frame " + path.string());
  auto next_token = [&]() {
    std::string tok;
    char ch = 0;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (!std::isspace(static_cast<unsigned char>(ch))) {
        tok.push_back(ch);
        break;
      }
    }
    while (is.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) tok.push_back(ch);
    return tok;
  };
  if (next_token() != "P6") throw DataError(path.string() + ": not a binary PPM (P6)");
  Frame f;
  std::size_t maxval = 0;
  try {
    f.width = std::stoul(next_token());
    f.height = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PPM header");
  }
  if (maxval != 255 || f.width == 0 || f.height == 0) throw DataError(path.string() + ": unsupported PPM header");
  f.rgb.resize(f.width * f.height * 3);
  if (!is.read(reinterpret_cast<char*>(f.rgb.data()), static_cast<std::streamsize>(f.rgb.size())))
    throw DataError(path.string() + ": truncated pixel data");
  return f;
}

inline std::string frame_name(std::size_t index) {
  std::ostringstream os;
  os.width(4);
  os.fill('0');
  os << index;
  return os.str() + ".ppm";
}

/// Frames of a 3-channel pixel clip, quantized to 8 bits.
inline std::vector<Frame> clip_to_frames(const Clip& clip) {
  const auto& g = clip.geometry;
  if (g.channels != 3) throw DimensionError("frames need 3-channel clips, got " + to_string(g));
  std::vector<Frame> frames(g.frames);
  for (std::size_t t = 0; t < g.frames; ++t) {
    Frame& f = frames[t];
    f.width = g.width;
    f.height = g.height;
    f.rgb.resize(g.width * g.height * 3);
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          f.rgb[(y * g.width + x) * 3 + c] = quantize_unit(internal_to_unit(clip.at(c, t, y, x)));
  }
  return frames;
}

inline Clip frames_to_clip(const std::vector<Frame>& frames) {
  if (frames.empty()) throw DataError("no frames");
  const std::size_t w = frames[0].width, h = frames[0].height;
  Clip clip({3, frames.size(), h, w}, ClipRole::pixel);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (frames[t].width != w || frames[t].height != h)
      throw DataError("frame " + std::to_string(t) + " has a different size than frame 0");
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c) clip.at(c, t, y, x) = byte_to_internal(frames[t].rgb[(y * w + x) * 3 + c]);
  }
  return clip;
}

/// Writes one P6 file per frame (0000.ppm, 0001.ppm, ...) into `dir`.
inline void save_clip(const Clip& clip, const fs::path& dir) {
  fs::create_directories(dir);
  const auto frames = clip_to_frames(clip);
  for (std::size_t t = 0; t < frames.size(); ++t) write_ppm(dir / frame_name(t), frames[t]);
}

/// Number of consecutive frames 0000.ppm, 0001.ppm, ... present in `dir`.
inline std::size_t count_frames(const fs::path& dir) {
  std::size_t n = 0;
  while (fs::exists(dir / frame_name(n))) ++n;
  return n;
}

/// Loads every frame of a folder. When `expected_frames` is set the folder
/// must contain exactly that many.
inline Clip load_clip(const fs::path& dir, std::optional<std::size_t> expected_frames = std::nullopt) {
  if (!fs::is_directory(dir)) throw DataError("clip folder " + dir.string() + " does not exist");
  std::size_t n = count_frames(dir);
  std::size_t ppm_files = 0;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".ppm") ++ppm_files;
  if (ppm_files != n) throw DataError(dir.string() + ": frame numbering has gaps");
  if (n == 0) throw DataError(dir.string() + ": no frames");
  if (expected_frames && *expected_frames != n)
    throw DataError(dir.string() + ": expected " + std::to_string(*expected_frames) + " frames, found " +
                    std::to_string(n));
  std::vector<Frame> frames;
  frames.reserve(n);
  for (std::size_t t = 0; t < n; ++t) frames.push_back(read_ppm(dir / frame_name(t)));
  return frames_to_clip(frames);
}

/// Rounds a pixel clip onto the 8-bit grid used on disk.
inline Clip quantize_clip(const Clip& clip) {
  Clip out = clip;
  for (auto& v : out.values) v = byte_to_internal(quantize_unit(internal_to_unit(v)));
  return out;
}

}  // namespace nightrain
