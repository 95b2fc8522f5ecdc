#pragma once

// Full-reference metrics on 8-bit quantized [0, 1] frames, difference
// heatmaps, and the tab-separated metric report.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nightrain/clip.hpp"
#include "nightrain/error.hpp"
#include "nightrain/frame_io.hpp"

namespace nightrain {

inline constexpr double kPsnrCap = 99.0;

/// PSNR in dB for values already in [0, 1]; identical inputs give kPsnrCap.
inline double psnr_unit(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("psnr: inputs differ in size");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// Clip values mapped to [0, 1] and rounded to the 8-bit grid.
inline std::vector<double> io_values(const Clip& c) {
  std::vector<double> out(c.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize_unit(internal_to_unit(c.values[i])) / 255.0;
  return out;
}

inline double psnr(const Clip& a, const Clip& b) {
  require_same_geometry(a, b, "psnr");
  const auto va = io_values(a), vb = io_values(b);
  return psnr_unit(va, vb);
}

namespace detail {

inline std::array<double, 11> ssim_window() {
  std::array<double, 11> w{};
  double total = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Mean SSIM of one plane (valid windows only).
inline double ssim_plane(const double* a, const double* b, std::size_t h, std::size_t w) {
  static const auto win = ssim_window();
  constexpr double c1 = (0.01 * 1.0) * (0.01 * 1.0);
  constexpr double c2 = (0.03 * 1.0) * (0.03 * 1.0);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + 11 <= h; ++y) {
    for (std::size_t x = 0; x + 11 <= w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < 11; ++i) {
        for (std::size_t j = 0; j < 11; ++j) {
          const double k = win[i] * win[j];
          const double va = a[(y + i) * w + x + j], vb = b[(y + i) * w + x + j];
          ma += k * va;
          mb += k * vb;
          saa += k * va * va;
          sbb += k * vb * vb;
          sab += k * va * vb;
        }
      }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace detail

/// Mean SSIM over every frame and channel: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.
inline double ssim(const Clip& a, const Clip& b) {
  require_same_geometry(a, b, "ssim");
  const auto& g = a.geometry;
  if (g.height < 11 || g.width < 11) throw DimensionError("ssim: frames smaller than the 11x11 window");
  const auto va = io_values(a), vb = io_values(b);
  const std::size_t plane = g.height * g.width;
  double acc = 0.0;
  for (std::size_t p = 0; p < g.channels * g.frames; ++p)
    acc += detail::ssim_plane(va.data() + p * plane, vb.data() + p * plane, g.height, g.width);
  return acc / static_cast<double>(g.channels * g.frames);
}

/// Blue (0) to red (>= 0.5) linear palette.
inline std::array<std::uint8_t, 3> heat_color(double d) {
  const double s = std::clamp(d / 0.5, 0.0, 1.0);
  const auto r = static_cast<std::uint8_t>(std::lround(255.0 * s));
  return {r, 0, static_cast<std::uint8_t>(255 - r)};
}

/// Channel-averaged L1 distance in [0, 1] I/O space rendered as heatmap
/// frames. Frames are written to `dir` when it is non-empty.
inline std::vector<Frame> diff_heatmap(const Clip& a, const Clip& b, const std::filesystem::path& dir = {}) {
  require_same_geometry(a, b, "diff_heatmap");
  const auto& g = a.geometry;
  const auto va = io_values(a), vb = io_values(b);
  const std::size_t n = g.pixels();
  std::vector<Frame> frames(g.frames);
  for (std::size_t t = 0; t < g.frames; ++t) {
    Frame& f = frames[t];
    f.width = g.width;
    f.height = g.height;
    f.rgb.resize(g.width * g.height * 3);
    for (std::size_t p = 0; p < g.height * g.width; ++p) {
      double d = 0.0;
      for (std::size_t c = 0; c < g.channels; ++c) {
        const std::size_t i = c * n + t * g.height * g.width + p;
        d += std::abs(va[i] - vb[i]);
      }
      const auto rgb = heat_color(d / static_cast<double>(g.channels));
      std::copy(rgb.begin(), rgb.end(), f.rgb.begin() + static_cast<std::ptrdiff_t>(p * 3));
    }
  }
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < frames.size(); ++t) write_ppm(dir / frame_name(t), frames[t]);
  }
  return frames;
}

struct MetricRow {
  std::string clip_id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;  // manifest order

  /// Means accumulated in clip-id order so they do not depend on row order.
  [[nodiscard]] std::pair<double, double> means() const {
    if (rows.empty()) return {0.0, 0.0};
    std::vector<const MetricRow*> sorted;
    for (const auto& r : rows) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->clip_id < b->clip_id; });
    double p = 0.0, s = 0.0;
    for (const auto* r : sorted) {
      p += r->psnr_db;
      s += r->ssim;
    }
    return {p / static_cast<double>(rows.size()), s / static_cast<double>(rows.size())};
  }
};

inline void write_report(std::ostream& os, const MetricReport& report) {
  const auto [mp, ms] = report.means();
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "# metrics on 8-bit quantized frames in [0,1]; psnr capped at " << kPsnrCap << " dB; mean_psnr_db=" << mp
     << " mean_ssim=" << ms << '\n';
  os << "clip_id\tpsnr_db\tssim\n";
  for (const auto& r : report.rows) os << r.clip_id << '\t' << r.psnr_db << '\t' << r.ssim << '\n';
}

inline MetricReport read_report(std::istream& is) {
  MetricReport report;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "clip_id\tpsnr_db\tssim") throw DataError("report: unexpected header '" + line + "'");
      header = true;
      continue;
    }
    std::istringstream row(line);
    MetricRow r;
    std::string p, s;
    if (!std::getline(row, r.clip_id, '\t') || !std::getline(row, p, '\t') || !std::getline(row, s))
      throw DataError("report: malformed row '" + line + "'");
    r.psnr_db = std::stod(p);
    r.ssim = std::stod(s);
    report.rows.push_back(std::move(r));
  }
  if (!header) throw DataError("report: missing header row");
  return report;
}

}  // namespace nightrain
