#pragma once

// Teacher-student fine-tuning without ground truth.
//
// Rain removal: the teacher derains an unlabeled rain clip N times from
// different initial noises; the mean is the pseudo target and the
// per-position variance gates which pixels the student is trained on.
// Correction: the teacher "derains" an already clear clip; positions where
// its prediction drifts from the input become training targets.
// Both branches update one shared student, and the teacher follows it by EMA.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nightrain/adam.hpp"
#include "nightrain/clip.hpp"
#include "nightrain/data_synth.hpp"
#include "nightrain/diffusion.hpp"
#include "nightrain/error.hpp"
#include "nightrain/noise_net.hpp"
#include "nightrain/parallel.hpp"
#include "nightrain/rng.hpp"

namespace nightrain {

struct TeacherStudent {
  ModelParams teacher;  // never receives gradients
  ModelParams student;
  float ema_decay = 0.999f;

  TeacherStudent() = default;
  /// Both networks start from the same pretrained weights.
  explicit TeacherStudent(const ModelParams& pretrained, float decay = 0.999f)
      : teacher(pretrained.clone()), student(pretrained.clone()), ema_decay(decay) {
    teacher.set_requires_grad(false);
    student.set_requires_grad(true);
  }
};

/// teacher <- decay * teacher + (1 - decay) * student, elementwise.
inline void ema_update(TeacherStudent& ts) {
  auto teacher = ts.teacher.tensors();
  auto student = ts.student.tensors();
  if (teacher.size() != student.size()) throw DimensionError("ema_update: parameter lists differ");
  const double d = ts.ema_decay;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i]->shape() != student[i]->shape())
      throw DimensionError("ema_update: shape mismatch at tensor " + std::to_string(i));
    auto tv = teacher[i]->data();
    auto sv = student[i]->data();
    for (std::size_t k = 0; k < tv.size(); ++k)
      tv[k] = static_cast<float>(d * static_cast<double>(tv[k]) + (1.0 - d) * static_cast<double>(sv[k]));
  }
}

// ---------------------------------------------------------------------------
// Confidence maps

struct ConfidenceMap {
  PixelMap variance;   // u, channel-averaged population variance
  std::size_t samples = 0;
  Clip mean;           // y, elementwise mean prediction
};

/// Resampling confidence: draws N predictions via draw(rain, seed), returns
/// their elementwise mean and channel-averaged population variance. The
/// statistics are independent of the order of `seeds`.
template <class DrawFn>
ConfidenceMap confidence_sample(DrawFn&& draw, const Clip& rain, std::span<const std::uint64_t> seeds,
                                std::size_t max_workers = 0) {
  if (seeds.empty()) throw UsageError("confidence_sample needs at least one sample");
  const std::size_t n = seeds.size();
  std::vector<Clip> preds(n);
  parallel_for(n, [&](std::size_t i) { preds[i] = draw(rain, seeds[i]); }, max_workers);
  for (const auto& p : preds) require_same_geometry(p, rain, "confidence_sample");

  const auto& g = rain.geometry;
  ConfidenceMap out;
  out.samples = n;
  out.mean = Clip(g, ClipRole::pixel);
  out.variance = PixelMap(g);
  const std::size_t plane = g.pixels();
  std::vector<double> vals(n);
  std::vector<double> var_acc(plane, 0.0);
  for (std::size_t e = 0; e < g.size(); ++e) {
    for (std::size_t i = 0; i < n; ++i) vals[i] = preds[i].values[e];
    std::sort(vals.begin(), vals.end());
    double m = 0.0;
    for (double v : vals) m += v;
    m /= static_cast<double>(n);
    double var = 0.0;
    for (double v : vals) var += (v - m) * (v - m);
    var /= static_cast<double>(n);
    out.mean.values[e] = static_cast<float>(m);
    var_acc[e % plane] += var;
  }
  for (std::size_t i = 0; i < plane; ++i)
    out.variance.values[i] = static_cast<float>(var_acc[i] / static_cast<double>(g.channels));
  return out;
}

/// {0, 1} map over (T, H, W); 1 marks a high-confidence / selected position.
struct BinaryMask {
  PixelMap map;
  float threshold = 0.0f;

  [[nodiscard]] std::size_t selected() const {
    return static_cast<std::size_t>(std::count(map.values.begin(), map.values.end(), 1.0f));
  }
  [[nodiscard]] bool degenerate() const { return selected() == 0; }
  [[nodiscard]] double fraction() const {
    return map.values.empty() ? 0.0 : static_cast<double>(selected()) / static_cast<double>(map.values.size());
  }
};

/// mask = 1 where u < t_u. An all-zero result reports degenerate().
inline BinaryMask binarize_confidence(const PixelMap& u, float t_u) {
  if (!(t_u >= 0.0f)) throw ConfigError("confidence threshold must be non-negative");
  BinaryMask m{PixelMap(u.frames, u.height, u.width), t_u};
  for (std::size_t i = 0; i < u.values.size(); ++i) m.map.values[i] = u.values[i] < t_u ? 1.0f : 0.0f;
  return m;
}

// ---------------------------------------------------------------------------
// Pseudo pairs

enum class Branch { rain_removal, correction };

struct PseudoPair {
  Clip condition;
  Clip target;
  BinaryMask mask;
  Branch tag = Branch::rain_removal;
};

inline PseudoPair build_rain_pair(const Clip& rain, const Clip& mean, const BinaryMask& mask) {
  require_same_geometry(rain, mean, "build_rain_pair");
  if (!mask.map.matches(rain.geometry)) throw DimensionError("build_rain_pair: mask geometry differs from clip");
  if (mask.degenerate()) throw DegeneratePairError("build_rain_pair: confidence mask selects nothing");
  Clip cond = rain;
  cond.role = ClipRole::condition;
  return {std::move(cond), mean, mask, Branch::rain_removal};
}

/// Which clip conditions a correction pair.
enum class CorrectionCondition {
  prediction,  // condition = teacher prediction, target = clear clip
  clear,       // condition = clear clip, target = clear clip
};

/// Round-trips a clear clip through predict(clear); positions whose
/// channel-averaged |prediction - clear| exceeds t_d form the mask.
/// Returns nullopt when nothing exceeds t_d.
template <class PredictFn>
std::optional<PseudoPair> build_correction_pair(PredictFn&& predict, const Clip& clear, float t_d,
                                                CorrectionCondition mode = CorrectionCondition::prediction) {
  Clip pred = predict(clear);
  require_same_geometry(pred, clear, "build_correction_pair");
  const PixelMap d = l1_map(pred, clear);
  BinaryMask mask{PixelMap(d.frames, d.height, d.width), t_d};
  for (std::size_t i = 0; i < d.values.size(); ++i) mask.map.values[i] = d.values[i] > t_d ? 1.0f : 0.0f;
  if (mask.degenerate()) return std::nullopt;
  Clip cond = mode == CorrectionCondition::prediction ? std::move(pred) : clear;
  cond.role = ClipRole::condition;
  return PseudoPair{std::move(cond), clear, std::move(mask), Branch::correction};
}

struct AugmentConfig {
  double max_variance = 0.2;  // noise variance drawn from (0, max_variance)
  double mask_ratio = 0.25;   // fraction of positions zeroed in every channel
};

/// Adds Gaussian noise of a random variance, then zeroes round(ratio * THW)
/// positions across all channels. Deterministic in seed.
inline Clip augment_condition(const Clip& x, std::uint64_t seed, const AugmentConfig& cfg = {}) {
  CounterRng rng(seed);
  double variance = 0.0;
  while (variance <= 0.0) variance = rng.uniform(0.0, cfg.max_variance);
  const double sigma = std::sqrt(variance);
  Clip out = x;
  for (auto& v : out.values) v = std::clamp(static_cast<float>(v + sigma * rng.gaussian()), -1.0f, 1.0f);

  const auto& g = x.geometry;
  const std::size_t positions = g.pixels();
  const auto masked = static_cast<std::size_t>(std::llround(cfg.mask_ratio * static_cast<double>(positions)));
  std::vector<std::size_t> order(positions);
  for (std::size_t i = 0; i < positions; ++i) order[i] = i;
  for (std::size_t i = 0; i < masked; ++i) {
    const std::size_t j = i + rng.below(positions - i);
    std::swap(order[i], order[j]);
    for (std::size_t c = 0; c < g.channels; ++c) out.values[c * positions + order[i]] = 0.0f;
  }
  out.role = ClipRole::condition;
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

/// One optimization step on a batch of pairs: random t and noise per pair,
/// augmentation of rain-removal conditions, masked loss on the student,
/// Adam on the student, then EMA into the teacher. Returns the mean loss.
inline double selftrain_batch(TeacherStudent& ts, std::span<const PseudoPair* const> pairs, const NoiseSchedule& sched,
                              CounterRng& rng, AdamState& adam, const AugmentConfig& aug = {}) {
  if (pairs.empty()) throw UsageError("selftrain_batch: empty batch");
  ts.student.zero_grad();
  double total = 0.0;
  const float inv_batch = 1.0f / static_cast<float>(pairs.size());
  for (const PseudoPair* pair : pairs) {
    if (pair->mask.degenerate()) throw DegeneratePairError("selftrain_batch: degenerate pair");
    const std::size_t t = 1 + static_cast<std::size_t>(rng.below(sched.steps));
    const Clip eps = Clip::gaussian(pair->target.geometry, rng);
    const Clip cond =
        pair->tag == Branch::rain_removal ? augment_condition(pair->condition, rng.next_u64(), aug) : pair->condition;
    const Tensor loss = training_loss(noise_estimator(ts.student), pair->target.tensor(), cond.tensor(), t,
                                      eps.tensor(), std::optional<PixelMap>(pair->mask.map), sched);
    if (!loss.all_finite()) throw NumericalError("self-training loss is not finite");
    total += loss.item();
    backward(scale(loss, inv_batch));
  }
  adam_step(ts.student.tensors(), adam);
  ts.student.zero_grad();
  ema_update(ts);
  return total / static_cast<double>(pairs.size());
}

inline double selftrain_step(TeacherStudent& ts, const PseudoPair& pair, const NoiseSchedule& sched, CounterRng& rng,
                             AdamState& adam, const AugmentConfig& aug = {}) {
  const PseudoPair* p = &pair;
  return selftrain_batch(ts, std::span<const PseudoPair* const>(&p, 1), sched, rng, adam, aug);
}

struct SelfTrainConfig {
  std::size_t steps = 2000;
  std::size_t samples = 3;         // N
  float t_u = 0.5f;                // confidence threshold
  float t_d = 0.05f;               // correction difference threshold
  std::size_t videos_per_step = 4; // P
  std::size_t clips_per_video = 1; // K
  std::size_t refresh = 200;       // R
  std::size_t rain_ratio = 1;      // rain-removal steps per cycle
  std::size_t correction_ratio = 1;
  std::size_t sampler_steps = 25;
  CorrectionCondition correction_condition = CorrectionCondition::prediction;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  bool check_invariants = false;
};

struct SelfTrainStats {
  std::size_t steps_run = 0;
  std::size_t rain_steps = 0;
  std::size_t correction_steps = 0;
  std::size_t skipped_steps = 0;
  std::size_t refreshes = 0;
  std::size_t degenerate_pairs = 0;
  std::size_t ema_bound_violations = 0;
  std::size_t mask_monotonicity_violations = 0;
  std::vector<double> losses;
  double mean_mask_fraction = 0.0;  // rain-removal masks, last refresh
};

/// Non-overlapping clips of `frames` frames (a trailing remainder is dropped).
inline std::vector<Clip> tile_clips(const Clip& video, std::size_t frames) {
  std::vector<Clip> out;
  for (std::size_t f = 0; f + frames <= video.geometry.frames; f += frames) out.push_back(video.frames(f, frames));
  return out;
}

namespace detail {

struct PairPool {
  // pairs[v] holds the valid pairs of video v.
  std::vector<std::vector<PseudoPair>> pairs;
  [[nodiscard]] bool empty() const {
    return std::all_of(pairs.begin(), pairs.end(), [](const auto& p) { return p.empty(); });
  }
};

inline double max_abs_teacher(const ModelParams& p) {
  double m = 0.0;
  p.for_each([&](const std::string&, const Tensor& t) {
    for (float v : t.data()) m = std::max(m, static_cast<double>(std::abs(v)));
  });
  return m;
}

inline double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  double m = 0.0;
  auto& ma = const_cast<ModelParams&>(a);
  auto& mb = const_cast<ModelParams&>(b);
  auto ta = ma.tensors();
  auto tb = mb.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    for (std::size_t k = 0; k < ta[i]->numel(); ++k)
      m = std::max(m, std::abs(static_cast<double>((*ta[i])[k]) - (*tb[i])[k]));
  return m;
}

}  // namespace detail

/// Joint self-training over unlabeled rain and clear videos, starting at
/// `start_step` (for resumption) and running until cfg.steps. Pseudo pairs
/// are rebuilt from the current teacher every cfg.refresh steps and on entry.
/// Every random draw is keyed by (cfg.seed, step), so a resumed run sees the
/// same stream as an uninterrupted one.
inline SelfTrainStats selftrain_loop(TeacherStudent& ts, const std::vector<RainVideo>& rain_videos,
                                     const std::vector<ClearVideo>& clear_videos, const SelfTrainConfig& cfg,
                                     const NoiseSchedule& sched, AdamState& adam, std::size_t start_step = 0,
                                     const std::function<void(std::size_t, Branch, double)>& on_step = {}) {
  if (rain_videos.empty() && clear_videos.empty()) throw ConfigError("self-training needs rain or clear videos");
  if (cfg.samples == 0 || cfg.refresh == 0 || cfg.videos_per_step == 0 || cfg.clips_per_video == 0)
    throw ConfigError("self-training counts must be positive");
  if (cfg.rain_ratio + cfg.correction_ratio == 0) throw ConfigError("branch ratio must not be 0:0");

  const ClipGeometry clip_geom = ts.teacher.config.clip;
  std::vector<std::vector<Clip>> rain_tiles, clear_tiles;
  for (const auto& v : rain_videos) rain_tiles.push_back(tile_clips(v.rain, clip_geom.frames));
  for (const auto& v : clear_videos) clear_tiles.push_back(tile_clips(v.clear, clip_geom.frames));
  for (const auto& tiles : rain_tiles)
    for (const auto& c : tiles)
      if (c.geometry != clip_geom) throw DimensionError("rain clip geometry " + to_string(c.geometry) + " does not match the model");
  for (const auto& tiles : clear_tiles)
    for (const auto& c : tiles)
      if (c.geometry != clip_geom) throw DimensionError("clear clip geometry " + to_string(c.geometry) + " does not match the model");

  const CounterRng root(cfg.seed);
  SelfTrainStats stats;
  detail::PairPool rain_pool, clear_pool;

  auto draw = [&](const Clip& cond, std::uint64_t seed) {
    return sample(noise_estimator(ts.teacher), cond, SamplerConfig{cfg.sampler_steps, seed}, sched);
  };

  auto refresh = [&](std::size_t step) {
    const CounterRng round_rng = root.split(0x5EED).split(step);
    rain_pool.pairs.assign(rain_tiles.size(), {});
    clear_pool.pairs.assign(clear_tiles.size(), {});
    double fraction_sum = 0.0;
    std::size_t fraction_count = 0;
    // Flatten tiles so the teacher draws run in parallel over every clip.
    struct Job {
      bool rain;
      std::size_t video, tile;
    };
    std::vector<Job> jobs;
    for (std::size_t v = 0; v < rain_tiles.size(); ++v)
      for (std::size_t k = 0; k < rain_tiles[v].size(); ++k) jobs.push_back({true, v, k});
    for (std::size_t v = 0; v < clear_tiles.size(); ++v)
      for (std::size_t k = 0; k < clear_tiles[v].size(); ++k) jobs.push_back({false, v, k});
    std::vector<std::optional<PseudoPair>> built(jobs.size());
    std::vector<double> fractions(jobs.size(), -1.0);
    std::vector<int> monotone_bad(jobs.size(), 0);
    parallel_for(jobs.size(), [&](std::size_t j) {
      const Job& job = jobs[j];
      CounterRng job_rng = round_rng.split(j);
      if (job.rain) {
        const Clip& clip = rain_tiles[job.video][job.tile];
        std::vector<std::uint64_t> seeds(cfg.samples);
        for (auto& s : seeds) s = job_rng.next_u64();
        const ConfidenceMap conf = confidence_sample(draw, clip, seeds, 1);
        const BinaryMask mask = binarize_confidence(conf.variance, cfg.t_u);
        if (cfg.check_invariants) {
          const BinaryMask looser = binarize_confidence(conf.variance, cfg.t_u * 2.0f);
          for (std::size_t i = 0; i < mask.map.values.size(); ++i)
            if (mask.map.values[i] > looser.map.values[i]) monotone_bad[j] = 1;
        }
        fractions[j] = mask.fraction();
        if (!mask.degenerate()) built[j] = build_rain_pair(clip, conf.mean, mask);
      } else {
        const Clip& clip = clear_tiles[job.video][job.tile];
        const std::uint64_t seed = job_rng.next_u64();
        built[j] = build_correction_pair([&](const Clip& c) { return draw(c, seed); }, clip, cfg.t_d,
                                         cfg.correction_condition);
      }
    });
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      if (fractions[j] >= 0.0) {
        fraction_sum += fractions[j];
        ++fraction_count;
      }
      stats.mask_monotonicity_violations += static_cast<std::size_t>(monotone_bad[j]);
      if (!built[j]) {
        ++stats.degenerate_pairs;
        continue;
      }
      auto& pool = jobs[j].rain ? rain_pool : clear_pool;
      pool.pairs[jobs[j].video].push_back(std::move(*built[j]));
    }
    stats.mean_mask_fraction = fraction_count ? fraction_sum / static_cast<double>(fraction_count) : 0.0;
    ++stats.refreshes;
  };

  const std::size_t cycle = cfg.rain_ratio + cfg.correction_ratio;
  for (std::size_t step = start_step; step < cfg.steps; ++step) {
    if (step == start_step || step % cfg.refresh == 0) refresh(step);
    Branch branch = (step % cycle) < cfg.rain_ratio ? Branch::rain_removal : Branch::correction;
    const detail::PairPool* pool = branch == Branch::rain_removal ? &rain_pool : &clear_pool;
    if (pool->empty()) {
      branch = branch == Branch::rain_removal ? Branch::correction : Branch::rain_removal;
      pool = branch == Branch::rain_removal ? &rain_pool : &clear_pool;
    }
    if (pool->empty()) {
      ++stats.skipped_steps;
      continue;
    }
    CounterRng step_rng = root.split(step);
    std::vector<std::size_t> usable;
    for (std::size_t v = 0; v < pool->pairs.size(); ++v)
      if (!pool->pairs[v].empty()) usable.push_back(v);
    std::vector<const PseudoPair*> batch;
    for (std::size_t p = 0; p < cfg.videos_per_step; ++p) {
      const auto& video = pool->pairs[usable[step_rng.below(usable.size())]];
      for (std::size_t k = 0; k < cfg.clips_per_video; ++k) batch.push_back(&video[step_rng.below(video.size())]);
    }

    std::optional<ModelParams> before;
    double gap_bound = 0.0;
    if (cfg.check_invariants) before = ts.teacher.clone();
    const double loss = selftrain_batch(ts, batch, sched, step_rng, adam, cfg.augment);
    if (cfg.check_invariants) {
      // ||teacher_after - teacher_before|| <= (1 - decay) ||student - teacher_before||
      ModelParams& tb = *before;
      double gap = 0.0;
      auto tt = tb.tensors();
      auto st = ts.student.tensors();
      for (std::size_t i = 0; i < tt.size(); ++i)
        for (std::size_t k = 0; k < tt[i]->numel(); ++k)
          gap = std::max(gap, std::abs(static_cast<double>((*st[i])[k]) - (*tt[i])[k]));
      gap_bound = (1.0 - ts.ema_decay) * gap;
      const double slack = 4.0 * std::numeric_limits<float>::epsilon() * std::max(1.0, detail::max_abs_teacher(tb));
      if (detail::max_abs_diff(ts.teacher, tb) > gap_bound + slack) ++stats.ema_bound_violations;
    }
    stats.losses.push_back(loss);
    ++stats.steps_run;
    (branch == Branch::rain_removal ? stats.rain_steps : stats.correction_steps)++;
    if (on_step) on_step(step, branch, loss);
  }
  return stats;
}

}  // namespace nightrain
