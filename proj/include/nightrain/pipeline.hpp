#pragma once

// The five pipeline commands: synth, pretrain, selftrain, derain, eval.
// Every output is a pure function of (config, checkpoint, input bytes, seed).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nightrain/checkpoint.hpp"
#include "nightrain/config.hpp"
#include "nightrain/data_synth.hpp"
#include "nightrain/diffusion.hpp"
#include "nightrain/frame_io.hpp"
#include "nightrain/metrics.hpp"
#include "nightrain/noise_net.hpp"
#include "nightrain/self_training.hpp"

namespace nightrain {

namespace fs = std::filesystem;

/// A fresh, zero-step checkpoint for `cfg`.
inline Checkpoint initial_checkpoint(const Config& cfg) {
  Checkpoint ck;
  ck.stage = Stage::init;
  ck.config = cfg;
  ck.schedule = cfg.make_noise_schedule();
  ck.student = init_params(cfg.model, mix64(cfg.seed ^ 0x1A17ull));
  ck.teacher = ck.student.clone();
  ck.teacher.set_requires_grad(false);
  ck.adam = AdamState(cfg.optimizer);
  return ck;
}

// ---------------------------------------------------------------------------
// synth

inline Manifest run_synth(const Config& cfg) { return make_dataset(cfg.dataset_spec()); }

// ---------------------------------------------------------------------------
// pretrain

struct PretrainOptions {
  fs::path checkpoint_out;                // periodic and final checkpoints
  std::optional<Checkpoint> resume;       // continue from this state
  std::ostream* log = nullptr;
  std::function<void(std::size_t, double)> on_step;  // (step, loss)
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;  // one per step run
};

/// Clean/rain clip drawn from a paired video at a random frame offset.
struct TrainingClip {
  Clip clean;
  Clip rain;
};

inline TrainingClip random_clip(const PairedVideo& v, std::size_t frames, CounterRng& rng) {
  const std::size_t n = v.clean.geometry.frames;
  if (n < frames) throw DataError("video " + v.id + " is shorter than one clip");
  const std::size_t off = static_cast<std::size_t>(rng.below(n - frames + 1));
  return {v.clean.frames(off, frames), v.rain.frames(off, frames)};
}

namespace detail {

inline void dump_nonfinite(const fs::path& ck_path, std::size_t step, const Tensor& x0, const Tensor& cond,
                           const Tensor& eps, std::size_t t) {
  const fs::path path = ck_path.string() + ".nonfinite.dump";
  std::ofstream os(path, std::ios::binary);
  if (!os) return;
  os << "step " << step << " t " << t << '\n';
  write_dump(os, x0);
  write_dump(os, cond);
  write_dump(os, eps);
}

}  // namespace detail

/// Supervised training on the paired split: P x K random clips per step,
/// random t and noise, all-ones mask, one Adam update.
inline PretrainResult pretrain(const Config& cfg, const std::vector<PairedVideo>& videos, PretrainOptions opts = {}) {
  if (videos.empty()) throw DataError("pretraining needs at least one paired video");
  Checkpoint ck = opts.resume ? std::move(*opts.resume) : initial_checkpoint(cfg);
  if (!(ck.config.model == cfg.model)) throw ConfigError("resume checkpoint geometry differs from the configuration");
  if (ck.stage == Stage::selftrain) throw ConfigError("cannot resume pretraining from a self-training checkpoint");
  ck.config = cfg;
  ck.student.set_requires_grad(true);
  const NoiseSchedule& sched = ck.schedule;
  const ClipGeometry g = cfg.model.clip;
  for (const auto& v : videos)
    if (v.clean.geometry.height != g.height || v.clean.geometry.width != g.width)
      throw DimensionError("video " + v.id + " (" + to_string(v.clean.geometry) + ") does not match model clips " +
                           to_string(g));

  const CounterRng root = CounterRng(cfg.seed).split(0x9E7A);
  const std::size_t batch = cfg.pretrain.videos_per_step * cfg.pretrain.clips_per_video;
  const float inv_batch = 1.0f / static_cast<float>(batch);
  PretrainResult result;
  double window = 0.0;
  std::size_t window_n = 0;

  for (std::size_t step = ck.global_step; step < cfg.pretrain.steps; ++step) {
    CounterRng rng = root.split(step);
    ck.student.zero_grad();
    double total = 0.0;
    for (std::size_t p = 0; p < cfg.pretrain.videos_per_step; ++p) {
      const PairedVideo& v = videos[rng.below(videos.size())];
      for (std::size_t k = 0; k < cfg.pretrain.clips_per_video; ++k) {
        const TrainingClip clip = random_clip(v, g.frames, rng);
        const std::size_t t = 1 + static_cast<std::size_t>(rng.below(sched.steps));
        const Tensor eps = Clip::gaussian(g, rng).tensor();
        const Tensor x0 = clip.clean.tensor(), cond = clip.rain.tensor();
        const Tensor loss = training_loss(noise_estimator(ck.student), x0, cond, t, eps, std::nullopt, sched);
        if (!loss.all_finite()) {
          detail::dump_nonfinite(opts.checkpoint_out.empty() ? fs::path("pretrain") : opts.checkpoint_out, step, x0,
                                 cond, eps, t);
          throw NumericalError("pretraining loss became non-finite at step " + std::to_string(step));
        }
        total += loss.item();
        backward(scale(loss, inv_batch));
      }
    }
    adam_step(ck.student.tensors(), ck.adam);
    ck.student.zero_grad();
    ck.global_step = step + 1;
    ck.stage = Stage::pretrain;
    const double loss = total / static_cast<double>(batch);
    result.losses.push_back(loss);
    window += loss;
    ++window_n;
    if (opts.on_step) opts.on_step(step, loss);
    if (opts.log && ck.global_step % cfg.pretrain.log_every == 0) {
      *opts.log << "pretrain step " << ck.global_step << " loss " << std::fixed << std::setprecision(5)
                << window / static_cast<double>(window_n) << std::endl;
      window = 0.0;
      window_n = 0;
    }
    if (!opts.checkpoint_out.empty() && ck.global_step % cfg.pretrain.checkpoint_every == 0 &&
        ck.global_step < cfg.pretrain.steps) {
      ck.teacher = ck.student.clone();
      save_checkpoint(opts.checkpoint_out, ck);
    }
  }
  ck.stage = Stage::pretrain;
  ck.teacher = ck.student.clone();
  ck.teacher.set_requires_grad(false);
  if (!opts.checkpoint_out.empty()) save_checkpoint(opts.checkpoint_out, ck);
  result.checkpoint = std::move(ck);
  return result;
}

// ---------------------------------------------------------------------------
// selftrain

struct SelftrainOptions {
  fs::path checkpoint_out;  // written at every refresh boundary and at the end
  std::ostream* log = nullptr;
  bool check_invariants = false;
  std::function<void(std::size_t, Branch, double)> on_step;
};

struct SelftrainResult {
  Checkpoint checkpoint;
  SelfTrainStats stats;
};

/// Self-training from a pretrain checkpoint (fresh optimizer, step 0) or
/// continuation of a self-training checkpoint. The loop runs in chunks that
/// end on refresh boundaries so every saved state resumes exactly.
inline SelftrainResult selftrain(const Config& cfg, Checkpoint ck, const std::vector<RainVideo>& rain,
                                 const std::vector<ClearVideo>& clear, SelftrainOptions opts = {}) {
  if (!(ck.config.model == cfg.model)) throw ConfigError("checkpoint geometry differs from the configuration");
  if (ck.stage == Stage::init) throw ConfigError("self-training needs a pretrained checkpoint");
  TeacherStudent ts;
  AdamState adam(cfg.optimizer);
  std::size_t start = 0;
  if (ck.stage == Stage::pretrain) {
    ts = TeacherStudent(ck.student, cfg.ema_decay);
  } else {
    ts.teacher = std::move(ck.teacher);
    ts.student = std::move(ck.student);
    ts.teacher.set_requires_grad(false);
    ts.student.set_requires_grad(true);
    ts.ema_decay = cfg.ema_decay;
    adam = std::move(ck.adam);
    start = static_cast<std::size_t>(ck.global_step);
  }
  SelfTrainConfig st = cfg.selftrain_config();
  st.check_invariants = opts.check_invariants;
  const NoiseSchedule sched = ck.schedule;

  SelftrainResult result;
  auto& stats = result.stats;
  auto on_step = [&](std::size_t step, Branch b, double loss) {
    if (opts.on_step) opts.on_step(step, b, loss);
    if (opts.log && (step + 1) % cfg.pretrain.log_every == 0)
      *opts.log << "selftrain step " << step + 1 << (b == Branch::rain_removal ? " rain" : " correction")
                << " loss " << std::fixed << std::setprecision(5) << loss << std::endl;
  };
  Checkpoint out;
  out.config = cfg;
  out.schedule = sched;
  out.stage = Stage::selftrain;
  auto save = [&](std::size_t step) {
    out.global_step = step;
    out.teacher = ts.teacher.clone();
    out.student = ts.student.clone();
    out.adam = adam;
    if (!opts.checkpoint_out.empty()) save_checkpoint(opts.checkpoint_out, out);
  };

  std::size_t step = start;
  while (step < st.steps) {
    const std::size_t end = std::min(st.steps, (step / st.refresh + 1) * st.refresh);
    SelfTrainConfig chunk = st;
    chunk.steps = end;
    const SelfTrainStats s = selftrain_loop(ts, rain, clear, chunk, sched, adam, step, on_step);
    stats.steps_run += s.steps_run;
    stats.rain_steps += s.rain_steps;
    stats.correction_steps += s.correction_steps;
    stats.skipped_steps += s.skipped_steps;
    stats.refreshes += s.refreshes;
    stats.degenerate_pairs += s.degenerate_pairs;
    stats.ema_bound_violations += s.ema_bound_violations;
    stats.mask_monotonicity_violations += s.mask_monotonicity_violations;
    stats.losses.insert(stats.losses.end(), s.losses.begin(), s.losses.end());
    stats.mean_mask_fraction = s.mean_mask_fraction;
    if (opts.log)
      *opts.log << "selftrain refresh at step " << step << ": mask fraction " << std::fixed << std::setprecision(3)
                << s.mean_mask_fraction << ", degenerate pairs " << s.degenerate_pairs << std::endl;
    step = end;
    if (step < st.steps) save(step);
  }
  save(std::max(step, start));
  result.checkpoint = std::move(out);
  return result;
}

// ---------------------------------------------------------------------------
// derain

/// Derains a video of any length: non-overlapping clips of the model's frame
/// count, the last one padded by repeating its final frame. Clip i is
/// sampled from the seed stream split(i) of `seed`.
inline Clip derain_video(const ModelParams& teacher, const Clip& video, std::size_t sampler_steps,
                         const NoiseSchedule& sched, std::uint64_t seed) {
  const ClipGeometry g = teacher.config.clip;
  const auto& vg = video.geometry;
  if (vg.channels != g.channels || vg.height != g.height || vg.width != g.width)
    throw DimensionError("input " + to_string(vg) + " does not match the model clip " + to_string(g));
  if (vg.frames == 0) throw DataError("input video has no frames");
  const CounterRng root(seed);
  Clip out(vg, ClipRole::pixel);
  const std::size_t plane = vg.height * vg.width;
  for (std::size_t first = 0, tile = 0; first < vg.frames; first += g.frames, ++tile) {
    const std::size_t real = std::min(g.frames, vg.frames - first);
    Clip cond(g, ClipRole::condition);
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t t = 0; t < g.frames; ++t) {
        const std::size_t src = first + std::min(t, real - 1);
        std::copy_n(video.values.begin() + static_cast<std::ptrdiff_t>(video.index(c, src, 0, 0)), plane,
                    cond.values.begin() + static_cast<std::ptrdiff_t>(cond.index(c, t, 0, 0)));
      }
    const Clip pred =
        sample(noise_estimator(teacher), cond, SamplerConfig{sampler_steps, root.split(tile).next_u64()}, sched);
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t t = 0; t < real; ++t)
        std::copy_n(pred.values.begin() + static_cast<std::ptrdiff_t>(pred.index(c, t, 0, 0)), plane,
                    out.values.begin() + static_cast<std::ptrdiff_t>(out.index(c, first + t, 0, 0)));
  }
  return out;
}

/// Derains `in`: a folder of frames, or a folder whose subfolders (searched
/// recursively, sorted by name) hold frames. Output mirrors the input layout.
/// Returns the number of videos written.
inline std::size_t derain_dir(const Checkpoint& ck, std::size_t sampler_steps, const fs::path& in,
                              const fs::path& out, std::uint64_t seed) {
  if (!fs::is_directory(in)) throw DataError("input folder " + in.string() + " does not exist");
  if (count_frames(in) > 0) {
    save_clip(derain_video(ck.teacher, load_clip(in), sampler_steps, ck.schedule, seed), out);
    return 1;
  }
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(in))
    if (e.is_directory()) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  std::size_t n = 0;
  for (const auto& d : subdirs) n += derain_dir(ck, sampler_steps, d, out / d.filename(), seed);
  if (n == 0) throw DataError("no frames found under " + in.string());
  return n;
}

// ---------------------------------------------------------------------------
// eval

struct EvalPair {
  std::string clip_id;
  fs::path prediction;
  fs::path reference;
};

/// "clip_id<TAB>prediction_dir<TAB>reference_dir" lines; relative paths are
/// resolved against the manifest's folder. '#' lines are comments.
inline std::vector<EvalPair> read_eval_manifest(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open evaluation manifest " + file.string());
  const fs::path base = file.parent_path();
  std::vector<EvalPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    EvalPair p;
    std::string pred, ref, extra;
    if (!std::getline(row, p.clip_id, '\t') || !std::getline(row, pred, '\t') || !std::getline(row, ref, '\t') ||
        p.clip_id.empty() || pred.empty() || ref.empty())
      throw DataError(file.string() + ":" + std::to_string(lineno) + ": expected clip_id, prediction and reference");
    if (std::getline(row, extra)) throw DataError(file.string() + ":" + std::to_string(lineno) + ": too many columns");
    p.prediction = fs::path(pred).is_absolute() ? fs::path(pred) : base / pred;
    p.reference = fs::path(ref).is_absolute() ? fs::path(ref) : base / ref;
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw DataError("evaluation manifest " + file.string() + " lists no clips");
  return pairs;
}

inline MetricReport evaluate(const std::vector<EvalPair>& pairs) {
  MetricReport report;
  report.rows.resize(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    const Clip ref = load_clip(p.reference);
    const Clip pred = load_clip(p.prediction, ref.geometry.frames);
    if (pred.geometry != ref.geometry)
      throw DataError(p.clip_id + ": prediction " + to_string(pred.geometry) + " and reference " +
                      to_string(ref.geometry) + " differ");
    report.rows[i] = {p.clip_id, psnr(pred, ref), ssim(pred, ref)};
  });
  return report;
}

inline MetricReport evaluate_manifest(const fs::path& manifest, const fs::path& report_out) {
  const MetricReport report = evaluate(read_eval_manifest(manifest));
  if (!report_out.empty()) {
    if (report_out.has_parent_path()) fs::create_directories(report_out.parent_path());
    std::ofstream os(report_out);
    if (!os) throw DataError("cannot write report " + report_out.string());
    write_report(os, report);
  }
  return report;
}

}  // namespace nightrain
