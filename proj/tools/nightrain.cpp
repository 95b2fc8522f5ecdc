// nightrain: synth | pretrain | selftrain | derain | eval
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data or dimension
// error, 3 numerical abort.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "nightrain/pipeline.hpp"

namespace {

using namespace nightrain;

struct Args {
  std::string config;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::string in;
  std::string out;
};

Config load(const Args& a) {
  Config cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  return cfg;
}

int cmd_synth(const Args& a) {
  Config cfg = load(a);
  if (!a.out.empty()) cfg.paths.data_root = a.out;
  const Manifest m = run_synth(cfg);
  std::cout << "wrote " << m.size() << " videos to " << cfg.paths.data_root.string() << '\n';
  return 0;
}

int cmd_pretrain(const Args& a) {
  Config cfg = load(a);
  if (!a.in.empty()) cfg.paths.data_root = a.in;
  const fs::path out = a.out.empty() ? cfg.paths.pretrain_checkpoint : fs::path(a.out);
  const Manifest m = read_manifest(cfg.paths.data_root / kManifestName);
  const auto videos = load_paired(cfg.paths.data_root, m, Split::paired);
  PretrainOptions opts;
  opts.checkpoint_out = out;
  opts.log = &std::cout;
  if (!a.checkpoint.empty()) opts.resume = load_checkpoint(a.checkpoint, cfg.model);
  const auto r = pretrain(cfg, videos, std::move(opts));
  std::cout << "pretrain finished at step " << r.checkpoint.global_step << ", checkpoint " << out.string() << '\n';
  return 0;
}

int cmd_selftrain(const Args& a) {
  Config cfg = load(a);
  if (!a.in.empty()) cfg.paths.data_root = a.in;
  const fs::path in_ck = a.checkpoint.empty() ? cfg.paths.pretrain_checkpoint : fs::path(a.checkpoint);
  const fs::path out = a.out.empty() ? cfg.paths.selftrain_checkpoint : fs::path(a.out);
  Checkpoint ck = load_checkpoint(in_ck, cfg.model);
  const Manifest m = read_manifest(cfg.paths.data_root / kManifestName);
  const auto rain = load_rain_only(cfg.paths.data_root, m, Split::unlabeled_rain);
  const auto clear = load_clear(cfg.paths.data_root, m, Split::clear);
  if (rain.empty()) throw DataError("split unlabeled_rain is missing or empty");
  if (clear.empty()) throw DataError("split clear is missing or empty");
  SelftrainOptions opts;
  opts.checkpoint_out = out;
  opts.log = &std::cout;
  const auto r = selftrain(cfg, std::move(ck), rain, clear, std::move(opts));
  std::cout << "selftrain finished at step " << r.checkpoint.global_step << " (" << r.stats.rain_steps
            << " rain-removal, " << r.stats.correction_steps << " correction, " << r.stats.skipped_steps
            << " skipped), checkpoint " << out.string() << '\n';
  return 0;
}

int cmd_derain(const Args& a) {
  const Config cfg = load(a);
  if (a.checkpoint.empty() || a.in.empty() || a.out.empty())
    throw UsageError("derain needs --checkpoint, --in and --out");
  const Checkpoint ck = load_checkpoint(a.checkpoint, cfg.model);
  const std::size_t n = derain_dir(ck, cfg.sampler_steps, a.in, a.out, cfg.seed);
  std::cout << "derained " << n << " video(s) into " << a.out << '\n';
  return 0;
}

int cmd_eval(const Args& a) {
  (void)load(a);
  if (a.in.empty()) throw UsageError("eval needs --in <pairs manifest>");
  const MetricReport report = evaluate_manifest(a.in, a.out);
  if (a.out.empty()) write_report(std::cout, report);
  const auto [p, s] = report.means();
  std::cerr << "mean psnr " << p << " dB, mean ssim " << s << " over " << report.rows.size() << " clips\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NightRain conditional video diffusion deraining"};
  app.require_subcommand(1);
  Args args;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--checkpoint", args.checkpoint, "input checkpoint");
    sub->add_option("--seed", args.seed, "overrides run.seed");
    sub->add_option("--in", args.in, "input folder or manifest");
    sub->add_option("--out", args.out, "output folder or file");
  };
  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset (--out overrides paths.data_root)");
  auto* pre = app.add_subcommand("pretrain", "supervised training on the paired split (--checkpoint resumes)");
  auto* self = app.add_subcommand("selftrain", "teacher-student self-training from a pretrain checkpoint");
  auto* derain = app.add_subcommand("derain", "derain a frame folder with the checkpoint's teacher");
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM report from a pairs manifest");
  for (auto* s : {synth, pre, self, derain, eval}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(args);
    if (*pre) return cmd_pretrain(args);
    if (*self) return cmd_selftrain(args);
    if (*derain) return cmd_derain(args);
    if (*eval) return cmd_eval(args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
