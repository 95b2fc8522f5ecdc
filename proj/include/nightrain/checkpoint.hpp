#pragma once

// Binary checkpoint: magic "NRCK", format version, stage, global step, the
// serialized config, the noise schedule, teacher and student tensors, and
// the Adam state. All numbers are little-endian; tensor payloads are f32.
//
//   tensor record := u32 name_len, name bytes, u32 ndim, u64 dims[ndim], f32 data[]

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "nightrain/adam.hpp"
#include "nightrain/config.hpp"
#include "nightrain/diffusion.hpp"
#include "nightrain/error.hpp"
#include "nightrain/noise_net.hpp"

namespace nightrain {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 4> kCheckpointMagic{'N', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Stage : std::uint32_t { init = 0, pretrain = 1, selftrain = 2 };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::init: return "init";
    case Stage::pretrain: return "pretrain";
    case Stage::selftrain: return "selftrain";
  }
  return "?";
}

struct Checkpoint {
  Stage stage = Stage::init;
  std::uint64_t global_step = 0;
  Config config;
  NoiseSchedule schedule;
  ModelParams teacher;
  ModelParams student;
  AdamState adam;
};

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(std::ostream& os) : os_(os) {}
  template <class V>
  void pod(const V& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(std::span<const float> v) {
    pod(static_cast<std::uint64_t>(v.size()));
    bytes(v.data(), v.size() * sizeof(float));
  }

 private:
  std::ostream& os_;
};

class BinReader {
 public:
  BinReader(std::istream& is, std::string where) : is_(is), where_(std::move(where)) {}
  template <class V>
  V pod() {
    V v{};
    read(&v, sizeof(V));
    return v;
  }
  void read(void* p, std::size_t n) {
    if (!is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n)))
      throw DataError(where_ + ": truncated checkpoint");
  }
  std::string str(std::size_t limit = std::size_t{1} << 24) {
    const auto n = pod<std::uint32_t>();
    if (n > limit) throw DataError(where_ + ": implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::vector<float> floats() {
    const auto n = pod<std::uint64_t>();
    if (n > (std::uint64_t{1} << 32)) throw DataError(where_ + ": implausible buffer length");
    std::vector<float> v(n);
    read(v.data(), n * sizeof(float));
    return v;
  }
  [[nodiscard]] const std::string& where() const { return where_; }

 private:
  std::istream& is_;
  std::string where_;
};

inline void write_params(BinWriter& w, const ModelParams& p) {
  std::uint32_t count = 0;
  p.for_each([&](const std::string&, const Tensor&) { ++count; });
  w.pod(count);
  p.for_each([&](const std::string& name, const Tensor& t) {
    w.str(name);
    w.pod(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.pod(static_cast<std::uint64_t>(d));
    const auto data = t.data();
    w.bytes(data.data(), data.size() * sizeof(float));
  });
}

// Reads tensors into a freshly shaped parameter set for `cfg`; names and
// shapes must match the canonical layout exactly.
inline ModelParams read_params(BinReader& r, const ModelConfig& cfg, const std::string& which) {
  ModelParams p = init_params(cfg, 0);
  std::uint32_t expected = 0;
  p.for_each([&](const std::string&, const Tensor&) { ++expected; });
  const auto count = r.pod<std::uint32_t>();
  if (count != expected)
    throw ConfigError(r.where() + ": " + which + " has " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(expected));
  p.for_each([&](const std::string& name, Tensor& t) {
    const std::string got = r.str(4096);
    if (got != name) throw ConfigError(r.where() + ": expected tensor '" + name + "', found '" + got + "'");
    const auto ndim = r.pod<std::uint32_t>();
    if (ndim > 8) throw DataError(r.where() + ": tensor '" + name + "' has implausible rank");
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
    if (shape != t.shape())
      throw ConfigError(r.where() + ": tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                        shape_str(t.shape()));
    auto data = t.data();
    r.read(data.data(), data.size() * sizeof(float));
  });
  p.set_requires_grad(true);
  return p;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  detail::BinWriter w(os);
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.pod(kCheckpointVersion);
  w.pod(static_cast<std::uint32_t>(ck.stage));
  w.pod(ck.global_step);
  w.str(to_config_text(ck.config));
  w.pod(static_cast<std::uint64_t>(ck.schedule.steps));
  w.pod(ck.schedule.beta_start);
  w.pod(ck.schedule.beta_end);
  w.bytes(ck.schedule.betas.data(), ck.schedule.betas.size() * sizeof(double));
  detail::write_params(w, ck.teacher);
  detail::write_params(w, ck.student);
  const AdamState& a = ck.adam;
  w.pod(a.config.lr);
  w.pod(a.config.beta1);
  w.pod(a.config.beta2);
  w.pod(a.config.eps);
  w.pod(a.step_count);
  w.pod(static_cast<std::uint32_t>(a.first_moment.size()));
  for (std::size_t i = 0; i < a.first_moment.size(); ++i) {
    w.floats(a.first_moment[i]);
    w.floats(a.second_moment[i]);
  }
}

/// Reads a checkpoint. When `expected` is given, the stored model geometry
/// must equal it.
inline Checkpoint read_checkpoint(std::istream& is, const std::string& where = "checkpoint",
                                  const std::optional<ModelConfig>& expected = std::nullopt) {
  detail::BinReader r(is, where);
  std::array<char, 4> magic{};
  r.read(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw ConfigError(where + ": not a NightRain checkpoint (bad magic)");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw ConfigError(where + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto stage = r.pod<std::uint32_t>();
  if (stage > static_cast<std::uint32_t>(Stage::selftrain)) throw DataError(where + ": unknown stage");
  ck.stage = static_cast<Stage>(stage);
  ck.global_step = r.pod<std::uint64_t>();
  ck.config = parse_config(r.str());
  if (expected && !(ck.config.model == *expected))
    throw ConfigError(where + ": checkpoint model geometry (" + to_string(ck.config.model.clip) + ", width " +
                      std::to_string(ck.config.model.patch.width) + ", " + std::to_string(ck.config.model.n_blocks) +
                      " blocks) does not match the configuration (" + to_string(expected->clip) + ", width " +
                      std::to_string(expected->patch.width) + ", " + std::to_string(expected->n_blocks) + " blocks)");

  const auto steps = r.pod<std::uint64_t>();
  const auto beta_start = r.pod<double>();
  const auto beta_end = r.pod<double>();
  if (steps == 0 || steps > (1u << 24)) throw DataError(where + ": implausible schedule length");
  ck.schedule = make_schedule(static_cast<std::size_t>(steps), beta_start, beta_end);
  std::vector<double> betas(ck.schedule.betas.size());
  r.read(betas.data(), betas.size() * sizeof(double));
  if (betas != ck.schedule.betas) throw DataError(where + ": stored betas disagree with the schedule parameters");

  ck.teacher = detail::read_params(r, ck.config.model, "teacher");
  ck.teacher.set_requires_grad(false);
  ck.student = detail::read_params(r, ck.config.model, "student");

  AdamState& a = ck.adam;
  a.config.lr = r.pod<float>();
  a.config.beta1 = r.pod<float>();
  a.config.beta2 = r.pod<float>();
  a.config.eps = r.pod<float>();
  a.step_count = r.pod<std::uint64_t>();
  const auto moments = r.pod<std::uint32_t>();
  std::vector<Tensor*> params = ck.student.tensors();
  if (moments != 0 && moments != params.size()) throw DataError(where + ": Adam state does not match the parameters");
  for (std::uint32_t i = 0; i < moments; ++i) {
    a.first_moment.push_back(r.floats());
    a.second_moment.push_back(r.floats());
    if (a.first_moment.back().size() != params[i]->numel() || a.second_moment.back().size() != params[i]->numel())
      throw DataError(where + ": Adam moment " + std::to_string(i) + " has the wrong length");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError(where + ": trailing bytes after checkpoint");
  return ck;
}

/// Atomic save: writes `path`.tmp and renames it over `path`.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, ck);
    os.flush();
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(is, path.string(), expected);
}

}  // namespace nightrain
