#include "masa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"
#include "masa/errors.hpp"

namespace masa {

namespace {

using json = nlohmann::json;

constexpr char kTagConf[4] = {'C', 'O', 'N', 'F'};
constexpr char kTagMeta[4] = {'M', 'E', 'T', 'A'};
constexpr char kTagTens[4] = {'T', 'E', 'N', 'S'};
constexpr char kTagLoss[4] = {'L', 'O', 'S', 'S'};
constexpr char kTagTraj[4] = {'T', 'R', 'A', 'J'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    auto s = take(n);
    return {s.begin(), s.end()};
  }
  [[nodiscard]] bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void record(Writer& w, const char (&tag)[4], const std::vector<std::uint8_t>& payload) {
  w.bytes(tag, 4);
  w.u64(payload.size());
  w.bytes(payload.data(), payload.size());
}

json denoiser_json(const DenoiserConfig& c) {
  return json{{"image_size", c.image_size},
              {"in_channels", c.in_channels},
              {"base_channels", c.base_channels},
              {"channel_multipliers", c.channel_multipliers},
              {"attention_resolutions", c.attention_resolutions},
              {"heads", c.heads},
              {"head_dim", c.head_dim},
              {"vocab_size", c.vocab_size},
              {"token_embed_dim", c.token_embed_dim},
              {"max_tokens", c.max_tokens},
              {"groups", c.groups},
              {"time_embed_dim", c.time_embed_dim}};
}

json schedule_json(const ScheduleParams& p) {
  return json{{"num_timesteps", p.num_timesteps},
              {"beta_start", p.beta_start},
              {"beta_end", p.beta_end},
              {"kind", to_string(p.kind)}};
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) throw ConfigError(std::string(what) + ": unknown field '" + k + "'");
  }
}

DenoiserConfig denoiser_from(const json& j) {
  if (!j.is_object()) throw ConfigError("denoiser config must be an object");
  reject_unknown(j,
                 {"image_size", "in_channels", "base_channels", "channel_multipliers", "attention_resolutions", "heads",
                  "head_dim", "vocab_size", "token_embed_dim", "max_tokens", "groups", "time_embed_dim"},
                 "denoiser config");
  DenoiserConfig c;
  read_field(j, "image_size", c.image_size);
  read_field(j, "in_channels", c.in_channels);
  read_field(j, "base_channels", c.base_channels);
  read_field(j, "channel_multipliers", c.channel_multipliers);
  read_field(j, "attention_resolutions", c.attention_resolutions);
  read_field(j, "heads", c.heads);
  read_field(j, "head_dim", c.head_dim);
  read_field(j, "vocab_size", c.vocab_size);
  read_field(j, "token_embed_dim", c.token_embed_dim);
  read_field(j, "max_tokens", c.max_tokens);
  read_field(j, "groups", c.groups);
  read_field(j, "time_embed_dim", c.time_embed_dim);
  c.validate();
  return c;
}

ScheduleParams schedule_from(const json& j) {
  if (!j.is_object()) throw ConfigError("schedule params must be an object");
  reject_unknown(j, {"num_timesteps", "beta_start", "beta_end", "kind"}, "schedule params");
  ScheduleParams p;
  read_field(j, "num_timesteps", p.num_timesteps);
  read_field(j, "beta_start", p.beta_start);
  read_field(j, "beta_end", p.beta_end);
  std::string kind = to_string(p.kind);
  read_field(j, "kind", kind);
  p.kind = beta_kind_from_string(kind);
  (void)NoiseSchedule::make(p);  // validates
  return p;
}

json parse_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

std::vector<std::uint8_t> as_bytes(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::string denoiser_config_to_json(const DenoiserConfig& c) { return denoiser_json(c).dump(); }
DenoiserConfig denoiser_config_from_json(const std::string& text) {
  return denoiser_from(parse_json(text, "denoiser config"));
}
std::string schedule_params_to_json(const ScheduleParams& p) { return schedule_json(p).dump(); }
ScheduleParams schedule_params_from_json(const std::string& text) {
  return schedule_from(parse_json(text, "schedule params"));
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  const std::size_t count = 2 + ck.tensors.size() + (ck.losses.empty() ? 0 : 1) + ck.trajectories.size();
  w.u32(static_cast<std::uint32_t>(count));

  const json conf{{"denoiser", denoiser_json(ck.denoiser)}, {"schedule", schedule_json(ck.schedule)}};
  record(w, kTagConf, as_bytes(conf.dump()));
  record(w, kTagMeta, as_bytes(ck.meta_json));

  for (const auto& t : ck.tensors) {
    std::size_t n = 1;
    for (auto d : t.dims) n *= d;
    MASA_EXPECTS(n == t.values.size(), "tensor '" + t.name + "' dims do not match its value count");
    Writer p;
    p.str(t.name);
    p.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) p.u32(d);
    for (float v : t.values) p.f32(v);
    record(w, kTagTens, p.data());
  }
  if (!ck.losses.empty()) {
    Writer p;
    p.u64(ck.losses.size());
    for (const auto& l : ck.losses) {
      p.u64(l.step);
      p.f32(l.loss);
    }
    record(w, kTagLoss, p.data());
  }
  for (const auto& tr : ck.trajectories) {
    Writer p;
    p.str(tr.label);
    p.u32(static_cast<std::uint32_t>(tr.entries.size()));
    for (const auto& e : tr.entries) {
      p.i32(e.step_index);
      p.i32(e.timestep.is_boundary() ? -1 : e.timestep.index());
      const Shape4& s = e.latent.shape();
      for (int d : {s.batch, s.channels, s.height, s.width}) p.u32(static_cast<std::uint32_t>(d));
      for (float v : e.latent.values()) p.f32(v);
    }
    record(w, kTagTraj, p.data());
  }
  return std::move(w.data());
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) throw FormatError("not a MASA1 container");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("unsupported container version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  Checkpoint ck;
  bool have_conf = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto tag = r.take(4);
    const std::uint64_t len = r.u64();
    r.need(len);
    Reader p(r.take(static_cast<std::size_t>(len)));
    const std::string tag_s(tag.begin(), tag.end());
    try {
      if (tag_s == "CONF") {
        auto payload = p.take(static_cast<std::size_t>(len));
        const json conf = json::parse(payload.begin(), payload.end());
        ck.denoiser = denoiser_from(conf.at("denoiser"));
        ck.schedule = schedule_from(conf.at("schedule"));
        have_conf = true;
      } else if (tag_s == "META") {
        auto payload = p.take(static_cast<std::size_t>(len));
        ck.meta_json.assign(payload.begin(), payload.end());
      } else if (tag_s == "TENS") {
        NamedTensor t;
        t.name = p.str();
        const std::uint32_t nd = p.u32();
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < nd; ++d) {
          t.dims.push_back(p.u32());
          n *= t.dims.back();
        }
        p.need(n * 4);
        t.values.resize(n);
        for (auto& v : t.values) v = p.f32();
        ck.tensors.push_back(std::move(t));
      } else if (tag_s == "LOSS") {
        const std::uint64_t n = p.u64();
        p.need(n * 12);
        ck.losses.resize(static_cast<std::size_t>(n));
        for (auto& l : ck.losses) {
          l.step = p.u64();
          l.loss = p.f32();
        }
      } else if (tag_s == "TRAJ") {
        Trajectory tr;
        tr.label = p.str();
        const std::uint32_t n = p.u32();
        for (std::uint32_t k = 0; k < n; ++k) {
          TrajectoryEntry e;
          e.step_index = p.i32();
          const int t = p.i32();
          e.timestep = t < 0 ? Timestep::boundary() : Timestep(t);
          Shape4 s;
          s.batch = static_cast<int>(p.u32());
          s.channels = static_cast<int>(p.u32());
          s.height = static_cast<int>(p.u32());
          s.width = static_cast<int>(p.u32());
          p.need(s.size() * 4);
          e.latent = Latent(s);
          for (std::size_t j = 0; j < s.size(); ++j) e.latent[j] = p.f32();
          tr.entries.push_back(std::move(e));
        }
        ck.trajectories.push_back(std::move(tr));
      } else {
        throw FormatError("unknown record tag '" + tag_s + "'");
      }
    } catch (const json::exception& e) {
      throw FormatError(std::string("bad CONF record: ") + e.what());
    } catch (const ConfigError& e) {
      throw FormatError(std::string("bad CONF record: ") + e.what());
    }
    if (!p.done()) throw FormatError("record '" + tag_s + "' has trailing bytes");
  }
  if (!r.done()) throw FormatError("trailing bytes after last record");
  if (!have_conf) throw FormatError("container has no CONF record");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

void store_parameters(Checkpoint& ck, const Denoiser<float>& model, std::string_view prefix) {
  model.visit_parameters([&](const nn::Param<float>& p) {
    NamedTensor t;
    t.name = std::string(prefix) + p.name;
    t.dims = {static_cast<std::uint32_t>(p.value.rows()), static_cast<std::uint32_t>(p.value.cols())};
    t.values.resize(static_cast<std::size_t>(p.value.size()));
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) t.values[k++] = p.value(i, j);
    }
    ck.tensors.push_back(std::move(t));
  });
}

void load_parameters(const Checkpoint& ck, Denoiser<float>& model, std::string_view prefix) {
  std::map<std::string_view, const NamedTensor*> index;
  for (const auto& t : ck.tensors) index.emplace(t.name, &t);
  model.visit_parameters([&](nn::Param<float>& p) {
    const std::string name = std::string(prefix) + p.name;
    const auto it = index.find(name);
    if (it == index.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
    const NamedTensor& t = *it->second;
    if (t.dims.size() != 2 || t.dims[0] != p.value.rows() || t.dims[1] != p.value.cols()) {
      throw FormatError("parameter '" + name + "' has the wrong shape");
    }
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) p.value(i, j) = t.values[k++];
    }
  });
}

Denoiser<float> load_denoiser(const Checkpoint& ck, bool prefer_ema) {
  auto model = Denoiser<float>::build(ck.denoiser, 0);
  std::string_view prefix;
  if (prefer_ema) {
    bool has_ema = false;
    for (const auto& t : ck.tensors) has_ema = has_ema || t.name.starts_with(kEmaPrefix);
    if (has_ema) prefix = kEmaPrefix;
  }
  load_parameters(ck, model, prefix);
  return model;
}

Checkpoint trajectory_container(const DenoiserConfig& denoiser, const ScheduleParams& schedule,
                                std::vector<Trajectory> trajectories, std::string meta_json) {
  Checkpoint ck;
  ck.denoiser = denoiser;
  ck.schedule = schedule;
  ck.meta_json = std::move(meta_json);
  ck.trajectories = std::move(trajectories);
  return ck;
}

}  // namespace masa
