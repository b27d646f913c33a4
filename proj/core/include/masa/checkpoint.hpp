#pragma once

// Versioned binary container for model weights, training state, loss history
// and latent trajectories. Layout is documented in docs/checkpoint_format.md.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "masa/denoiser.hpp"
#include "masa/schedule.hpp"
#include "masa/tensor.hpp"

namespace masa {

inline constexpr std::string_view kCheckpointMagic = "MASA1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;  // row-major
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct LossPoint {
  std::uint64_t step = 0;
  float loss = 0.0f;
  friend bool operator==(const LossPoint&, const LossPoint&) = default;
};

struct TrajectoryEntry {
  int step_index = 0;
  Timestep timestep = Timestep::boundary();
  Latent latent;
  friend bool operator==(const TrajectoryEntry&, const TrajectoryEntry&) = default;
};

// Latent history of one branch in execution order.
struct Trajectory {
  std::string label;
  std::vector<TrajectoryEntry> entries;
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Checkpoint {
  DenoiserConfig denoiser;
  ScheduleParams schedule;
  std::string meta_json = "{}";  // free-form metadata, stored verbatim
  std::vector<NamedTensor> tensors;
  std::vector<LossPoint> losses;
  std::vector<Trajectory> trajectories;

  [[nodiscard]] const NamedTensor* find(std::string_view name) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
// Throws FormatError on a malformed or unsupported container.
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

// Writes through a temporary file and renames, so readers never see a partial file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string denoiser_config_to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const std::string& text);  // ConfigError on bad input
std::string schedule_params_to_json(const ScheduleParams& p);
ScheduleParams schedule_params_from_json(const std::string& text);

// Parameter tensors are stored under prefix + Param::name.
inline constexpr std::string_view kEmaPrefix = "ema/";
void store_parameters(Checkpoint& ck, const Denoiser<float>& model, std::string_view prefix = {});
// Throws FormatError when a parameter is missing or has the wrong shape.
void load_parameters(const Checkpoint& ck, Denoiser<float>& model, std::string_view prefix = {});
// Builds the model described by the checkpoint; EMA weights win when present and requested.
Denoiser<float> load_denoiser(const Checkpoint& ck, bool prefer_ema = true);

// Trajectory-only container (with the model config of the run that produced it).
Checkpoint trajectory_container(const DenoiserConfig& denoiser, const ScheduleParams& schedule,
                                std::vector<Trajectory> trajectories, std::string meta_json = "{}");

}  // namespace masa
