#pragma once

// Versioned, fully serializable description of one CLI run.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "masa/attention_control.hpp"
#include "masa/denoiser.hpp"
#include "masa/pipeline.hpp"
#include "masa/schedule.hpp"
#include "masa/train.hpp"

namespace masa::cli {

inline constexpr int kRunConfigVersion = 1;

struct RunConfig {
  std::string command;
  DenoiserConfig model;
  ScheduleParams schedule;
  TrainConfig train;
  SamplerConfig sampler;

  // Unset gate thresholds resolve from the reference constants at run time.
  std::optional<int> start_step;
  std::optional<int> start_layer;
  bool mask = false;
  int source_token = 1;
  int target_token = 1;
  double mask_threshold = 0.35;
  bool apply_to_unconditional = true;

  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string image;
  std::string prompt;
  std::string source_prompt;
  std::string target_prompt;
  std::vector<int> sweep_start_steps;
  std::vector<int> sweep_start_layers;
  std::vector<int> steps_of_interest;
  int dataset_n = 108;
  int dataset_size = 32;
  bool resume = false;
  bool save_trajectory = false;
};

nlohmann::json to_json(const RunConfig& c);
// Missing fields keep their defaults; unknown fields and a version mismatch are ConfigErrors.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace masa::cli
