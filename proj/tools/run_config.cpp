#include "run_config.hpp"

#include <fstream>
#include <set>

#include "masa/checkpoint.hpp"
#include "masa/errors.hpp"

namespace masa::cli {

using json = nlohmann::json;

namespace {

template <typename T>
void get(const json& j, const char* key, T& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config field '") + key + "': " + e.what());
  }
}

template <typename T>
void get(const json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T v{};
  get(j, key, v);
  out = v;
}

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError(where + ": unknown field '" + k + "'");
  }
}

json optional_json(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json to_json(const RunConfig& c) {
  return json{
      {"version", kRunConfigVersion},
      {"command", c.command},
      {"model", json::parse(denoiser_config_to_json(c.model))},
      {"schedule", json::parse(schedule_params_to_json(c.schedule))},
      {"train", json::parse(train_config_to_json(c.train))},
      {"sampler", {{"steps", c.sampler.steps}, {"guidance", c.sampler.guidance}, {"clip_x0", c.sampler.clip_x0}}},
      {"control",
       {{"start_step", optional_json(c.start_step)},
        {"start_layer", optional_json(c.start_layer)},
        {"mask", c.mask},
        {"source_token", c.source_token},
        {"target_token", c.target_token},
        {"mask_threshold", c.mask_threshold},
        {"apply_to_unconditional", c.apply_to_unconditional}}},
      {"seed", c.seed},
      {"inputs",
       {{"checkpoint", c.checkpoint},
        {"image", c.image},
        {"prompt", c.prompt},
        {"source_prompt", c.source_prompt},
        {"target_prompt", c.target_prompt}}},
      {"sweep", {{"start_steps", c.sweep_start_steps}, {"start_layers", c.sweep_start_layers}}},
      {"steps_of_interest", c.steps_of_interest},
      {"dataset", {{"n", c.dataset_n}, {"size", c.dataset_size}}},
      {"resume", c.resume},
      {"save_trajectory", c.save_trajectory},
  };
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j,
             {"version", "command", "model", "schedule", "train", "sampler", "control", "seed", "inputs", "sweep",
              "steps_of_interest", "dataset", "resume", "save_trajectory"},
             "run config");
  int version = kRunConfigVersion;
  get(j, "version", version);
  if (version != kRunConfigVersion) {
    throw ConfigError("run config version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kRunConfigVersion) + ")");
  }
  RunConfig c;
  get(j, "command", c.command);
  if (j.contains("model")) c.model = denoiser_config_from_json(j.at("model").dump());
  if (j.contains("schedule")) c.schedule = schedule_params_from_json(j.at("schedule").dump());
  if (j.contains("train")) c.train = train_config_from_json(j.at("train").dump());
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    check_keys(s, {"steps", "guidance", "clip_x0"}, "run config sampler");
    get(s, "steps", c.sampler.steps);
    get(s, "guidance", c.sampler.guidance);
    get(s, "clip_x0", c.sampler.clip_x0);
  }
  if (j.contains("control")) {
    const auto& s = j.at("control");
    check_keys(s,
               {"start_step", "start_layer", "mask", "source_token", "target_token", "mask_threshold",
                "apply_to_unconditional"},
               "run config control");
    get(s, "start_step", c.start_step);
    get(s, "start_layer", c.start_layer);
    get(s, "mask", c.mask);
    get(s, "source_token", c.source_token);
    get(s, "target_token", c.target_token);
    get(s, "mask_threshold", c.mask_threshold);
    get(s, "apply_to_unconditional", c.apply_to_unconditional);
  }
  get(j, "seed", c.seed);
  if (j.contains("inputs")) {
    const auto& s = j.at("inputs");
    check_keys(s, {"checkpoint", "image", "prompt", "source_prompt", "target_prompt"}, "run config inputs");
    get(s, "checkpoint", c.checkpoint);
    get(s, "image", c.image);
    get(s, "prompt", c.prompt);
    get(s, "source_prompt", c.source_prompt);
    get(s, "target_prompt", c.target_prompt);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    check_keys(s, {"start_steps", "start_layers"}, "run config sweep");
    get(s, "start_steps", c.sweep_start_steps);
    get(s, "start_layers", c.sweep_start_layers);
  }
  get(j, "steps_of_interest", c.steps_of_interest);
  if (j.contains("dataset")) {
    const auto& s = j.at("dataset");
    check_keys(s, {"n", "size"}, "run config dataset");
    get(s, "n", c.dataset_n);
    get(s, "size", c.dataset_size);
  }
  get(j, "resume", c.resume);
  get(j, "save_trajectory", c.save_trajectory);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace masa::cli
