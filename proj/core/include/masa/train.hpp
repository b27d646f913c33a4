#pragma once

// Noise-regression training of the toy denoiser on procedural scenes.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "masa/checkpoint.hpp"
#include "masa/denoiser.hpp"
#include "masa/scene.hpp"
#include "masa/schedule.hpp"

namespace masa {

struct TrainConfig {
  int steps = 8000;
  int batch_size = 16;
  double learning_rate = 5e-4;
  double grad_clip = 1.0;  // global L2 norm
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_decay = 0.999;
  double cond_dropout = 0.1;   // whole prompt replaced by padding
  double token_dropout = 0.1;  // each attribute slot independently
  std::uint64_t seed = 0;      // parameter init and per-step sampling
  int dataset_size = 5400;
  std::uint64_t data_seed = 1;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

std::string train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);  // ConfigError on bad input

class Trainer {
 public:
  Trainer(const DenoiserConfig& model, const ScheduleParams& schedule, const TrainConfig& config);
  // Restores the full optimizer state written by checkpoint(). Throws FormatError when
  // the container holds no training state.
  static Trainer resume(const Checkpoint& ck);

  // One optimizer step on a batch drawn from data; returns the batch loss.
  // Throws DivergenceError when the loss or gradient is not finite.
  double step(const std::vector<DatasetSample>& data);

  [[nodiscard]] int completed_steps() const { return step_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  void set_total_steps(int steps) { config_.steps = steps; }
  [[nodiscard]] const Denoiser<float>& model() const { return model_; }
  [[nodiscard]] const Denoiser<float>& ema_model() const { return ema_; }
  [[nodiscard]] const std::vector<LossPoint>& losses() const { return losses_; }
  [[nodiscard]] const NoiseSchedule& schedule() const { return schedule_; }

  // Full training state: raw weights, EMA weights, Adam moments, loss history.
  [[nodiscard]] Checkpoint checkpoint() const;
  // EMA weights under plain parameter names plus the loss history.
  [[nodiscard]] Checkpoint inference_checkpoint() const;

 private:
  Trainer() = default;
  [[nodiscard]] std::string meta_json() const;

  TrainConfig config_;
  NoiseSchedule schedule_;
  Denoiser<float> model_;
  Denoiser<float> ema_;
  std::vector<Mat<float>> adam_m_, adam_v_;
  std::vector<LossPoint> losses_;
  int step_ = 0;
};

// Prompt used for one training sample after condition and token dropout.
PromptTokens drop_tokens(const PromptTokens& tokens, double cond_dropout, double token_dropout,
                         std::uint64_t seed);

}  // namespace masa
