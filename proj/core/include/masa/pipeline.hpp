#pragma once

// Guided DDIM sampling, DDIM inversion and the dual-branch MasaCtrl edit loop.

#include <cstdint>
#include <optional>
#include <vector>

#include "masa/attention_control.hpp"
#include "masa/checkpoint.hpp"
#include "masa/denoiser.hpp"
#include "masa/image.hpp"
#include "masa/schedule.hpp"

namespace masa {

struct SamplerConfig {
  int steps = 50;
  double guidance = 7.5;  // w; 1 disables the unconditional pass
  double clip_x0 = 1.0;   // bound on the predicted clean sample per step; 0 disables
  friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;
};

// eps_uncond + w * (eps_cond - eps_uncond)
template <typename T>
Tensor<T> cfg_noise(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double w);

// Pixel-space seam standing in for a latent autoencoder: identity up to the
// [0,1] <-> [-1,1] affine map.
Latent encode_image(const Image& image);
Image decode_latent(const Latent& z, int batch_index = 0);

// Bundles a model with its schedule and the unconditional prompt.
class Sampler {
 public:
  Sampler(const Denoiser<float>& model, const ScheduleParams& schedule);

  [[nodiscard]] const Denoiser<float>& model() const { return *model_; }
  [[nodiscard]] const NoiseSchedule& schedule() const { return schedule_; }
  [[nodiscard]] PromptTokens null_prompt() const;
  // Descending timesteps of a steps-long sampling run.
  [[nodiscard]] std::vector<int> timesteps(int steps) const;

  // Guided noise prediction for one branch at step_index. The unconditional
  // item comes first in the batch handed to the controller.
  [[nodiscard]] Latent guided_eps(const Latent& z, int timestep, const PromptTokens& prompt, double w,
                                  int step_index, AttentionController<float>* controller,
                                  const SpatialCondition<float>* condition) const;

  // Standard Gaussian of the model's image shape.
  [[nodiscard]] Latent initial_noise(std::uint64_t seed) const;

 private:
  const Denoiser<float>* model_;
  NoiseSchedule schedule_;
};

struct SynthesisResult {
  Image image;
  Latent z0;
  Trajectory trajectory;
};

// Deterministic guided DDIM sampling from z_T.
SynthesisResult sample_from(const Sampler& sampler, const Latent& z_T, const PromptTokens& prompt,
                            const SamplerConfig& cfg, AttentionController<float>* controller = nullptr,
                            const SpatialCondition<float>* condition = nullptr);
SynthesisResult synthesize(const Sampler& sampler, const PromptTokens& prompt, std::uint64_t seed,
                           const SamplerConfig& cfg, const SpatialCondition<float>* condition = nullptr);

struct InversionResult {
  Latent z_T;
  Trajectory trajectory;  // timesteps increasing, starting at the clean image
};

// DDIM inversion with guidance 1 along the mirrored timestep sequence.
InversionResult invert(const Sampler& sampler, const Image& image, const PromptTokens& prompt, int steps);

struct EditRequest {
  std::optional<std::uint64_t> seed;  // synthetic source ...
  std::optional<Image> image;         // ... or a real image, inverted first
  PromptTokens source_prompt;
  PromptTokens target_prompt;
  SamplerConfig sampler;
  ControlConfig control;
  // Added to the target branch only.
  std::optional<SpatialCondition<float>> target_condition;
};

struct EditResult {
  Image source;
  Image target;
  Trajectory source_trajectory;
  Trajectory target_trajectory;
  std::optional<Trajectory> inversion_trajectory;
  ControlStats stats;
  // Masks used at each controlled step when mask guidance is on.
  std::vector<std::pair<ForegroundMask, ForegroundMask>> masks;
};

// Dual-branch edit: per step the source branch runs with recording, then the
// target branch runs with mutual self-attention on that step's record.
EditResult masactrl_edit(const Sampler& sampler, const EditRequest& req);

// Constants quoted for a 50-step, 16-layer backbone, mapped onto a toy run.
int map_reference_step(int reference_step, int steps);
// Piecewise linear: [0, 10] onto [0, decoder_start], [10, 16] onto [decoder_start, num_layers].
int map_reference_layer(int reference_layer, int decoder_start, int num_layers);
ControlConfig default_control(const Denoiser<float>& model, int steps);    // reference S=4, L=10
ControlConfig condition_control(const Denoiser<float>& model, int steps);  // reference S=2, L=8

// Injects precomputed condition maps into the target branch and switches the
// gate to condition_control unless keep_control. Throws ConfigError when a map
// does not match an encoder resolution of the model.
EditRequest apply_condition(const EditRequest& req, SpatialCondition<float> condition, const Denoiser<float>& model,
                            bool keep_control = false);

}  // namespace masa
