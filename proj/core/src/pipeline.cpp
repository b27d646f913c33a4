#include "masa/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "masa/errors.hpp"

namespace masa {

template <typename T>
Tensor<T> cfg_noise(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double w) {
  expect_same_shape(eps_cond, eps_uncond, "cfg_noise");
  Tensor<T> out(eps_cond.shape());
  const T wt = static_cast<T>(w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + wt * (eps_cond[i] - eps_uncond[i]);
  return out;
}

template Tensor<float> cfg_noise(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> cfg_noise(const Tensor<double>&, const Tensor<double>&, double);

Latent encode_image(const Image& image) { return image_to_latent(image); }
Image decode_latent(const Latent& z, int batch_index) { return latent_to_image(z, batch_index); }

Sampler::Sampler(const Denoiser<float>& model, const ScheduleParams& schedule)
    : model_(&model), schedule_(NoiseSchedule::make(schedule)) {
  if (model.num_parameters() == 0) throw ContractError("sampler: the denoiser has not been built");
}

PromptTokens Sampler::null_prompt() const {
  return PromptTokens{std::vector<int>(static_cast<std::size_t>(model_->config().max_tokens), 0)};
}

std::vector<int> Sampler::timesteps(int steps) const { return sampling_timesteps(schedule_.num_timesteps(), steps); }

Latent Sampler::initial_noise(std::uint64_t seed) const {
  const auto& c = model_->config();
  return gaussian_tensor(Shape4{1, c.in_channels, c.image_size, c.image_size}, seed);
}

Latent Sampler::guided_eps(const Latent& z, int timestep, const PromptTokens& prompt, double w, int step_index,
                           AttentionController<float>* controller, const SpatialCondition<float>* condition) const {
  MASA_EXPECTS(z.shape().batch == 1, "guided_eps: expects a single latent");
  const std::vector<int> t{timestep};
  if (w == 1.0) {
    const std::vector<PromptEmbedding<float>> prompts{model_->embed_prompt(prompt)};
    if (controller) controller->begin_pass(step_index, {false});
    return model_->forward(z, t, prompts, controller, condition);
  }
  const std::vector<PromptEmbedding<float>> prompts{model_->embed_prompt(null_prompt()), model_->embed_prompt(prompt)};
  const std::vector<Latent> parts{z, z};
  if (controller) controller->begin_pass(step_index, {true, false});
  const Latent out = model_->forward(concat_batch<float>(parts), t, prompts, controller, condition);
  return cfg_noise(slice_batch(out, 1), slice_batch(out, 0), w);
}

namespace {

void check_sampler_config(const SamplerConfig& cfg) {
  if (cfg.steps < 0) throw ConfigError("sampler: steps must be non-negative");
  if (!(cfg.guidance >= 1.0)) throw ConfigError("sampler: guidance must be at least 1");
  if (!(cfg.clip_x0 >= 0.0)) throw ConfigError("sampler: clip_x0 must be non-negative");
}

Latent denoise_step(const Latent& z, const Latent& eps, Timestep t, Timestep t_prev, const NoiseSchedule& sched,
                    const SamplerConfig& cfg) {
  return cfg.clip_x0 > 0 ? ddim_step_clipped(z, eps, t, t_prev, sched, cfg.clip_x0) : ddim_step(z, eps, t, t_prev, sched);
}

Timestep next_timestep(const std::vector<int>& ts, std::size_t k) {
  return k + 1 < ts.size() ? Timestep(ts[k + 1]) : kFinalTimestep;
}

}  // namespace

SynthesisResult sample_from(const Sampler& sampler, const Latent& z_T, const PromptTokens& prompt,
                            const SamplerConfig& cfg, AttentionController<float>* controller,
                            const SpatialCondition<float>* condition) {
  check_sampler_config(cfg);
  const auto ts = sampler.timesteps(cfg.steps);
  SynthesisResult r;
  r.trajectory.label = "sample";
  Latent z = z_T;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int step = static_cast<int>(k);
    const Latent eps = sampler.guided_eps(z, ts[k], prompt, cfg.guidance, step, controller, condition);
    r.trajectory.entries.push_back({step, Timestep(ts[k]), z});
    z = denoise_step(z, eps, Timestep(ts[k]), next_timestep(ts, k), sampler.schedule(), cfg);
  }
  r.trajectory.entries.push_back({static_cast<int>(ts.size()), kFinalTimestep, z});
  r.image = decode_latent(z);
  r.z0 = std::move(z);
  return r;
}

SynthesisResult synthesize(const Sampler& sampler, const PromptTokens& prompt, std::uint64_t seed,
                           const SamplerConfig& cfg, const SpatialCondition<float>* condition) {
  return sample_from(sampler, sampler.initial_noise(seed), prompt, cfg, nullptr, condition);
}

InversionResult invert(const Sampler& sampler, const Image& image, const PromptTokens& prompt, int steps) {
  const auto& c = sampler.model().config();
  if (image.width != c.image_size || image.height != c.image_size) {
    throw ConfigError("invert: image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                      ", model expects " + std::to_string(c.image_size));
  }
  if (steps < 0) throw ConfigError("invert: steps must be non-negative");
  auto ts = sampler.timesteps(steps);
  std::reverse(ts.begin(), ts.end());
  InversionResult r;
  r.trajectory.label = "inversion";
  Latent z = encode_image(image);
  Timestep from = kInitialTimestep;
  for (std::size_t j = 0; j < ts.size(); ++j) {
    const Timestep to(ts[j]);
    const Latent eps = sampler.guided_eps(z, from.network_index(), prompt, 1.0, static_cast<int>(j), nullptr, nullptr);
    r.trajectory.entries.push_back({static_cast<int>(j), from, z});
    z = ddim_invert_step(z, eps, from, to, sampler.schedule());
    from = to;
  }
  r.trajectory.entries.push_back({static_cast<int>(ts.size()), from, z});
  r.z_T = std::move(z);
  return r;
}

EditResult masactrl_edit(const Sampler& sampler, const EditRequest& req) {
  const auto& model = sampler.model();
  if (req.seed.has_value() == req.image.has_value()) {
    throw ConfigError("edit: exactly one of seed and image must be given");
  }
  check_sampler_config(req.sampler);
  if (req.sampler.steps < 1) throw ConfigError("edit: steps must be at least 1");
  req.control.validate(model.config().max_tokens);

  EditResult r;
  Latent z_T;
  if (req.image) {
    auto inv = invert(sampler, *req.image, req.source_prompt, req.sampler.steps);
    z_T = std::move(inv.z_T);
    r.inversion_trajectory = std::move(inv.trajectory);
  } else {
    z_T = sampler.initial_noise(*req.seed);
  }

  const std::size_t num_layers = model.layer_registry().size();
  AttentionRecord<float> record;
  CrossMapStore<float> source_maps, target_maps;
  RecordingController<float> source_ctl(num_layers, &record, &source_maps);
  RecordingController<float> probe_ctl(num_layers, nullptr, &target_maps, {.record_self = false});
  MutualSelfAttentionController<float> target_ctl(num_layers, &record, req.control);
  const SpatialCondition<float>* condition = req.target_condition ? &*req.target_condition : nullptr;
  const double w = req.sampler.guidance;
  const auto& sched = sampler.schedule();

  const auto ts = sampler.timesteps(req.sampler.steps);
  Latent zs = z_T, zt = z_T;
  r.source_trajectory.label = "source";
  r.target_trajectory.label = "target";
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int step = static_cast<int>(k);
    const Timestep t(ts[k]), t_prev = next_timestep(ts, k);

    const Latent eps_s = sampler.guided_eps(zs, ts[k], req.source_prompt, w, step, &source_ctl, nullptr);
    r.source_trajectory.entries.push_back({step, t, zs});
    zs = denoise_step(zs, eps_s, t, t_prev, sched, req.sampler);

    if (req.control.mask_enabled && step >= req.control.start_step) {
      // Target probe pass: its own cross maps give the target foreground.
      (void)sampler.guided_eps(zt, ts[k], req.target_prompt, w, step, &probe_ctl, condition);
      auto ms = extract_mask(source_maps, step, req.control.source_token_index, req.control.mask_threshold);
      auto mt = extract_mask(target_maps, step, req.control.target_token_index, req.control.mask_threshold);
      r.masks.emplace_back(ms, mt);
      target_ctl.set_masks(std::move(ms), std::move(mt));
    }
    const Latent eps_t = sampler.guided_eps(zt, ts[k], req.target_prompt, w, step, &target_ctl, condition);
    r.target_trajectory.entries.push_back({step, t, zt});
    zt = denoise_step(zt, eps_t, t, t_prev, sched, req.sampler);
  }
  r.source_trajectory.entries.push_back({static_cast<int>(ts.size()), kFinalTimestep, zs});
  r.target_trajectory.entries.push_back({static_cast<int>(ts.size()), kFinalTimestep, zt});
  r.source = decode_latent(zs);
  r.target = decode_latent(zt);
  r.stats = target_ctl.stats();
  return r;
}

int map_reference_step(int reference_step, int steps) {
  return static_cast<int>(std::lround(reference_step * static_cast<double>(steps) / 50.0));
}

int map_reference_layer(int reference_layer, int decoder_start, int num_layers) {
  if (reference_layer <= 10) {
    return static_cast<int>(std::lround(reference_layer * static_cast<double>(decoder_start) / 10.0));
  }
  return static_cast<int>(
      std::lround(decoder_start + (reference_layer - 10) * static_cast<double>(num_layers - decoder_start) / 6.0));
}

namespace {

ControlConfig mapped_control(const Denoiser<float>& model, int steps, int s, int l) {
  ControlConfig c;
  c.start_step = map_reference_step(s, steps);
  c.start_layer = map_reference_layer(l, model.decoder_start(), static_cast<int>(model.layer_registry().size()));
  return c;
}

}  // namespace

ControlConfig default_control(const Denoiser<float>& model, int steps) { return mapped_control(model, steps, 4, 10); }
ControlConfig condition_control(const Denoiser<float>& model, int steps) { return mapped_control(model, steps, 2, 8); }

EditRequest apply_condition(const EditRequest& req, SpatialCondition<float> condition, const Denoiser<float>& model,
                            bool keep_control) {
  const auto& c = model.config();
  for (const auto& [res, map] : condition.maps) {
    int level = -1;
    for (int l = 0; l < c.num_levels(); ++l) {
      if (c.level_resolution(l) == res) level = l;
    }
    if (level < 0) throw ConfigError("condition map at resolution " + std::to_string(res) + " has no encoder level");
    if (map.rows() != c.level_channels(level) || map.cols() != static_cast<Eigen::Index>(res) * res) {
      throw ConfigError("condition map at resolution " + std::to_string(res) + " must be " +
                        std::to_string(c.level_channels(level)) + "x" + std::to_string(res * res));
    }
  }
  EditRequest out = req;
  out.target_condition = std::move(condition);
  if (!keep_control) {
    const ControlConfig mapped = condition_control(model, req.sampler.steps);
    out.control.start_step = mapped.start_step;
    out.control.start_layer = mapped.start_layer;
  }
  return out;
}

}  // namespace masa
