#include <gtest/gtest.h>

#include <random>

#include "../support/oracles.hpp"
#include "masa/errors.hpp"
#include "masa/pipeline.hpp"
#include "masa/scene.hpp"
#include "test_support.hpp"

namespace masa {
namespace {

// Random nonzero weights: outputs are meaningless but every path is exercised.
Denoiser<float> random_model(const DenoiserConfig& cfg, std::uint64_t seed = 21) {
  auto m = Denoiser<float>::build(cfg, seed);
  m.init_parameters(seed, false);
  return m;
}

class PipelineTest : public ::testing::Test {
 protected:
  DenoiserConfig cfg = test::small_config();
  Denoiser<float> model = random_model(cfg);
  Sampler sampler{model, ScheduleParams{}};
  TokenGrammar grammar{cfg.max_tokens};
  PromptTokens src = grammar.parse("red circle left on white");
  PromptTokens tgt = grammar.parse("red square right on white");
  SamplerConfig sc{6, 7.5};

  EditRequest request(int s, int l, bool mask = false) const {
    EditRequest r;
    r.seed = 5;
    r.source_prompt = src;
    r.target_prompt = tgt;
    r.sampler = sc;
    r.control.start_step = s;
    r.control.start_layer = l;
    r.control.mask_enabled = mask;
    return r;
  }

  [[nodiscard]] std::size_t self_layers_from(int l) const {
    std::size_t n = 0;
    for (const auto& info : model.layer_registry()) n += info.kind == LayerKind::self_attention && info.index >= l;
    return n;
  }
};

TEST(CfgNoise, MatchesScalarOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> uw(1.0, 12.0);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<double> c(Shape4{1, 3, 2, 2}), u(Shape4{1, 3, 2, 2});
    for (auto& x : c.values()) x = n01(rng);
    for (auto& x : u.values()) x = n01(rng);
    const double w = uw(rng);
    const auto out = cfg_noise(c, u, w);
    for (std::size_t i = 0; i < c.size(); ++i) worst = std::max(worst, oracle::rel_err(out[i], oracle::cfg(c[i], u[i], w)));
  }
  EXPECT_LT(worst, 1e-5);
  Tensor<double> c(Shape4{1, 1, 1, 2}, std::vector<double>{1, 2}), u(Shape4{1, 1, 1, 2}, std::vector<double>{3, 5});
  EXPECT_EQ(cfg_noise(c, u, 1.0), c);
}

TEST(Sampler, RequiresBuiltModel) {
  const Denoiser<float> empty;
  EXPECT_THROW(Sampler(empty, ScheduleParams{}), ContractError);
}

TEST_F(PipelineTest, GuidanceOneSkipsUnconditionalPass) {
  const auto z = sampler.initial_noise(3);
  const auto eps = sampler.guided_eps(z, 500, src, 1.0, 0, nullptr, nullptr);
  const std::vector<int> t{500};
  const std::vector<PromptEmbedding<float>> p{model.embed_prompt(src)};
  EXPECT_EQ(eps, model.forward(z, t, p));
}

TEST_F(PipelineTest, SamplingIsDeterministicAndSeedSensitive) {
  const auto a = synthesize(sampler, src, 9, sc), b = synthesize(sampler, src, 9, sc), c = synthesize(sampler, src, 10, sc);
  EXPECT_EQ(a.z0, b.z0);
  EXPECT_NE(a.z0, c.z0);
  ASSERT_EQ(a.trajectory.entries.size(), 7u);
  EXPECT_EQ(a.trajectory.entries.front().timestep, Timestep(sampler.timesteps(6).front()));
  EXPECT_TRUE(a.trajectory.entries.back().timestep.is_boundary());
}

TEST_F(PipelineTest, GateOffMatchesVanillaTargetSampling) {
  for (bool mask : {false, true}) {
    const auto res = masactrl_edit(sampler, request(sc.steps, 0, mask));
    const auto vanilla = synthesize(sampler, tgt, 5, sc);
    EXPECT_EQ(res.target.rgb, vanilla.image.rgb);
    EXPECT_EQ(res.stats.substitutions, 0u);
    EXPECT_TRUE(res.masks.empty());
  }
  const auto far = masactrl_edit(sampler, request(999, 0));
  EXPECT_EQ(far.target.rgb, synthesize(sampler, tgt, 5, sc).image.rgb);
  const auto no_layer = masactrl_edit(sampler, request(0, 999));
  EXPECT_EQ(no_layer.target.rgb, synthesize(sampler, tgt, 5, sc).image.rgb);
}

TEST_F(PipelineTest, IdenticalPromptsFullControlReproducesSource) {
  auto req = request(0, 0);
  req.target_prompt = src;
  const auto res = masactrl_edit(sampler, req);
  EXPECT_EQ(res.target.rgb, res.source.rgb);
  for (std::size_t k = 0; k < res.source_trajectory.entries.size(); ++k) {
    EXPECT_EQ(res.source_trajectory.entries[k].latent, res.target_trajectory.entries[k].latent) << k;
  }
}

TEST_F(PipelineTest, SourceBranchIsIsolatedFromControl) {
  const auto vanilla = synthesize(sampler, src, 5, sc);
  for (auto [s, l] : {std::pair{0, 0}, std::pair{2, 6}, std::pair{4, 3}}) {
    for (bool mask : {false, true}) {
      const auto res = masactrl_edit(sampler, request(s, l, mask));
      EXPECT_EQ(res.source.rgb, vanilla.image.rgb);
    }
  }
}

TEST_F(PipelineTest, SubstitutionCountsFollowTheGate) {
  for (auto [s, l] : {std::pair{0, 0}, std::pair{2, model.decoder_start()}, std::pair{5, 9}}) {
    const auto res = masactrl_edit(sampler, request(s, l));
    const std::size_t expected = static_cast<std::size_t>(sc.steps - s) * self_layers_from(l);
    EXPECT_EQ(res.stats.substitutions, expected) << s << "," << l;
    EXPECT_EQ(res.stats.substituted_items, 2 * expected);  // unconditional and conditional items
  }
}

TEST_F(PipelineTest, ControlChangesTheTargetOnlyInsideTheGate) {
  const auto res = masactrl_edit(sampler, request(3, 0));
  const auto vanilla = synthesize(sampler, tgt, 5, sc);
  for (int k = 0; k <= 3; ++k) EXPECT_EQ(res.target_trajectory.entries[k].latent, vanilla.trajectory.entries[k].latent);
  EXPECT_NE(res.target_trajectory.entries[4].latent, vanilla.trajectory.entries[4].latent);
}

TEST_F(PipelineTest, MaskGuidanceProducesMasksFromStartStep) {
  const auto res = masactrl_edit(sampler, request(2, 0, true));
  ASSERT_EQ(res.masks.size(), static_cast<std::size_t>(sc.steps - 2));
  for (const auto& [ms, mt] : res.masks) {
    EXPECT_EQ(ms.side, 16);
    EXPECT_EQ(mt.side, 16);
  }
  EXPECT_GT(res.stats.masked_evaluations, 0u);
  const auto plain = masactrl_edit(sampler, request(2, 0, false));
  EXPECT_NE(res.target.rgb, plain.target.rgb);
}

TEST_F(PipelineTest, MaskGuidanceNeedsSixteenByteSixteenCrossLayers) {
  const auto tiny = random_model(test::tiny_config());
  const Sampler s(tiny, ScheduleParams{});
  EditRequest r = request(0, 0, true);
  const TokenGrammar g(tiny.config().max_tokens);
  r.source_prompt = g.parse("red circle");
  r.target_prompt = g.parse("red square");
  EXPECT_THROW((void)masactrl_edit(s, r), ContractError);
}

TEST_F(PipelineTest, RejectsBadRequests) {
  auto r = request(0, 0);
  r.image = Image(16, 16);
  EXPECT_THROW((void)masactrl_edit(sampler, r), ConfigError);
  r = request(0, 0);
  r.seed.reset();
  EXPECT_THROW((void)masactrl_edit(sampler, r), ConfigError);
  r = request(0, 0);
  r.sampler.guidance = 0.5;
  EXPECT_THROW((void)masactrl_edit(sampler, r), ConfigError);
  r = request(0, 0);
  r.control.target_token_index = 99;
  EXPECT_THROW((void)masactrl_edit(sampler, r), ConfigError);
}

TEST_F(PipelineTest, InversionWithZeroStepsIsIdentity) {
  const auto scene = render_scene(SceneSpec{}, 16);
  const auto img = quantize8(scene.image);
  const auto inv = invert(sampler, img, sampler.null_prompt(), 0);
  const auto rec = sample_from(sampler, inv.z_T, sampler.null_prompt(), SamplerConfig{0, 1.0});
  EXPECT_EQ(quantize8(rec.image).rgb, img.rgb);
  EXPECT_THROW((void)invert(sampler, Image(8, 8), sampler.null_prompt(), 4), ConfigError);
}

TEST_F(PipelineTest, InversionTrajectoryMirrorsSampling) {
  const auto img = quantize8(render_scene(SceneSpec{}, 16).image);
  const auto inv = invert(sampler, img, src, 5);
  ASSERT_EQ(inv.trajectory.entries.size(), 6u);
  EXPECT_TRUE(inv.trajectory.entries.front().timestep.is_boundary());
  auto ts = sampler.timesteps(5);
  for (std::size_t j = 1; j < inv.trajectory.entries.size(); ++j) {
    EXPECT_EQ(inv.trajectory.entries[j].timestep, Timestep(ts[ts.size() - j]));
  }
  EXPECT_EQ(inv.trajectory.entries.back().latent, inv.z_T);
}

TEST_F(PipelineTest, RealImageEditInvertsWithTheSourcePrompt) {
  auto r = request(2, 0);
  r.seed.reset();
  r.image = quantize8(render_scene(SceneSpec{}, 16).image);
  r.sampler.guidance = 1.0;
  const auto res = masactrl_edit(sampler, r);
  ASSERT_TRUE(res.inversion_trajectory.has_value());
  const auto inv = invert(sampler, *r.image, src, sc.steps);
  EXPECT_EQ(res.source_trajectory.entries.front().latent, inv.z_T);
}

TEST(ReferenceMapping, ScalesStepsAndLayers) {
  EXPECT_EQ(map_reference_step(4, 50), 4);
  EXPECT_EQ(map_reference_step(4, 25), 2);
  EXPECT_EQ(map_reference_step(15, 20), 6);
  EXPECT_EQ(map_reference_layer(10, 6, 14), 6);
  EXPECT_EQ(map_reference_layer(0, 6, 14), 0);
  EXPECT_EQ(map_reference_layer(16, 6, 14), 14);
  EXPECT_EQ(map_reference_layer(8, 6, 14), 5);
  EXPECT_EQ(map_reference_layer(13, 6, 14), 10);
  const auto model = Denoiser<float>::build(DenoiserConfig{}, 1);
  ASSERT_EQ(model.layer_registry().size(), 14u);
  EXPECT_EQ(model.decoder_start(), 6);
  const auto c = default_control(model, 50);
  EXPECT_EQ(c.start_step, 4);
  EXPECT_EQ(c.start_layer, 6);
  const auto cc = condition_control(model, 50);
  EXPECT_EQ(cc.start_step, 2);
  EXPECT_EQ(cc.start_layer, 5);
}

TEST_F(PipelineTest, ApplyConditionValidatesAndSwitchesGate) {
  SpatialCondition<float> cond;
  cond.maps[16] = nn::Feat<float>::Constant(cfg.level_channels(0), 256, 0.1f);
  const auto req = apply_condition(request(4, 9), cond, model);
  const auto mapped = condition_control(model, sc.steps);
  EXPECT_EQ(req.control.start_step, mapped.start_step);
  EXPECT_EQ(req.control.start_layer, mapped.start_layer);
  ASSERT_TRUE(req.target_condition.has_value());
  EXPECT_EQ(apply_condition(request(4, 9), cond, model, true).control.start_step, 4);
  SpatialCondition<float> bad;
  bad.maps[12] = nn::Feat<float>::Zero(8, 144);
  EXPECT_THROW((void)apply_condition(request(4, 9), bad, model), ConfigError);
  SpatialCondition<float> wrong;
  wrong.maps[16] = nn::Feat<float>::Zero(3, 256);
  EXPECT_THROW((void)apply_condition(request(4, 9), wrong, model), ConfigError);

  // The condition reaches the target branch only.
  const auto res = masactrl_edit(sampler, req);
  EXPECT_EQ(res.source.rgb, synthesize(sampler, src, 5, sc).image.rgb);
  auto plain = req;
  plain.target_condition.reset();
  EXPECT_NE(res.target.rgb, masactrl_edit(sampler, plain).target.rgb);
}

}  // namespace
}  // namespace masa
