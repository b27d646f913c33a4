#include <gtest/gtest.h>

#include <random>

#include "masa/attention_control.hpp"
#include "masa/errors.hpp"
#include "masa/pipeline.hpp"
#include "test_support.hpp"

namespace masa {
namespace {

Latent noise(Shape4 s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n01;
  Latent t(s);
  for (auto& x : t.values()) x = n01(rng);
  return t;
}

TEST(Denoiser, DefaultRegistryLayout) {
  const auto m = Denoiser<float>::build(DenoiserConfig{}, 1);
  const auto& reg = m.layer_registry();
  ASSERT_EQ(reg.size(), 14u);
  int cross16 = 0;
  for (std::size_t i = 0; i < reg.size(); ++i) {
    EXPECT_EQ(reg[i].index, static_cast<int>(i));
    // self and cross layers alternate within a block
    EXPECT_EQ(reg[i].kind, i % 2 == 0 ? LayerKind::self_attention : LayerKind::cross_attention);
    if (reg[i].kind == LayerKind::cross_attention && reg[i].resolution == 16) ++cross16;
    EXPECT_EQ(reg[i].section == Section::decoder, static_cast<int>(i) >= m.decoder_start());
  }
  EXPECT_EQ(m.decoder_start(), 6);
  EXPECT_EQ(cross16, 3);
  EXPECT_GT(m.num_parameters(), 1'000'000u);
  EXPECT_LT(m.num_parameters(), 1'500'000u);
}

TEST(Denoiser, ValidateRejectsInconsistentConfigs) {
  auto c = test::tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::tiny_config();
  c.attention_resolutions = {5};
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::tiny_config();
  c.groups = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Denoiser, ZeroOutputInitPredictsZero) {
  const auto m = Denoiser<float>::build(test::tiny_config(), 2);
  const auto x = noise(Shape4{1, 3, 8, 8}, 1);
  const std::vector<int> t{100};
  const std::vector<PromptEmbedding<float>> p{m.embed_prompt(PromptTokens{{1, 5, 8, 11, 0, 0}})};
  const auto out = m.forward(x, t, p);
  for (float v : out.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Denoiser, BatchItemsAreIndependent) {
  auto m = Denoiser<float>::build(test::tiny_config(), 2);
  m.init_parameters(2, false);
  const auto x = noise(Shape4{2, 3, 8, 8}, 1);
  const std::vector<int> t{100, 700};
  const PromptTokens a{{1, 5, 8, 11, 0, 0}}, b{{2, 6, 9, 12, 0, 0}};
  const std::vector<PromptEmbedding<float>> p{m.embed_prompt(a), m.embed_prompt(b)};
  const auto both = m.forward(x, t, p);
  for (int i = 0; i < 2; ++i) {
    Latent xi(Shape4{1, 3, 8, 8});
    std::copy(x.sample(i).begin(), x.sample(i).end(), xi.values().begin());
    const std::vector<int> ti{t[static_cast<std::size_t>(i)]};
    const std::vector<PromptEmbedding<float>> pi{p[static_cast<std::size_t>(i)]};
    const auto single = m.forward(xi, ti, pi);
    for (std::size_t k = 0; k < single.size(); ++k) EXPECT_FLOAT_EQ(single[k], both.sample(i)[k]);
  }
}

TEST(Denoiser, ForwardMatchesSingleSamplePathAndDoublePrecision) {
  auto m = Denoiser<float>::build(test::tiny_config(), 2);
  m.init_parameters(5, false);
  const auto x = noise(Shape4{1, 3, 8, 8}, 4);
  const PromptTokens tok{{1, 5, 8, 11, 0, 0}};
  const std::vector<int> t{321};
  const std::vector<PromptEmbedding<float>> p{m.embed_prompt(tok)};
  const auto out = m.forward(x, t, p);
  nn::Feat<float> xf(3, 64);
  std::copy(x.values().begin(), x.values().end(), xf.data());
  const auto single = m.forward_sample(xf, 321, tok, nullptr);
  const auto md = m.cast<double>();
  const auto dbl = md.forward_sample(xf.cast<double>(), 321, tok, nullptr);
  for (Eigen::Index i = 0; i < single.size(); ++i) {
    EXPECT_NEAR(single.data()[i], out[static_cast<std::size_t>(i)], 1e-5);
    EXPECT_NEAR(single.data()[i], dbl.data()[i], 1e-4);
  }
}

TEST(Denoiser, RecordingControllerLeavesOutputUnchanged) {
  auto m = Denoiser<float>::build(test::small_config(), 2);
  m.init_parameters(6, false);
  const auto x = noise(Shape4{2, 3, 16, 16}, 7);
  const std::vector<int> t{400};
  const PromptTokens tok{{1, 5, 8, 11, 0, 0}};
  const std::vector<PromptEmbedding<float>> p{m.embed_prompt(PromptTokens{{0, 0, 0, 0, 0, 0}}), m.embed_prompt(tok)};
  AttentionRecord<float> rec;
  CrossMapStore<float> maps;
  RecordingController<float> ctl(m.layer_registry().size(), &rec, &maps);
  ctl.begin_pass(0, {true, false});
  EXPECT_EQ(m.forward(x, t, p, &ctl), m.forward(x, t, p));
  std::size_t self_layers = 0, cross_layers = 0;
  for (const auto& l : m.layer_registry()) (l.kind == LayerKind::self_attention ? self_layers : cross_layers)++;
  EXPECT_EQ(rec.size(), self_layers);
  ASSERT_NE(rec.find(0, 0, 1), nullptr);
  EXPECT_EQ(maps.maps(0).size(), cross_layers);
  for (const auto& cm : maps.maps(0)) {
    for (const auto& h : cm.weights) {
      EXPECT_EQ(h.cols(), 6);
      EXPECT_NEAR(h.rowwise().sum().maxCoeff(), 1.0, 1e-5);
    }
  }
  RecordingController<float> wrong(3, &rec, &maps);
  EXPECT_THROW((void)m.forward(x, t, p, &wrong), ContractError);
}

TEST(Denoiser, PromptChangesConditionalOutput) {
  auto m = Denoiser<float>::build(test::tiny_config(), 2);
  m.init_parameters(8, false);
  const auto x = noise(Shape4{1, 3, 8, 8}, 9);
  const std::vector<int> t{500};
  const std::vector<PromptEmbedding<float>> a{m.embed_prompt(PromptTokens{{1, 5, 8, 11, 0, 0}})};
  const std::vector<PromptEmbedding<float>> b{m.embed_prompt(PromptTokens{{2, 5, 8, 11, 0, 0}})};
  EXPECT_NE(m.forward(x, t, a), m.forward(x, t, b));
  const std::vector<int> t2{501};
  EXPECT_NE(m.forward(x, t, a), m.forward(x, t2, a));
}

}  // namespace
}  // namespace masa
