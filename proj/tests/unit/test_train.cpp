#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "masa/errors.hpp"
#include "masa/train.hpp"
#include "test_support.hpp"

namespace masa {
namespace {

TrainConfig small_train() {
  TrainConfig t;
  t.steps = 12;
  t.batch_size = 4;
  t.dataset_size = 64;
  t.seed = 3;
  return t;
}

std::vector<DatasetSample> data_for(const DenoiserConfig& c, const TrainConfig& t) {
  return make_dataset(t.dataset_size, t.data_seed, TokenGrammar(c.max_tokens), c.image_size);
}

std::vector<Mat<float>> weights(const Denoiser<float>& m) {
  std::vector<Mat<float>> out;
  m.visit_parameters([&](const nn::Param<float>& p) { out.push_back(p.value); });
  return out;
}

TEST(Trainer, InitialLossIsNearOneWithZeroOutput) {
  const auto c = test::tiny_config();
  auto t = small_train();
  t.batch_size = 64;
  Trainer tr(c, ScheduleParams{}, t);
  const double loss = tr.step(data_for(c, t));
  EXPECT_NEAR(loss, 1.0, 0.1);
}

TEST(Trainer, LossDecreasesOnTinyModel) {
  const auto c = test::tiny_config();
  auto t = small_train();
  t.steps = 150;
  t.learning_rate = 3e-3;
  Trainer tr(c, ScheduleParams{}, t);
  const auto data = data_for(c, t);
  while (tr.completed_steps() < t.steps) tr.step(data);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) {
    head += tr.losses()[static_cast<std::size_t>(i)].loss;
    tail += tr.losses()[tr.losses().size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(tail, 0.6 * head);
}

TEST(Trainer, ResumeContinuesBitExactly) {
  const auto c = test::tiny_config();
  const auto t = small_train();
  const auto data = data_for(c, t);
  Trainer straight(c, ScheduleParams{}, t);
  while (straight.completed_steps() < t.steps) straight.step(data);

  Trainer first(c, ScheduleParams{}, t);
  while (first.completed_steps() < 5) first.step(data);
  const auto bytes = serialize_checkpoint(first.checkpoint());
  Trainer resumed = Trainer::resume(parse_checkpoint(bytes));
  EXPECT_EQ(resumed.completed_steps(), 5);
  while (resumed.completed_steps() < t.steps) resumed.step(data);

  EXPECT_EQ(weights(resumed.model()), weights(straight.model()));
  EXPECT_EQ(weights(resumed.ema_model()), weights(straight.ema_model()));
  EXPECT_EQ(resumed.losses(), straight.losses());
  EXPECT_EQ(serialize_checkpoint(resumed.checkpoint()), serialize_checkpoint(straight.checkpoint()));
  for (std::size_t i = 1; i < resumed.losses().size(); ++i) {
    EXPECT_EQ(resumed.losses()[i].step, resumed.losses()[i - 1].step + 1);
  }
}

TEST(Trainer, ResumeNeedsTrainingState) {
  const auto c = test::tiny_config();
  Trainer tr(c, ScheduleParams{}, small_train());
  EXPECT_THROW((void)Trainer::resume(tr.inference_checkpoint()), FormatError);
}

TEST(Trainer, InferenceCheckpointHoldsEmaWeights) {
  const auto c = test::tiny_config();
  const auto t = small_train();
  Trainer tr(c, ScheduleParams{}, t);
  const auto data = data_for(c, t);
  for (int i = 0; i < 4; ++i) tr.step(data);
  const auto ck = tr.inference_checkpoint();
  EXPECT_EQ(weights(load_denoiser(ck)), weights(tr.ema_model()));
  EXPECT_NE(weights(tr.ema_model()), weights(tr.model()));
  EXPECT_EQ(ck.losses.size(), 4u);
  const auto full = tr.checkpoint();
  EXPECT_EQ(weights(load_denoiser(full, true)), weights(tr.ema_model()));
  EXPECT_EQ(weights(load_denoiser(full, false)), weights(tr.model()));
}

TEST(Trainer, DivergenceIsReported) {
  const auto c = test::tiny_config();
  auto t = small_train();
  t.learning_rate = 1e30;
  Trainer tr(c, ScheduleParams{}, t);
  const auto data = data_for(c, t);
  EXPECT_THROW(
      {
        for (int i = 0; i < 5; ++i) tr.step(data);
      },
      DivergenceError);
}

TEST(Trainer, ConfigJsonValidates) {
  const auto t = small_train();
  EXPECT_EQ(train_config_from_json(train_config_to_json(t)), t);
  EXPECT_THROW((void)train_config_from_json(R"({"stepz": 3})"), ConfigError);
  EXPECT_THROW((void)train_config_from_json(R"({"batch_size": 0})"), ConfigError);
  EXPECT_THROW((void)train_config_from_json(R"({"learning_rate": -1})"), ConfigError);
  EXPECT_THROW((void)train_config_from_json(R"({"cond_dropout": 1.5})"), ConfigError);
}

TEST(DropTokens, RatesAndPadding) {
  const TokenGrammar g(8);
  const auto t = g.parse("red circle left on white");
  int null = 0, dropped_slots = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const auto d = drop_tokens(t, 0.1, 0.1, static_cast<std::uint64_t>(i));
    if (d == g.null_prompt()) {
      ++null;
      continue;
    }
    for (int s = 0; s < TokenGrammar::kNumSlots; ++s) {
      if (d.ids[s] == TokenGrammar::kPad) {
        ++dropped_slots;
      } else {
        EXPECT_EQ(d.ids[s], t.ids[s]);
      }
    }
  }
  EXPECT_NEAR(null / static_cast<double>(n), 0.1 + 0.9 * 1e-4, 0.01);
  EXPECT_NEAR(dropped_slots / (4.0 * (n - null)), 0.1, 0.01);
  EXPECT_EQ(drop_tokens(t, 0.0, 0.0, 5), t);
  EXPECT_EQ(drop_tokens(t, 0.3, 0.2, 5), drop_tokens(t, 0.3, 0.2, 5));
}

// Training is a layer below editing: it must not depend on the pipeline or the controllers.
TEST(Layering, TrainingDoesNotIncludeEditingModules) {
  for (const char* file : {MASA_SOURCE_DIR "/core/src/train.cpp", MASA_SOURCE_DIR "/core/include/masa/train.hpp"}) {
    std::ifstream in(file);
    ASSERT_TRUE(in) << file;
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    EXPECT_EQ(text.find("masa/pipeline.hpp"), std::string::npos) << file;
    EXPECT_EQ(text.find("masa/attention_control.hpp"), std::string::npos) << file;
  }
}

}  // namespace
}  // namespace masa
