#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "masa/checkpoint.hpp"
#include "masa/errors.hpp"
#include "masa/rng.hpp"
#include "test_support.hpp"

namespace masa {
namespace {

namespace fs = std::filesystem;

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Checkpoint sample_checkpoint() {
  auto model = Denoiser<float>::build(test::tiny_config(), 4);
  model.init_parameters(4, false);
  Checkpoint ck;
  ck.denoiser = model.config();
  ck.schedule.beta_end = 0.015;
  ck.meta_json = R"({"note":"unit test","n":3})";
  store_parameters(ck, model);
  store_parameters(ck, model, kEmaPrefix);
  ck.losses = {{0, 1.0f}, {1, 0.5f}, {7, 0.25f}};
  Trajectory tr;
  tr.label = "source";
  Latent z(Shape4{1, 3, 2, 2});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(i) * 0.5f - 1.0f;
  tr.entries.push_back({0, Timestep(980), z});
  tr.entries.push_back({1, kFinalTimestep, z});
  ck.trajectories.push_back(tr);
  return ck;
}

TEST(Checkpoint, SerializeParseRoundTrip) {
  const auto ck = sample_checkpoint();
  const auto bytes = serialize_checkpoint(ck);
  ASSERT_GE(bytes.size(), 5u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "MASA1");
  const auto back = parse_checkpoint(bytes);
  EXPECT_EQ(back, ck);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = fs::temp_directory_path() / "masa_ckpt_test";
  fs::create_directories(dir);
  save_checkpoint(dir / "a.masa", sample_checkpoint());
  save_checkpoint(dir / "b.masa", load_checkpoint(dir / "a.masa"));
  EXPECT_EQ(read_bytes(dir / "a.masa"), read_bytes(dir / "b.masa"));
  EXPECT_FALSE(fs::exists(dir / "a.masa.tmp"));
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsMalformedContainers) {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW((void)parse_checkpoint(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[5] = 9;
  EXPECT_THROW((void)parse_checkpoint(bad_version), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW((void)parse_checkpoint(std::span(bytes).first(cut)), FormatError) << cut;
  }
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW((void)parse_checkpoint(trailing), FormatError);
  EXPECT_THROW((void)load_checkpoint("/nonexistent/model.masa"), FormatError);
}

TEST(Checkpoint, ParametersRoundTripIntoModels) {
  const auto ck = sample_checkpoint();
  const auto model = load_denoiser(ck);
  auto reference = Denoiser<float>::build(test::tiny_config(), 4);
  reference.init_parameters(4, false);
  std::vector<Mat<float>> a, b;
  model.visit_parameters([&](const nn::Param<float>& p) { a.push_back(p.value); });
  reference.visit_parameters([&](const nn::Param<float>& p) { b.push_back(p.value); });
  EXPECT_EQ(a, b);

  auto missing = ck;
  missing.tensors.erase(missing.tensors.begin());
  auto target = Denoiser<float>::build(test::tiny_config(), 0);
  EXPECT_THROW(load_parameters(missing, target), FormatError);
  auto wrong = ck;
  wrong.tensors.front().dims.front() += 1;
  EXPECT_THROW(load_parameters(wrong, target), FormatError);
}

TEST(Checkpoint, ConfigJsonIsStrict) {
  const DenoiserConfig c = test::tiny_config();
  EXPECT_EQ(denoiser_config_from_json(denoiser_config_to_json(c)), c);
  EXPECT_EQ(denoiser_config_from_json("{}"), DenoiserConfig{});
  EXPECT_THROW((void)denoiser_config_from_json(R"({"image_sise": 32})"), ConfigError);
  EXPECT_THROW((void)denoiser_config_from_json("[1,2]"), ConfigError);
  EXPECT_THROW((void)denoiser_config_from_json(R"({"heads": 3})"), ConfigError);  // heads*head_dim mismatch
  ScheduleParams p;
  p.kind = BetaKind::scaled_linear;
  EXPECT_EQ(schedule_params_from_json(schedule_params_to_json(p)), p);
  EXPECT_THROW((void)schedule_params_from_json(R"({"kind": "cosine"})"), ConfigError);
}

TEST(Rng, DerivedSeedsAreDistinctPerStreamAndIndex) {
  static_assert(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(2, 2, 3));
}

}  // namespace
}  // namespace masa
