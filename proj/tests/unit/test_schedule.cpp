#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "../support/oracles.hpp"
#include "masa/errors.hpp"
#include "masa/schedule.hpp"

namespace masa {
namespace {

Tensor<double> random_tensor(std::mt19937_64& rng, Shape4 s) {
  std::normal_distribution<double> n01;
  Tensor<double> t(s);
  for (auto& x : t.values()) x = n01(rng);
  return t;
}

TEST(Schedule, AlphaBarMatchesLongDoubleProduct) {
  for (bool scaled : {false, true}) {
    const auto sched = NoiseSchedule::make(1000, 1e-4, 0.02, scaled ? BetaKind::scaled_linear : BetaKind::linear);
    const auto ref = oracle::schedule(1000, 1e-4, 0.02, scaled);
    for (int t = 0; t < 1000; ++t) {
      const auto want = ref.alpha_bar[static_cast<std::size_t>(t)];
      EXPECT_LT(std::fabs(sched.alpha_bars()[static_cast<std::size_t>(t)] - want) / want, 1e-12) << t;
    }
  }
}

TEST(Schedule, MonotoneAndBounded) {
  const auto sched = NoiseSchedule::make(ScheduleParams{});
  EXPECT_DOUBLE_EQ(sched.betas().front(), 1e-4);
  EXPECT_DOUBLE_EQ(sched.betas().back(), 0.02);
  for (int t = 1; t < sched.num_timesteps(); ++t) {
    EXPECT_LT(sched.alpha_bars()[t], sched.alpha_bars()[t - 1]);
    EXPECT_GT(sched.alpha_bars()[t], 0.0);
  }
  EXPECT_EQ(sched.alpha_bar(kFinalTimestep), 1.0);
}

TEST(Schedule, RejectsInvalidParameters) {
  EXPECT_THROW(NoiseSchedule::make(0, 1e-4, 0.02, BetaKind::linear), ConfigError);
  EXPECT_THROW(NoiseSchedule::make(10, 0.0, 0.02, BetaKind::linear), ConfigError);
  EXPECT_THROW(NoiseSchedule::make(10, 0.03, 0.02, BetaKind::linear), ConfigError);
  EXPECT_THROW(NoiseSchedule::make(10, 1e-4, 1.0, BetaKind::linear), ConfigError);
  EXPECT_THROW(beta_kind_from_string("cosine"), ConfigError);
  const auto s = NoiseSchedule::make(10, 1e-4, 0.02, BetaKind::linear);
  EXPECT_THROW(s.check_index(10), ContractError);
  EXPECT_THROW(s.check_index(-1), ContractError);
}

TEST(Schedule, BoundaryTimestepOrdersFirst) {
  EXPECT_TRUE(kFinalTimestep.is_boundary());
  EXPECT_EQ(kFinalTimestep, kInitialTimestep);
  EXPECT_EQ(kFinalTimestep.network_index(), 0);
  EXPECT_TRUE(kFinalTimestep < Timestep(0));
  EXPECT_THROW((void)kFinalTimestep.index(), ContractError);
}

TEST(Schedule, SamplingTimestepsFloorFormula) {
  for (int steps : {1, 7, 10, 50, 333, 1000}) {
    const auto ts = sampling_timesteps(1000, steps);
    ASSERT_EQ(static_cast<int>(ts.size()), steps);
    for (int i = 0; i < steps; ++i) {
      const int k = steps - 1 - i;
      EXPECT_EQ(ts[static_cast<std::size_t>(i)], k * 1000 / steps);
      if (i > 0) {
        EXPECT_LT(ts[static_cast<std::size_t>(i)], ts[static_cast<std::size_t>(i - 1)]);
      }
    }
    EXPECT_EQ(ts.back(), 0);
  }
  EXPECT_TRUE(sampling_timesteps(1000, 0).empty());
  EXPECT_THROW(sampling_timesteps(1000, 1001), ConfigError);
}

TEST(Schedule, QSampleStatisticsNearT) {
  const auto sched = NoiseSchedule::make(ScheduleParams{});
  std::mt19937_64 rng(42);
  const Shape4 s{10000, 1, 1, 1};
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> x0(s);
  for (auto& x : x0.values()) x = u(rng);
  const auto eps = random_tensor(rng, s);
  const auto xt = q_sample(x0, 999, eps, sched);
  double mean = 0, sq = 0;
  for (double v : xt.values()) {
    mean += v;
    sq += v * v;
  }
  mean /= 10000.0;
  const double var = sq / 10000.0 - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(var, 1.0, 0.1);
}

TEST(Schedule, KernelsMatchScalarOracle) {
  const auto sched = NoiseSchedule::make(ScheduleParams{});
  const auto ref = oracle::schedule(1000, 1e-4, 0.02);
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> pick(0, 999);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Shape4 s{2, 3, 2, 2};
    const auto x = random_tensor(rng, s), eps = random_tensor(rng, s), z = random_tensor(rng, s);
    int a = pick(rng), b = pick(rng);
    if (a == b) b = (a + 1) % 1000;
    const int hi = std::max(a, b), lo = std::min(a, b);
    const auto down = ddim_step(x, eps, Timestep(hi), Timestep(lo), sched);
    const auto to_clean = ddim_step(x, eps, Timestep(hi), kFinalTimestep, sched);
    const auto up = ddim_invert_step(x, eps, Timestep(lo), Timestep(hi), sched);
    const auto from_clean = ddim_invert_step(x, eps, kInitialTimestep, Timestep(hi), sched);
    const auto ddpm = ddpm_step(x, eps, hi, sched, z);
    const auto clipped = ddim_step_clipped(x, eps, Timestep(hi), Timestep(lo), sched, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      worst = std::max(worst, oracle::rel_err(down[i], oracle::ddim(ref, x[i], eps[i], hi, lo)));
      worst = std::max(worst, oracle::rel_err(to_clean[i], oracle::ddim(ref, x[i], eps[i], hi, -1)));
      worst = std::max(worst, oracle::rel_err(up[i], oracle::ddim_invert(ref, x[i], eps[i], lo, hi)));
      worst = std::max(worst, oracle::rel_err(from_clean[i], oracle::ddim_invert(ref, x[i], eps[i], -1, hi)));
      worst = std::max(worst, oracle::rel_err(ddpm[i], oracle::ddpm(ref, x[i], eps[i], hi, z[i])));
      worst = std::max(worst, oracle::rel_err(clipped[i], oracle::ddim_clipped(ref, x[i], eps[i], hi, lo, 1.0L)));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Schedule, ClippedDdimMatchesPlainInsideTheBound) {
  const auto sched = NoiseSchedule::make(ScheduleParams{});
  std::mt19937_64 rng(12);
  const Shape4 s{1, 3, 4, 4};
  auto x0 = random_tensor(rng, s);
  for (auto& v : x0.values()) v = std::tanh(v);  // inside (-1, 1)
  const auto eps = random_tensor(rng, s);
  const auto xt = q_sample(x0, 600, eps, sched);
  const auto plain = ddim_step(xt, eps, Timestep(600), Timestep(400), sched);
  const auto clipped = ddim_step_clipped(xt, eps, Timestep(600), Timestep(400), sched, 1.0);
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_NEAR(clipped[i], plain[i], 1e-12);
  // to the clean boundary the result is the clamped prediction itself
  const auto far = ddim_step_clipped(xt, eps, Timestep(600), kFinalTimestep, sched, 0.5);
  for (std::size_t i = 0; i < far.size(); ++i) EXPECT_NEAR(far[i], std::clamp(x0[i], -0.5, 0.5), 1e-12);
  EXPECT_THROW((void)ddim_step_clipped(xt, eps, Timestep(600), Timestep(400), sched, 0.0), ContractError);
}

TEST(Schedule, DdpmDropsNoiseAtZero) {
  const auto sched = NoiseSchedule::make(ScheduleParams{});
  std::mt19937_64 rng(3);
  const Shape4 s{1, 3, 2, 2};
  const auto x = random_tensor(rng, s), eps = random_tensor(rng, s), z = random_tensor(rng, s);
  const Tensor<double> zero(s);
  EXPECT_EQ(ddpm_step(x, eps, 0, sched, z).values()[0], ddpm_step(x, eps, 0, sched, zero).values()[0]);
}

TEST(Schedule, DdimRecoversCleanSampleWithTrueNoise) {
  const auto sched = NoiseSchedule::make(ScheduleParams{});
  std::mt19937_64 rng(9);
  const Shape4 s{1, 3, 4, 4};
  const auto x0 = random_tensor(rng, s), eps = random_tensor(rng, s);
  // Walk every step of a 20-step schedule with the exact noise: the DDIM map keeps x0 fixed.
  const auto ts = sampling_timesteps(1000, 20);
  auto x = q_sample(x0, ts.front(), eps, sched);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const Timestep prev = k + 1 < ts.size() ? Timestep(ts[k + 1]) : kFinalTimestep;
    x = ddim_step(x, eps, Timestep(ts[k]), prev, sched);
  }
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], x0[i], 1e-9);

  const auto xt = q_sample(x0, 500, eps, sched);
  const auto rec = predict_x0(xt, eps, Timestep(500), sched);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(rec[i], x0[i], 1e-12);
}

TEST(Schedule, InvertStepUndoesDdimStep) {
  const auto sched = NoiseSchedule::make(ScheduleParams{});
  std::mt19937_64 rng(10);
  const Shape4 s{1, 3, 4, 4};
  const auto x = random_tensor(rng, s), eps = random_tensor(rng, s);
  const auto down = ddim_step(x, eps, Timestep(640), Timestep(620), sched);
  const auto back = ddim_invert_step(down, eps, Timestep(620), Timestep(640), sched);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-12);
}

TEST(Schedule, TrainingLossIsMeanSquaredError) {
  const Tensor<double> a(Shape4{1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4});
  const Tensor<double> b(Shape4{1, 1, 1, 4}, std::vector<double>{1, 0, 3, 0});
  EXPECT_DOUBLE_EQ(training_loss(a, b), (4.0 + 16.0) / 4.0);
  EXPECT_THROW((void)training_loss(a, Tensor<double>(Shape4{1, 1, 1, 3})), ContractError);
}

}  // namespace
}  // namespace masa
