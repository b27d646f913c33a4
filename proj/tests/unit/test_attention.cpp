#include <gtest/gtest.h>

#include <random>

#include "../support/oracles.hpp"
#include "masa/attention.hpp"
#include "masa/attention_control.hpp"
#include "masa/errors.hpp"

namespace masa {
namespace {

Mat<double> to_mat(const oracle::Matrix& m) {
  Mat<double> out(static_cast<Eigen::Index>(m.size()), static_cast<Eigen::Index>(m.front().size()));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = static_cast<double>(m[i][j]);
  }
  return out;
}

double worst_rel(const Mat<double>& got, const oracle::Matrix& want) {
  double w = 0;
  for (Eigen::Index i = 0; i < got.rows(); ++i) {
    for (Eigen::Index j = 0; j < got.cols(); ++j) w = std::max(w, oracle::rel_err(got(i, j), want[i][j]));
  }
  return w;
}

struct Instance {
  std::vector<oracle::Matrix> q, k, v;
  Heads<double> hq, hk, hv;
};

Instance random_instance(std::mt19937_64& rng, int heads, int nq, int nk, int d) {
  Instance in;
  for (int h = 0; h < heads; ++h) {
    in.q.push_back(oracle::random_matrix(rng, nq, d, 1.5));
    in.k.push_back(oracle::random_matrix(rng, nk, d, 1.5));
    in.v.push_back(oracle::random_matrix(rng, nk, d));
    in.hq.push_back(to_mat(in.q.back()));
    in.hk.push_back(to_mat(in.k.back()));
    in.hv.push_back(to_mat(in.v.back()));
  }
  return in;
}

std::vector<std::uint8_t> random_bits(std::mt19937_64& rng, std::size_t n, double p = 0.5) {
  std::bernoulli_distribution b(p);
  std::vector<std::uint8_t> out(n);
  for (auto& x : out) x = b(rng) ? 1 : 0;
  return out;
}

TEST(Attention, MatchesScalarOracle) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> dim(1, 9);
  double worst = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const int heads = dim(rng) % 3 + 1, nq = dim(rng), nk = dim(rng), d = dim(rng);
    const auto in = random_instance(rng, heads, nq, nk, d);
    const auto res = attention(in.hq, in.hk, in.hv);
    ASSERT_EQ(res.out.size(), static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      worst = std::max(worst, worst_rel(res.out[h], oracle::attention_head(in.q[h], in.k[h], in.v[h])));
      worst = std::max(worst, worst_rel(res.weights[h], oracle::attention_weights(in.q[h], in.k[h])));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Attention, WeightsAreRowStochastic) {
  std::mt19937_64 rng(2);
  const auto in = random_instance(rng, 4, 16, 11, 8);
  const auto res = attention(in.hq, in.hk, in.hv);
  for (const auto& w : res.weights) {
    EXPECT_GE(w.minCoeff(), 0.0);
    for (Eigen::Index i = 0; i < w.rows(); ++i) EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-12);
  }
}

TEST(Attention, StableForLargeScores) {
  Heads<double> q{Mat<double>::Constant(2, 2, 400.0)}, k{Mat<double>::Constant(3, 2, 400.0)};
  Heads<double> v{Mat<double>::Random(3, 2)};
  const auto res = attention(q, k, v);
  EXPECT_TRUE(res.out[0].allFinite());
  EXPECT_NEAR(res.weights[0](0, 0), 1.0 / 3.0, 1e-12);
}

TEST(Attention, RejectsMismatchedHeads) {
  Heads<double> q{Mat<double>::Zero(2, 3)}, k{Mat<double>::Zero(4, 2)}, v{Mat<double>::Zero(4, 3)};
  EXPECT_THROW((void)attention(q, k, v), ContractError);
  Heads<double> k2{Mat<double>::Zero(4, 3)}, v2{Mat<double>::Zero(5, 3)};
  EXPECT_THROW((void)attention(q, k2, v2), ContractError);
}

TEST(MaskedAttention, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> dim(1, 9);
  double worst = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const int heads = dim(rng) % 3 + 1, nq = dim(rng), nk = dim(rng) + 1, d = dim(rng);
    const auto in = random_instance(rng, heads, nq, nk, d);
    const auto keep = random_bits(rng, static_cast<std::size_t>(nk));
    const auto res = masked_attention(in.hq, in.hk, in.hv, keep);
    const bool none = std::none_of(keep.begin(), keep.end(), [](std::uint8_t x) { return x != 0; });
    EXPECT_EQ(res.fallback, none);
    for (int h = 0; h < heads; ++h) {
      worst = std::max(worst, worst_rel(res.out[h], oracle::masked_attention_head(in.q[h], in.k[h], in.v[h], keep)));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(MaskedAttention, AllOnesIsExactlyUnmasked) {
  std::mt19937_64 rng(4);
  const auto in = random_instance(rng, 2, 9, 9, 4);
  const std::vector<std::uint8_t> ones(9, 1), zeros(9, 0);
  const auto plain = attention(in.hq, in.hk, in.hv).out;
  const auto a = masked_attention(in.hq, in.hk, in.hv, ones);
  const auto b = masked_attention(in.hq, in.hk, in.hv, zeros);
  EXPECT_FALSE(a.fallback);
  EXPECT_TRUE(b.fallback);
  for (int h = 0; h < 2; ++h) {
    EXPECT_EQ(a.out[h], plain[h]);
    EXPECT_EQ(b.out[h], plain[h]);
  }
}

TEST(MaskedAttention, ExcludedKeysHaveNoInfluence) {
  std::mt19937_64 rng(5);
  auto in = random_instance(rng, 1, 4, 6, 3);
  const std::vector<std::uint8_t> keep{1, 0, 1, 0, 0, 1};
  const auto before = masked_attention(in.hq, in.hk, in.hv, keep).out[0];
  in.hv[0].row(1).setConstant(1e6);
  in.hk[0].row(3).setConstant(50.0);
  const auto after = masked_attention(in.hq, in.hk, in.hv, keep).out[0];
  EXPECT_LT((before - after).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MaskedAttention, RejectsWrongMaskLength) {
  std::mt19937_64 rng(6);
  const auto in = random_instance(rng, 1, 4, 6, 3);
  EXPECT_THROW((void)masked_attention(in.hq, in.hk, in.hv, std::vector<std::uint8_t>(5, 1)), ContractError);
}

// ------------------------------------------------------------ mutual self-attention

ForegroundMask random_mask(std::mt19937_64& rng, int side) {
  ForegroundMask m;
  m.side = side;
  m.grid = random_bits(rng, static_cast<std::size_t>(side * side), 0.4);
  return m;
}

struct MsaFixture {
  LayerInfo layer{7, LayerKind::self_attention, 16, Section::decoder};
  ControlConfig cfg;
  AttentionRecord<double> record;
  Instance own, src;

  explicit MsaFixture(std::mt19937_64& rng, int side = 16, int heads = 2, int d = 4) {
    const int n = side * side;
    layer.resolution = side;
    cfg.start_step = 0;
    cfg.start_layer = 0;
    own = random_instance(rng, heads, n, n, d);
    src = random_instance(rng, heads, n, n, d);
    record.record(3, layer.index, 0, RecordedAttention<double>{src.hk, src.hv, {}});
  }
};

TEST(MutualSelfAttention, MaskedEqualsForegroundBackgroundPartition) {
  std::mt19937_64 rng(7);
  double worst = 0;
  for (int trial = 0; trial < 6; ++trial) {
    MsaFixture f(rng);
    const auto ms = random_mask(rng, 16), mt = random_mask(rng, 16);
    ControlStats stats;
    const auto out = mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 3, f.layer, 0, f.cfg, &ms, &mt, &stats);
    std::vector<std::uint8_t> bg(ms.grid.size());
    for (std::size_t i = 0; i < bg.size(); ++i) bg[i] = ms.grid[i] ? 0 : 1;
    for (std::size_t h = 0; h < out.size(); ++h) {
      const auto fg_ref = oracle::masked_attention_head(f.own.q[h], f.src.k[h], f.src.v[h], ms.grid);
      const auto bg_ref = oracle::masked_attention_head(f.own.q[h], f.src.k[h], f.src.v[h], bg);
      oracle::Matrix want(fg_ref.size());
      for (std::size_t i = 0; i < want.size(); ++i) {
        // M * O_fg + (1 - M) * O_bg with a binary M
        want[i].resize(fg_ref[i].size());
        for (std::size_t c = 0; c < want[i].size(); ++c) {
          want[i][c] = mt.grid[i] * fg_ref[i][c] + (1 - mt.grid[i]) * bg_ref[i][c];
        }
      }
      worst = std::max(worst, worst_rel(out[h], want));
    }
    EXPECT_EQ(stats.masked_evaluations, 1u);
    EXPECT_EQ(stats.substituted_items, 1u);
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(MutualSelfAttention, AllOnesMasksCollapseToUnmaskedExactly) {
  std::mt19937_64 rng(8);
  MsaFixture f(rng);
  const auto ones = ForegroundMask::filled(16, 1);
  const auto masked = mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 3, f.layer, 0, f.cfg, &ones, &ones);
  const auto plain = mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 3, f.layer, 0, f.cfg, nullptr, nullptr);
  const auto direct = attention(f.own.hq, f.src.hk, f.src.hv).out;
  for (std::size_t h = 0; h < plain.size(); ++h) {
    EXPECT_EQ(masked[h], plain[h]);
    EXPECT_EQ(plain[h], direct[h]);
  }
}

TEST(MutualSelfAttention, MasksResampleToLayerResolution) {
  std::mt19937_64 rng(9);
  MsaFixture f(rng, 8);
  const auto ms = random_mask(rng, 16), mt = random_mask(rng, 16);
  const auto out = mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 3, f.layer, 0, f.cfg, &ms, &mt);
  const auto fg_keys = upsample_mask(ms, 8), queries = upsample_mask(mt, 8);
  std::vector<std::uint8_t> bg_keys(fg_keys.size());
  for (std::size_t i = 0; i < fg_keys.size(); ++i) bg_keys[i] = fg_keys[i] ? 0 : 1;
  for (std::size_t h = 0; h < out.size(); ++h) {
    const auto fg = oracle::masked_attention_head(f.own.q[h], f.src.k[h], f.src.v[h], fg_keys);
    const auto bg = oracle::masked_attention_head(f.own.q[h], f.src.k[h], f.src.v[h], bg_keys);
    for (Eigen::Index i = 0; i < out[h].rows(); ++i) {
      const auto& want = queries[static_cast<std::size_t>(i)] ? fg[i] : bg[i];
      for (Eigen::Index c = 0; c < out[h].cols(); ++c) EXPECT_LT(oracle::rel_err(out[h](i, c), want[c]), 1e-5);
    }
  }
}

TEST(MutualSelfAttention, GateOffUsesOwnKeysExactly) {
  std::mt19937_64 rng(10);
  MsaFixture f(rng, 4);
  f.cfg.start_step = 4;
  const auto out = mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 3, f.layer, 0, f.cfg, nullptr, nullptr);
  const auto own = attention(f.own.hq, f.own.hk, f.own.hv).out;
  for (std::size_t h = 0; h < out.size(); ++h) EXPECT_EQ(out[h], own[h]);
  f.cfg.start_step = 0;
  f.cfg.start_layer = f.layer.index + 1;
  const auto out2 = mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 3, f.layer, 0, f.cfg, nullptr, nullptr);
  for (std::size_t h = 0; h < out.size(); ++h) EXPECT_EQ(out2[h], own[h]);
}

TEST(MutualSelfAttention, MissingRecordRaisesControlError) {
  std::mt19937_64 rng(11);
  MsaFixture f(rng, 4);
  EXPECT_THROW((void)mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 5, f.layer, 0, f.cfg, nullptr, nullptr),
               ControlError);
  EXPECT_THROW((void)mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 3, f.layer, 1, f.cfg, nullptr, nullptr),
               ControlError);
}

TEST(MutualSelfAttention, EmptyMaskFallsBackAndIsCounted) {
  std::mt19937_64 rng(12);
  MsaFixture f(rng, 4);
  const auto empty = ForegroundMask::filled(16, 0);
  const auto ones = ForegroundMask::filled(16, 1);
  ControlStats stats;
  const auto out = mutual_self_attention(f.own.hq, f.own.hk, f.own.hv, f.record, 3, f.layer, 0, f.cfg, &empty, &ones, &stats);
  EXPECT_EQ(stats.mask_fallbacks, 1u);  // foreground keys empty, background keys full
  const auto direct = attention(f.own.hq, f.src.hk, f.src.hv).out;
  for (std::size_t h = 0; h < out.size(); ++h) EXPECT_LT((out[h] - direct[h]).cwiseAbs().maxCoeff(), 1e-12);
}

}  // namespace
}  // namespace masa
