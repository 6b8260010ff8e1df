#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "stressprompt/fixture.hpp"
#include "stressprompt/rater_stats.hpp"

using namespace stressprompt;

namespace {

AnnotationMatrix random_matrix(std::mt19937_64& rng, std::size_t raters, std::size_t prompts) {
  std::vector<std::string> r, p;
  for (std::size_t i = 0; i < raters; ++i) r.push_back("r" + std::to_string(i));
  for (std::size_t i = 0; i < prompts; ++i) p.push_back("p" + std::to_string(i));
  AnnotationMatrix m(r, p);
  std::uniform_int_distribution<int> level(1, 10);
  std::normal_distribution<double> noise(0.0, 1.5);
  for (std::size_t c = 0; c < prompts; ++c) {
    const int base = level(rng);
    for (std::size_t i = 0; i < raters; ++i) {
      m.set(i, c, std::clamp(static_cast<int>(std::lround(base + noise(rng))), 1, 10));
    }
  }
  return m;
}

oracle::Matrix raters_by_prompts(const AnnotationMatrix& m) {
  oracle::Matrix x(m.n_raters(), std::vector<double>(m.n_prompts()));
  for (std::size_t r = 0; r < m.n_raters(); ++r)
    for (std::size_t p = 0; p < m.n_prompts(); ++p) x[r][p] = m.at(r, p);
  return x;
}

oracle::Matrix prompts_by_raters(const AnnotationMatrix& m) {
  oracle::Matrix x(m.n_prompts(), std::vector<double>(m.n_raters()));
  for (std::size_t r = 0; r < m.n_raters(); ++r)
    for (std::size_t p = 0; p < m.n_prompts(); ++p) x[p][r] = m.at(r, p);
  return x;
}

RankGrid grid_from(const oracle::Matrix& blocks) {
  RankGrid g;
  g.blocks = blocks.size();
  g.treatments = blocks[0].size();
  for (const auto& b : blocks) g.values.insert(g.values.end(), b.begin(), b.end());
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cronbach's alpha

TEST(CronbachAlpha, IdenticalRatersGiveOne) {
  AnnotationMatrix m({"a", "b"}, {"p1", "p2", "p3"});
  const int v[] = {2, 5, 9};
  for (std::size_t p = 0; p < 3; ++p) {
    m.set(0, p, v[p]);
    m.set(1, p, v[p]);
  }
  EXPECT_DOUBLE_EQ(cronbach_alpha(m), 1.0);
}

TEST(CronbachAlpha, MatchesCovarianceFormOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_matrix(rng, 5, 8);
    EXPECT_NEAR(cronbach_alpha(m), oracle::alpha_covariance(raters_by_prompts(m)), 1e-9);
  }
}

TEST(CronbachAlpha, InvariantUnderShiftAndColumnPermutation) {
  std::mt19937_64 rng(6);
  const auto m = random_matrix(rng, 6, 12);
  // Ratings cannot leave 1..10, so the shift is applied to the oracle's
  // real-valued copy.
  auto x = raters_by_prompts(m);
  for (auto& row : x)
    for (auto& v : row) v += 17.0;
  EXPECT_NEAR(oracle::alpha_covariance(x), cronbach_alpha(m), 1e-9);

  std::vector<std::size_t> order(m.n_prompts());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  EXPECT_NEAR(cronbach_alpha(m.permute_prompts(order)), cronbach_alpha(m), 1e-12);
}

TEST(CronbachAlpha, ZeroTotalVarianceIsAnError) {
  AnnotationMatrix m({"a", "b"}, {"p1", "p2"});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t p = 0; p < 2; ++p) m.set(r, p, 4);
  EXPECT_THROW(cronbach_alpha(m), Error);
}

TEST(CronbachAlpha, SingleRaterIsAnError) {
  AnnotationMatrix m({"a"}, {"p1", "p2"});
  m.set(0, 0, 1);
  m.set(0, 1, 2);
  EXPECT_THROW(cronbach_alpha(m), Error);
}

// ---------------------------------------------------------------------------
// Friedman

TEST(Friedman, UnanimousRankingIsExactlyNTimesKMinusOne) {
  oracle::Matrix blocks(4, std::vector<double>{1, 2, 3});
  const auto r = friedman_test(grid_from(blocks));
  EXPECT_EQ(r.chi2, 8.0);
  EXPECT_EQ(r.dof, 2);

  oracle::Matrix big(20, std::vector<double>{3, 1, 4, 1.5, 9, 2.6, 5, 3.5, 8, 7});
  EXPECT_EQ(friedman_test(grid_from(big)).chi2, 180.0);
}

TEST(Friedman, MatchesRankDefinitionOracleWithTies) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> small(1, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 7, k = 3 + trial % 10;
    oracle::Matrix blocks(n, std::vector<double>(k));
    for (auto& b : blocks)
      for (auto& v : b) v = small(rng);
    // a block with all ties contributes nothing; make sure not every block is constant
    blocks[0][0] = 0;
    EXPECT_NEAR(friedman_test(grid_from(blocks)).chi2, oracle::friedman_q(blocks), 1e-9);
  }
}

TEST(Friedman, BoundedWithoutTies) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 9, k = 3 + trial % 6;
    oracle::Matrix blocks(n, std::vector<double>(k));
    for (auto& b : blocks)
      for (auto& v : b) v = u(rng);
    const auto q = friedman_test(grid_from(blocks)).chi2;
    EXPECT_GE(q, 0.0);
    EXPECT_LE(q, static_cast<double>(n * (k - 1)) + 1e-9);
  }
}

TEST(Friedman, InvariantUnderMonotoneTransformWithinBlocks) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.1, 3);
  oracle::Matrix blocks(6, std::vector<double>(5));
  for (auto& b : blocks)
    for (auto& v : b) v = u(rng);
  auto transformed = blocks;
  for (std::size_t i = 0; i < transformed.size(); ++i)
    for (auto& v : transformed[i]) v = std::exp(v) * static_cast<double>(i + 1) - 3.0;
  EXPECT_EQ(friedman_test(grid_from(blocks)).chi2, friedman_test(grid_from(transformed)).chi2);
}

TEST(Friedman, PValueMatchesChiSquareTail) {
  // Upper tail of chi-square(2) is exp(-x/2).
  EXPECT_NEAR(chi_square_upper_tail(3.0, 2), std::exp(-1.5), 1e-12);
  // chi-square(1): erfc(sqrt(x/2)).
  EXPECT_NEAR(chi_square_upper_tail(2.5, 1), std::erfc(std::sqrt(1.25)), 1e-12);
  // Reference values from scipy.stats.chi2.sf.
  EXPECT_NEAR(chi_square_upper_tail(40.0, 9) / 7.598525229464264e-06, 1.0, 1e-10);
  EXPECT_NEAR(chi_square_upper_tail(12.5, 7), 0.08526927515826925, 1e-12);
  EXPECT_NEAR(chi_square_upper_tail(283.2, 99) / 1.1812314817346502e-19, 1.0, 1e-8);
  EXPECT_EQ(format_p(1e-5), "p < 0.001");
  EXPECT_EQ(format_p(0.0123), "p = 0.0123");
}

TEST(Friedman, MonteCarloNullIsCalibrated) {
  // Under H0 with continuous entries, P(Q >= chi2_crit) should be near the
  // nominal level and the p-values roughly uniform.
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 1);
  const std::size_t n = 30, k = 5, runs = 10000;
  std::size_t below_05 = 0, below_50 = 0;
  for (std::size_t run = 0; run < runs; ++run) {
    oracle::Matrix blocks(n, std::vector<double>(k));
    for (auto& b : blocks)
      for (auto& v : b) v = u(rng);
    const auto r = friedman_test(grid_from(blocks));
    below_05 += r.p < 0.05 ? 1 : 0;
    below_50 += r.p < 0.5 ? 1 : 0;
  }
  EXPECT_NEAR(static_cast<double>(below_05) / runs, 0.05, 0.012);
  EXPECT_NEAR(static_cast<double>(below_50) / runs, 0.50, 0.03);
}

TEST(Friedman, EntirelyMissingBlockIsAnError) {
  RankGrid g = grid_from(oracle::Matrix{{1, 2, 3}, {1, 2, 3}});
  const double nan = std::numeric_limits<double>::quiet_NaN();
  g.values.insert(g.values.end(), {nan, nan, nan});
  g.blocks = 3;
  EXPECT_THROW(friedman_test(g), Error);
}

TEST(Friedman, PartiallyMissingBlocksAreDropped) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  RankGrid g = grid_from(oracle::Matrix{{1, 2, 3}, {1, 2, 3}, {1, 3, 2}});
  g.values.insert(g.values.end(), {nan, 2, 3});
  g.blocks = 4;
  const auto r = friedman_test(g);
  EXPECT_EQ(r.n_dropped, 1u);
  EXPECT_EQ(r.n_blocks, 3u);
  EXPECT_NEAR(r.chi2, oracle::friedman_q({{1, 2, 3}, {1, 2, 3}, {1, 3, 2}}), 1e-12);
}

TEST(Friedman, OrientationsOnAMatrix) {
  std::mt19937_64 rng(12);
  const auto m = random_matrix(rng, 8, 12);
  EXPECT_NEAR(friedman_test(friedman_grid(m, FriedmanOrientation::RatersByPrompts)).chi2,
              oracle::friedman_q(raters_by_prompts(m)), 1e-9);
  EXPECT_NEAR(friedman_test(friedman_grid(m, FriedmanOrientation::PromptsByRaters)).chi2,
              oracle::friedman_q(prompts_by_raters(m)), 1e-9);
}

TEST(Friedman, RatersByLevelsUsesLevelMeans) {
  const auto fx = generate_fixture();
  const auto levels = levels_from_matrix(fx.annotations);
  const auto grid = friedman_grid(fx.annotations, FriedmanOrientation::RatersByLevels, levels);
  EXPECT_EQ(grid.blocks, 20u);
  EXPECT_EQ(grid.treatments, 10u);
  // Oracle: each rater's mean rating per level, computed directly.
  oracle::Matrix blocks(20, std::vector<double>(10, 0.0));
  std::vector<double> count(10, 0.0);
  for (std::size_t p = 0; p < fx.annotations.n_prompts(); ++p) {
    const int l = levels.at(fx.annotations.prompts()[p]);
    count[static_cast<std::size_t>(l - 1)] += 1.0;
    for (std::size_t r = 0; r < 20; ++r) blocks[r][static_cast<std::size_t>(l - 1)] += fx.annotations.at(r, p);
  }
  for (auto& b : blocks)
    for (std::size_t l = 0; l < 10; ++l) b[l] /= count[l];
  EXPECT_NEAR(friedman_test(grid).chi2, oracle::friedman_q(blocks), 1e-9);
}

// ---------------------------------------------------------------------------
// ICC

TEST(Icc, MatchesExplicitAnovaOracle) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_matrix(rng, 6, 10);
    const auto rep = icc2_report(m);
    const auto a = oracle::two_way_anova(prompts_by_raters(m));
    EXPECT_NEAR(rep.ms_subjects, a.ms_rows, 1e-9);
    EXPECT_NEAR(rep.ms_raters, a.ms_cols, 1e-9);
    EXPECT_NEAR(rep.ms_error, a.ms_err, 1e-9);
    EXPECT_NEAR(rep.single.icc, oracle::icc21(prompts_by_raters(m)), 1e-9);
  }
}

TEST(Icc, PerfectAgreementIsOne) {
  AnnotationMatrix m({"a", "b", "c"}, {"p1", "p2", "p3", "p4"});
  const int v[] = {1, 4, 6, 10};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t p = 0; p < 4; ++p) m.set(r, p, v[p]);
  const auto rep = icc2_report(m);
  EXPECT_DOUBLE_EQ(rep.single.icc, 1.0);
  EXPECT_DOUBLE_EQ(rep.average.icc, 1.0);
  EXPECT_LE(rep.single.ci_low, rep.single.icc);
  EXPECT_GE(rep.single.ci_high, rep.single.icc);
}

TEST(Icc, SingleNotAboveAverageAndCiBracketsEstimate) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_matrix(rng, 2 + trial % 7, 4 + trial % 9);
    IccReport rep;
    try {
      rep = icc2_report(m);
    } catch (const Error&) {
      continue;
    }
    if (rep.single.icc > 0) {
      EXPECT_LE(rep.single.icc, rep.average.icc + 1e-12);
    }
    EXPECT_LE(rep.single.ci_low, rep.single.icc + 1e-12);
    EXPECT_GE(rep.single.ci_high, rep.single.icc - 1e-12);
  }
}

TEST(Icc, ConfidenceIntervalAgainstReferenceValues) {
  // Shrout & Fleiss (1979) example: 6 targets x 4 judges.
  const int data[6][4] = {{9, 2, 5, 8}, {6, 1, 3, 2}, {8, 4, 6, 8}, {7, 1, 2, 6}, {10, 5, 6, 9}, {6, 2, 4, 7}};
  AnnotationMatrix m({"j1", "j2", "j3", "j4"}, {"t1", "t2", "t3", "t4", "t5", "t6"});
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 4; ++j) m.set(j, t, data[t][j]);
  const auto rep = icc2_report(m);
  EXPECT_NEAR(rep.single.icc, 0.29, 0.005);
  EXPECT_NEAR(rep.average.icc, 0.62, 0.005);
  // Published interval for ICC(2,1): [0.019, 0.761].
  EXPECT_NEAR(rep.single.ci_low, 0.019, 0.002);
  EXPECT_NEAR(rep.single.ci_high, 0.761, 0.002);
}

TEST(Icc, MissingEntriesAreRejected) {
  AnnotationMatrix m({"a", "b"}, {"p1", "p2", "p3"});
  m.set(0, 0, 1);
  m.set(0, 1, 2);
  m.set(0, 2, 3);
  m.set(1, 0, 1);
  m.set(1, 1, 2);
  EXPECT_THROW(icc2_report(m), Error);
}

TEST(Icc, InvariantUnderColumnPermutation) {
  std::mt19937_64 rng(15);
  const auto m = random_matrix(rng, 5, 9);
  std::vector<std::size_t> order(m.n_prompts());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  EXPECT_NEAR(icc2_report(m.permute_prompts(order)).single.icc, icc2_report(m).single.icc, 1e-12);
  EXPECT_NEAR(friedman_test(friedman_grid(m.permute_prompts(order), FriedmanOrientation::PromptsByRaters)).chi2,
              friedman_test(friedman_grid(m, FriedmanOrientation::PromptsByRaters)).chi2, 1e-9);
}

// ---------------------------------------------------------------------------
// Report

TEST(ReliabilityReport, FixtureJsonCarriesAllFields) {
  const auto fx = generate_fixture();
  const auto rep = reliability_report(fx.annotations, FriedmanOrientation::RatersByLevels,
                                      levels_from_matrix(fx.annotations));
  const auto j = to_json(rep);
  for (const char* key : {"cronbach_alpha", "friedman_chi2", "friedman_dof", "friedman_p", "icc2_single",
                          "icc2_ci_low", "icc2_ci_high", "n_raters", "n_subjects"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["n_raters"], 20);
  EXPECT_EQ(j["n_subjects"], 100);
  EXPECT_EQ(rep.friedman_all.size(), 3u);
  EXPECT_LE(j["icc2_ci_low"].get<double>(), j["icc2_single"].get<double>());
  EXPECT_LE(j["icc2_single"].get<double>(), j["icc2_ci_high"].get<double>());
  EXPECT_GT(rep.cronbach_alpha, 0.98);
  EXPECT_EQ(rep.n_outliers, 1u);
  EXPECT_NE(format_table(rep).find("p < 0.001"), std::string::npos);
}
