#include <gtest/gtest.h>

#include "metabdc/bdc.hpp"
#include "metabdc/gradcheck.hpp"
#include "metabdc/ops.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace metabdc;
using metabdc::testing::bdc_oracle;
using metabdc::testing::random_array;

TEST(Bdc, HandComputedTwoChannelCase) {
  // Channels (0,0) and (3,4) are 5 apart; centering gives +-2.5.
  FeatureMap<double> fm{ArrayD({2, 2}, {0.0, 0.0, 3.0, 4.0})};
  BdcMatrix<double> m = bdc_matrix(fm);
  EXPECT_NEAR(m.values.at(0, 0), -2.5, 1e-12);
  EXPECT_NEAR(m.values.at(0, 1), 2.5, 1e-12);
  EXPECT_NEAR(m.values.at(1, 0), 2.5, 1e-12);
  EXPECT_NEAR(m.values.at(1, 1), -2.5, 1e-12);
}

TEST(Bdc, MatchesLoopOracleWithInvariants) {
  SeededRng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + rng.uniform_index(7), m = 2 + rng.uniform_index(9);
    FeatureMap<double> fm{random_array({d, m}, rng)};
    BdcMatrix<double> got = bdc_matrix(fm);
    const auto want = bdc_oracle(fm.values);
    for (std::size_t i = 0; i < d; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        EXPECT_NEAR(got.values.at(i, j), want[i * d + j], 1e-10);
        EXPECT_NEAR(got.values.at(i, j), got.values.at(j, i), 1e-12);
        row += got.values.at(i, j);
      }
      EXPECT_NEAR(row, 0.0, 1e-10);
    }
  }
}

TEST(Bdc, ConstantChannelsGiveZeroMatrix) {
  FeatureMap<double> fm{ArrayD({3, 4}, 2.0)};
  BdcMatrix<double> m = bdc_matrix(fm);
  for (double v : m.values.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Bdc, RejectsTinyAndNonFiniteInputs) {
  EXPECT_THROW(bdc_matrix(FeatureMap<double>{ArrayD({1, 4}, 1.0)}), Error);
  EXPECT_THROW(bdc_matrix(FeatureMap<double>{ArrayD({3, 1}, 1.0)}), Error);
  ArrayD bad({2, 2}, 1.0);
  bad[3] = std::nan("");
  EXPECT_THROW(bdc_matrix(FeatureMap<double>{bad}), NumericError);
}

TEST(Bdc, GraphBuilderMatchesStandalone) {
  SeededRng rng(22);
  ArrayD fms = random_array({3, 4, 6}, rng);
  Graph<double> g;
  NodeId in = g.input("fm", fms.shape());
  NodeId out = build_bdc(g, in, false);
  g.forward({{"fm", fms}});
  const ArrayD& v = g.value(out);
  for (std::size_t b = 0; b < 3; ++b) {
    ArrayD one({4, 6}, std::vector<double>(fms.vec().begin() + b * 24, fms.vec().begin() + (b + 1) * 24));
    const auto want = bdc_oracle(one);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(v.at(b, k), want[k], 1e-12);
  }
}

TEST(Bdc, MatrixGradientMatchesFiniteDifferences) {
  SeededRng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    ArrayD fm = random_array({2, 4, 5}, rng);
    ArrayD w = random_array({2, 16}, rng);
    const double err = grad_check(
        [&](Graph<double>& g, std::span<const NodeId> x) {
          return ops::sum(g, ops::mul(g, build_bdc(g, x[0], trial % 2 == 1), g.constant(w)));
        },
        std::vector<ArrayD>{fm});
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
}

TEST(Bdc, NormalizeFrobenius) {
  BdcMatrix<double> m{ArrayD({2, 2}, {3.0, 0.0, 0.0, 4.0})};
  BdcMatrix<double> n = normalize_frobenius(m);
  EXPECT_NEAR(n.values[0], 0.6, 1e-12);
  EXPECT_NEAR(n.values[3], 0.8, 1e-12);
  BdcMatrix<double> z{ArrayD({2, 2}, 0.0)};
  EXPECT_EQ(normalize_frobenius(z).values, z.values);
}

TEST(Bdc, PrototypesAverageSupport) {
  std::vector<BdcMatrix<double>> support{{ArrayD({2, 2}, 1.0)}, {ArrayD({2, 2}, 3.0)}, {ArrayD({2, 2}, -1.0)},
                                         {ArrayD({2, 2}, -3.0)}};
  std::vector<std::size_t> labels{0, 0, 1, 1};
  auto protos = class_prototypes<double>(support, labels, 2, 2);
  ASSERT_EQ(protos.size(), 2u);
  EXPECT_NEAR(protos[0].matrix.values[0], 2.0, 1e-12);
  EXPECT_NEAR(protos[1].matrix.values[0], -2.0, 1e-12);
  std::vector<std::size_t> unbalanced{0, 0, 0, 1};
  EXPECT_THROW(class_prototypes<double>(support, unbalanced, 2, 2), Error);
}

TEST(Bdc, EpisodeClassifyProbabilitiesSumToOne) {
  SeededRng rng(24);
  std::vector<Prototype<double>> protos;
  for (std::size_t c = 0; c < 3; ++c) protos.push_back({c, {random_array({3, 3}, rng)}});
  std::vector<BdcMatrix<double>> queries{{random_array({3, 3}, rng)}, {protos[1].matrix.values}};
  for (BdcMetric metric : {BdcMetric::neg_sq_distance, BdcMetric::inner_product}) {
    EpisodeLogits<double> out = episode_classify<double>(queries, protos, metric, 0.5);
    for (std::size_t q = 0; q < 2; ++q) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += out.probabilities.at(q, c);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    if (metric == BdcMetric::neg_sq_distance) EXPECT_EQ(out.predicted(1), 1u);
  }
}

TEST(Bdc, GraphEpisodeLogitsMatchStandalone) {
  SeededRng rng(25);
  ArrayD s = random_array({4, 9}, rng), q = random_array({3, 9}, rng);
  const std::vector<std::size_t> labels{0, 1, 0, 1};
  for (BdcMetric metric : {BdcMetric::neg_sq_distance, BdcMetric::inner_product}) {
    BdcHeadConfig head{metric, 0.25, false};
    Graph<double> g;
    NodeId sn = g.input("s", s.shape()), qn = g.input("q", q.shape());
    NodeId out = build_episode_logits(g, sn, labels, 2, qn, head);
    g.forward({{"s", s}, {"q", q}});
    std::vector<BdcMatrix<double>> sup, qry;
    for (std::size_t i = 0; i < 4; ++i) {
      sup.push_back({ArrayD({3, 3}, std::vector<double>(s.vec().begin() + i * 9, s.vec().begin() + (i + 1) * 9))});
    }
    for (std::size_t i = 0; i < 3; ++i) {
      qry.push_back({ArrayD({3, 3}, std::vector<double>(q.vec().begin() + i * 9, q.vec().begin() + (i + 1) * 9))});
    }
    auto protos = class_prototypes<double>(sup, labels, 2, 2);
    EpisodeLogits<double> ref = episode_classify<double>(qry, protos, metric, 0.25);
    // The graph logits are divided by the temperature; the standalone
    // similarity is raw.
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(g.value(out)[k], ref.similarity[k] / 0.25, 1e-10);
  }
}
