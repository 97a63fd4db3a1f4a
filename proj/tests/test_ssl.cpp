#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "metabdc/error.hpp"
#include "metabdc/gradcheck.hpp"
#include "metabdc/ops.hpp"
#include "metabdc/ssl.hpp"
#include "support.hpp"

namespace metabdc {
namespace {

using testing::random_array;
using testing::random_unit_rows;
using testing::tiny_encoder;

// Direct transcription of the subset loss with the temperature-scaled dummy
// scalar; no shared helpers with the library.
double direct_loss(const ArrayD& a, const ArrayD& b, const std::vector<std::size_t>& subset, std::size_t k,
                   double theta, double tau) {
  const std::size_t n = a.dim(0), p = a.dim(1);
  auto dot = [p](const ArrayD& x, std::size_t i, const ArrayD& y, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < p; ++c) s += x.at(i, c) * y.at(j, c);
    return s;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (subset[i] != k) continue;
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (subset[j] != k) continue;
      if (j != i) denom += std::exp(dot(a, i, a, j) * theta / tau);
      denom += std::exp(dot(a, i, b, j) * theta / tau);
    }
    total += -std::log(std::exp(dot(a, i, b, i) * theta / tau) / denom);
  }
  return total;
}

SslBatch random_batch(std::size_t n, std::size_t p, SeededRng& rng) {
  SslBatch b{random_unit_rows(n, p, rng), {}, {}};
  b.view_b = b.view_a;
  for (auto& v : b.view_b.vec()) v += rng.normal(0.0, 0.4);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += b.view_b.at(i, j) * b.view_b.at(i, j);
    for (std::size_t j = 0; j < p; ++j) b.view_b.at(i, j) /= std::sqrt(s);
  }
  b.subset.resize(n);
  for (std::size_t i = 0; i < n; ++i) b.subset[i] = i % 2 == 0 ? 0 : rng.uniform_index(2);
  b.subset[1] = 1;
  return b;
}

TEST(ContrastiveLoss, MatchesDirectFormula) {
  SeededRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    SslBatch b = random_batch(7, 4, rng);
    const double theta = rng.uniform(0.5, 1.5);
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_NEAR(contrastive_loss(b, k, theta, 0.5), direct_loss(b.view_a, b.view_b, b.subset, k, theta, 0.5),
                  1e-10);
    }
  }
}

TEST(ContrastiveLoss, EmptySubsetIsAnError) {
  SeededRng rng(4);
  SslBatch b = random_batch(5, 3, rng);
  std::fill(b.subset.begin(), b.subset.end(), 0);
  EXPECT_THROW(contrastive_loss(b, 1, 1.0, 0.5), Error);
  EXPECT_THROW(irm_penalty(b, 1, 0.5), Error);
}

TEST(IrmPenalty, MatchesSquaredCentralDifferenceOverTheta) {
  SeededRng rng(11);
  const double tau = 0.5, h = 1e-5;
  for (int trial = 0; trial < 50; ++trial) {
    SslBatch b = random_batch(4 + trial % 9, 3 + trial % 4, rng);
    for (std::size_t k = 0; k < 2; ++k) {
      const double fd = (contrastive_loss(b, k, 1.0 + h, tau) - contrastive_loss(b, k, 1.0 - h, tau)) / (2 * h);
      const double analytic = irm_penalty(b, k, tau);
      EXPECT_LE(std::abs(analytic - fd * fd) / std::max(fd * fd, 1e-12), 1e-6) << "trial " << trial;
    }
  }
}

TEST(SubsetTerm, GraphAgreesWithFixedEmbeddingPath) {
  SeededRng rng(5);
  SslBatch b = random_batch(6, 4, rng);
  for (std::size_t k = 0; k < 2; ++k) {
    Graph<double> g;
    NodeId za = g.input("a", {6, 4});
    NodeId zb = g.input("b", {6, 4});
    ArrayD w({6});
    for (std::size_t i = 0; i < 6; ++i) w[i] = b.subset[i] == k ? 1.0 : 0.0;
    SubsetTerm t = build_subset_term(g, za, zb, g.constant(w), 0.5);
    g.forward({{"a", b.view_a}, {"b", b.view_b}});
    EXPECT_NEAR(g.value(t.loss)[0], contrastive_loss(b, k, 1.0, 0.5), 1e-10);
    EXPECT_NEAR(g.value(t.dtheta)[0], contrastive_dtheta(b, k, 0.5), 1e-10);
    EXPECT_DOUBLE_EQ(g.value(t.count)[0], static_cast<double>(std::count(b.subset.begin(), b.subset.end(), k)));
  }
}

TEST(SubsetTerm, GradientCheckLossAndPenalty) {
  SeededRng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ArrayD> point = {random_array({5, 3}, rng), random_array({5, 3}, rng),
                                 random_array({5}, rng)};
    auto fn = [](Graph<double>& g, std::span<const NodeId> in) {
      NodeId w = ops::sigmoid(g, in[2]);
      SubsetTerm t = build_subset_term(g, in[0], in[1], w, 0.5);
      NodeId penalty = ops::square(g, ops::div(g, t.dtheta, t.count));
      return ops::add(g, ops::div(g, t.loss, t.count), ops::scale(g, penalty, 0.7));
    };
    EXPECT_LE(grad_check(fn, point), 1e-4) << "trial " << trial;
  }
}

TEST(SimclrLoss, GradientCheck) {
  SeededRng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ArrayD> point = {random_array({4, 3}, rng), random_array({4, 3}, rng)};
    auto fn = [](Graph<double>& g, std::span<const NodeId> in) { return build_simclr_loss(g, in[0], in[1], 0.5); };
    EXPECT_LE(grad_check(fn, point), 1e-4) << "trial " << trial;
  }
}

TEST(SimclrLoss, EqualsTrivialSubsetMean) {
  SeededRng rng(8);
  SslBatch b = random_batch(6, 3, rng);
  std::fill(b.subset.begin(), b.subset.end(), 0);
  Graph<double> g;
  NodeId za = g.input("a", {6, 3});
  NodeId zb = g.input("b", {6, 3});
  NodeId loss = build_simclr_loss(g, za, zb, 0.5);
  g.forward({{"a", b.view_a}, {"b", b.view_b}});
  EXPECT_NEAR(g.value(loss)[0], contrastive_loss(b, 0, 1.0, 0.5) / 6.0, 1e-12);
}

std::vector<ArrayD> random_images(std::size_t n, const EncoderConfig& enc, SeededRng& rng) {
  std::vector<ArrayD> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_array({enc.height, enc.width, enc.channels}, rng));
  return out;
}

TEST(Pretrain, TrivialPartitionWithoutPenaltyReproducesSimclr) {
  const EncoderConfig enc = tiny_encoder();
  SeededRng data_rng(9);
  const std::vector<ArrayD> images = random_images(12, enc, data_rng);
  PretrainConfig cfg;
  cfg.mode = PretrainMode::simclr;
  cfg.epochs = 3;
  cfg.batch_size = 6;
  cfg.base_lr = 0.05;
  cfg.ipirm.lambda1 = 0.0;
  cfg.ipirm.outer_iterations = 0;
  SeededRng r1(21), r2(21);
  auto simclr = pretrain<double>(enc, images, cfg, r1);
  cfg.mode = PretrainMode::ipirm;
  auto ipirm = pretrain<double>(enc, images, cfg, r2);
  ASSERT_EQ(ipirm.partitions.size(), 1u);
  ASSERT_EQ(simclr.trace.size(), ipirm.trace.size());
  ASSERT_EQ(simclr.trace.size(), 6u);
  for (std::size_t i = 0; i < simclr.trace.size(); ++i) {
    EXPECT_LE(std::abs(simclr.trace[i].loss - ipirm.trace[i].loss), 1e-12) << "step " << i;
  }
}

TEST(Pretrain, StepsReduceObjectiveOnAFixedBatch) {
  const EncoderConfig enc = tiny_encoder();
  SeededRng rng(10);
  const std::vector<ArrayD> images = random_images(8, enc, rng);
  auto params = init_encoder<double>(enc, rng);
  ViewBatch<double> vb;
  AugmentConfig aug;
  auto views = augment_views<double>(images, aug, rng);
  vb.view_a = pack_images<double>(views.first, enc);
  vb.view_b = pack_images<double>(views.second, enc);
  for (std::size_t i = 0; i < 8; ++i) vb.indices.push_back(i);
  PartitionSet parts(8);
  parts.append(PartitionMatrix({0, 1, 0, 1, 0, 1, 0, 1}));
  IpIrmConfig cfg;
  Sgd<double> sgd(params, {0.0, 0.0});
  const double first = ipirm_step(params, enc, parts, vb, cfg, sgd, 0.05).objective;
  double last = first;
  for (int s = 0; s < 30; ++s) last = ipirm_step(params, enc, parts, vb, cfg, sgd, 0.05).objective;
  EXPECT_LT(last, first);
}

TEST(Pretrain, DegeneratePartitionOnBatchIsSkipped) {
  const EncoderConfig enc = tiny_encoder();
  SeededRng rng(12);
  const std::vector<ArrayD> images = random_images(4, enc, rng);
  auto params = init_encoder<double>(enc, rng);
  ViewBatch<double> vb;
  vb.view_a = vb.view_b = pack_images<double>(images, enc);
  vb.indices = {0, 1, 2, 3};
  PartitionSet parts(6);
  parts.append(PartitionMatrix({0, 0, 0, 0, 1, 1}));
  Sgd<double> sgd(params, {});
  EXPECT_EQ(ipirm_step(params, enc, parts, vb, IpIrmConfig{}, sgd, 0.01).skipped_partitions, 1u);
}

double exhaustive_max(const ArrayD& a, const ArrayD& b, const IpIrmConfig& cfg) {
  const std::size_t n = a.dim(0);
  double best = -INFINITY;
  for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
    std::vector<std::uint8_t> assign(n);
    for (std::size_t i = 0; i < n; ++i) assign[i] = (mask >> i) & 1u;
    best = std::max(best, partition_objective(a, b, PartitionMatrix(assign), cfg.lambda2, cfg.tau, cfg.reduction));
  }
  return best;
}

TEST(PartitionSearch, ReachesExhaustiveOptimumOnSmallInstances) {
  const EncoderConfig enc = tiny_encoder();
  const AugmentConfig aug;
  IpIrmConfig cfg;
  int good = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    SeededRng rng(seed);
    const std::vector<ArrayD> images = random_images(8, enc, rng);
    auto params = init_encoder<double>(enc, rng);
    // Nonzero biases keep every projection away from the all-dead relu case.
    for (const auto& name : params.names()) {
      for (auto& v : params.value(name).vec()) v += rng.normal(0.0, 0.1);
    }
    SeededRng search(seed + 100), replay(seed + 100);
    PartitionMatrix found = find_partition<double>(params, enc, images, aug, cfg, search);
    auto views = augment_views<double>(images, aug, replay);
    const ArrayD za = project_images<double>(params, enc, views.first);
    const ArrayD zb = project_images<double>(params, enc, views.second);
    const double got = partition_objective(za, zb, found, cfg.lambda2, cfg.tau, cfg.reduction);
    if (got >= 0.95 * exhaustive_max(za, zb, cfg)) ++good;
  }
  EXPECT_GE(good, 9);
}

// Two tight clusters; the positive of each sample is far more similar than
// any other member, so the cluster split keeps all hard negatives together.
void two_cluster_instance(SeededRng& rng, ArrayD& a, ArrayD& b, std::vector<std::uint8_t>& truth) {
  const std::size_t n = 8, p = 4;
  a = ArrayD({n, p});
  b = ArrayD({n, p});
  truth.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    truth[i] = i < n / 2 ? 0 : 1;
    const double sign = truth[i] == 0 ? 1.0 : -1.0;
    for (ArrayD* v : {&a, &b}) {
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) {
        const double center = j == 0 ? sign : 0.0;
        v->at(i, j) = center + rng.normal(0.0, 0.15);
        s += v->at(i, j) * v->at(i, j);
      }
      for (std::size_t j = 0; j < p; ++j) v->at(i, j) /= std::sqrt(s);
    }
  }
}

bool same_split(const PartitionMatrix& p, const std::vector<std::uint8_t>& truth) {
  bool direct = true, flipped = true;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    direct = direct && p.subset(i) == truth[i];
    flipped = flipped && p.subset(i) != truth[i];
  }
  return direct || flipped;
}

TEST(PartitionSearch, RecoversTwoClusterSplit) {
  IpIrmConfig cfg;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SeededRng rng(seed);
    ArrayD a, b;
    std::vector<std::uint8_t> truth;
    two_cluster_instance(rng, a, b, truth);
    const double oracle = partition_objective(a, b, PartitionMatrix(truth), cfg.lambda2, cfg.tau, cfg.reduction);
    EXPECT_NEAR(exhaustive_max(a, b, cfg), oracle, 1e-12) << "seed " << seed;
    SeededRng search(seed + 50);
    EXPECT_TRUE(same_split(search_partition(a, b, cfg, search), truth)) << "seed " << seed;
  }
}

TEST(PartitionSearch, RejectsTinyOrMismatchedInput) {
  IpIrmConfig cfg;
  SeededRng rng(1);
  EXPECT_THROW(search_partition(ArrayD({1, 3}), ArrayD({1, 3}), cfg, rng), Error);
  EXPECT_THROW(search_partition(ArrayD({4, 3}), ArrayD({4, 2}), cfg, rng), ShapeError);
}

TEST(Partitions, SetStartsTrivialAndChecksSize) {
  PartitionSet set(4);
  ASSERT_EQ(set.size(), 1u);
  EXPECT_EQ(set[0], PartitionMatrix::trivial(4));
  EXPECT_TRUE(set[0].degenerate());
  set.append(PartitionMatrix({0, 1, 1, 0}));
  EXPECT_EQ(set.size(), 2u);
  EXPECT_EQ(set[1].count(1), 2u);
  EXPECT_THROW(set.append(PartitionMatrix({0, 1})), Error);
  EXPECT_THROW(PartitionMatrix({0, 2}), Error);
  const ArrayD oh = set[1].one_hot();
  EXPECT_EQ(oh.at(1, 1), 1.0);
  EXPECT_EQ(oh.at(1, 0), 0.0);
}

TEST(Augment, IdentityCopiesAndRandomViewsKeepShape) {
  SeededRng rng(2);
  std::vector<ArrayF> images = {ArrayF({8, 8, 1}, 0.5f), ArrayF({8, 8, 1}, -1.0f)};
  AugmentConfig id;
  id.identity = true;
  auto same = augment_views<float>(images, id, rng);
  EXPECT_EQ(same.first[0].vec(), images[0].vec());
  EXPECT_EQ(same.second[1].vec(), images[1].vec());

  AugmentConfig cfg;
  SeededRng r1(5), r2(5);
  auto v1 = augment_views<float>(images, cfg, r1);
  auto v2 = augment_views<float>(images, cfg, r2);
  EXPECT_EQ(v1.first[1].shape(), (Shape{8, 8, 1}));
  EXPECT_EQ(v1.first[1].vec(), v2.first[1].vec());
  EXPECT_NE(v1.first[0].vec(), v1.second[0].vec());

  cfg.crop_scale_min = 0.0;
  EXPECT_THROW(augment_views<float>(images, cfg, rng), Error);
}

}  // namespace
}  // namespace metabdc
