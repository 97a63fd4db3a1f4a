#include <gtest/gtest.h>

#include <cmath>

#include "metabdc/gradcheck.hpp"
#include "metabdc/ops.hpp"
#include "metabdc/optim.hpp"
#include "support.hpp"

using namespace metabdc;

TEST(LrRule, BatchSizeScaling) {
  EXPECT_DOUBLE_EQ(lr_from_batch(256), 0.3);
  EXPECT_DOUBLE_EQ(lr_from_batch(128), 0.15);
  EXPECT_DOUBLE_EQ(lr_from_batch(512), 0.6);
  EXPECT_THROW(lr_from_batch(0), Error);
  EXPECT_THROW(lr_from_batch(-4), Error);
}

TEST(Schedule, CosineEndpointsAndMidpoint) {
  ScheduleConfig c{ScheduleKind::cosine, 0.1, 100, {}, 10.0};
  EXPECT_DOUBLE_EQ(schedule_lr(c, 0), 0.1);
  EXPECT_NEAR(schedule_lr(c, 50), 0.05, 1e-15);
  EXPECT_NEAR(schedule_lr(c, 99), 0.05 * (1.0 + std::cos(M_PI * 0.99)), 1e-15);
  EXPECT_THROW(schedule_lr(c, 100), Error);
}

TEST(Schedule, StepDecay) {
  ScheduleConfig c{ScheduleKind::step, 0.1, 100, {30, 60}, 10.0};
  EXPECT_DOUBLE_EQ(schedule_lr(c, 29), 0.1);
  EXPECT_NEAR(schedule_lr(c, 30), 0.01, 1e-15);
  EXPECT_NEAR(schedule_lr(c, 60), 0.001, 1e-15);
}

TEST(Schedule, NonIncreasing) {
  ScheduleConfig cos{ScheduleKind::cosine, 0.3, 37, {}, 10.0};
  ScheduleConfig step{ScheduleKind::step, 0.3, 37, {5, 20}, 3.0};
  for (std::size_t e = 1; e < 37; ++e) {
    EXPECT_LE(schedule_lr(cos, e), schedule_lr(cos, e - 1));
    EXPECT_LE(schedule_lr(step, e), schedule_lr(step, e - 1));
  }
}

TEST(Schedule, InvalidConfigs) {
  EXPECT_THROW(schedule_lr(ScheduleConfig{ScheduleKind::cosine, 0.1, 0, {}, 10.0}, 0), Error);
  EXPECT_THROW(schedule_lr(ScheduleConfig{ScheduleKind::cosine, -0.1, 10, {}, 10.0}, 0), Error);
}

TEST(Sgd, MomentumAndDecay) {
  ParameterSetD p;
  p.add("w", ArrayD({1}, {1.0}));
  Sgd<double> sgd(p, {0.5, 0.1});
  p.grad("w")[0] = 2.0;
  sgd.step(p, 0.1);  // v = 2 + 0.1, w = 1 - 0.21
  EXPECT_NEAR(p.value("w")[0], 0.79, 1e-12);
  sgd.step(p, 0.1);  // v = 0.5 * 2.1 + 2 + 0.079
  EXPECT_NEAR(p.value("w")[0], 0.79 - 0.1 * (1.05 + 2.0 + 0.079), 1e-12);
}

TEST(Sgd, NonFiniteGradientLeavesParamsUntouched) {
  ParameterSetD p;
  p.add("w", ArrayD({2}, {1.0, 2.0}));
  Sgd<double> sgd(p, {0.9, 0.0});
  p.grad("w")[1] = std::nan("");
  EXPECT_THROW(sgd.step(p, 0.1), NumericError);
  EXPECT_EQ(p.value("w")[0], 1.0);
}

TEST(AucM, MatchesDefinition) {
  std::vector<double> s{0.9, 0.2, 0.6, 0.4};
  std::vector<int> y{1, 0, 1, 0};
  AucMState st{0.5, 0.3, 0.2, 1.0, 0.5};
  AucMResult r = aucm_loss(s, y, st);
  const double pos = ((0.9 - 0.5) * (0.9 - 0.5) + (0.6 - 0.5) * (0.6 - 0.5)) / 2.0;
  const double neg = ((0.2 - 0.3) * (0.2 - 0.3) + (0.4 - 0.3) * (0.4 - 0.3)) / 2.0;
  const double want = 0.5 * pos + 0.5 * neg + 2.0 * 0.2 * (0.25 + 0.5 * 0.3 - 0.5 * 0.75) - 0.25 * 0.04;
  EXPECT_NEAR(r.loss, want, 1e-12);
}

TEST(AucM, GradientsMatchFiniteDifferences) {
  SeededRng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6, c = 3;
    ArrayD scores = metabdc::testing::random_array({n, c}, rng);
    ArrayD a = metabdc::testing::random_array({c}, rng), b = metabdc::testing::random_array({c}, rng);
    ArrayD alpha = metabdc::testing::random_array({c}, rng);
    std::vector<std::size_t> labels{0, 1, 2, 0, 1, trial % 2 == 0 ? 2u : 0u};
    const double err = grad_check(
        [&](Graph<double>& g, std::span<const NodeId> x) {
          return aucm_ovr_loss(g, x[0], x[1], x[2], x[3], labels, {0.3, 0.3, 0.4}, 1.0);
        },
        std::vector<ArrayD>{scores, a, b, alpha});
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
}

TEST(AucM, ScalarGradientsMatchFiniteDifferences) {
  std::vector<double> s{0.9, 0.2, 0.6, 0.4, 0.1};
  std::vector<int> y{1, 0, 1, 0, 0};
  AucMState st{0.4, 0.2, 0.3, 1.0, 0.4};
  AucMResult r = aucm_loss(s, y, st);
  const double h = 1e-6;
  auto f = [&](AucMState x) { return aucm_loss(s, y, x).loss; };
  AucMState up = st, dn = st;
  up.alpha += h;
  dn.alpha -= h;
  EXPECT_NEAR(r.d_alpha, (f(up) - f(dn)) / (2 * h), 1e-7);
  up = dn = st;
  up.a += h;
  dn.a -= h;
  EXPECT_NEAR(r.d_a, (f(up) - f(dn)) / (2 * h), 1e-7);
}

TEST(Pesg, ReducesToGradientDescentWithoutDecays) {
  ParameterSetD p;
  p.add("w", ArrayD({2}, {1.0, -1.0}));
  PesgConfig cfg;
  cfg.lr = 0.1;
  cfg.epoch_decay = 0.0;
  cfg.weight_decay = 0.0;
  Pesg<double> opt(p, cfg, {});
  opt.begin_epoch(0, p);
  p.grad("w")[0] = 1.0;
  p.grad("w")[1] = -2.0;
  opt.step(p);
  EXPECT_NEAR(p.value("w")[0], 0.9, 1e-15);
  EXPECT_NEAR(p.value("w")[1], -0.8, 1e-15);
}

TEST(Pesg, AscentIsProjectedAndDecayRefreshesReference) {
  ParameterSetD p;
  p.add("w", ArrayD({1}, {1.0}));
  p.add("alpha", ArrayD({1}, {0.05}));
  PesgConfig cfg;
  cfg.lr = 0.1;
  cfg.epoch_decay = 1.0;
  cfg.decay_epochs = {2};
  Pesg<double> opt(p, cfg, {"alpha"});
  opt.begin_epoch(0, p);
  p.grad("alpha")[0] = -1.0;  // would go negative
  opt.step(p);
  EXPECT_EQ(p.value("alpha")[0], 0.0);
  p.value("w")[0] = 3.0;
  opt.begin_epoch(2, p);
  EXPECT_NEAR(opt.lr(), 0.01, 1e-15);
  p.zero_grad();
  opt.step(p);  // reference is now 3, so the proximal pull vanishes
  EXPECT_NEAR(p.value("w")[0], 3.0, 1e-15);
}
