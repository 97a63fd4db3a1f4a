// Acceptance checks 1-10. Prints one PASS/FAIL line per criterion and exits
// non-zero when any fails. Optional arguments select criterion numbers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metabdc/bdc.hpp"
#include "metabdc/data.hpp"
#include "metabdc/gradcheck.hpp"
#include "metabdc/metrics.hpp"
#include "metabdc/ops.hpp"
#include "metabdc/optim.hpp"
#include "metabdc/runner.hpp"
#include "metabdc/ssl.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace metabdc;
using metabdc::testing::random_array;
using metabdc::testing::random_unit_rows;
using metabdc::testing::tiny_encoder;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

char buf[512];

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::vector<ArrayD> random_images(std::size_t n, const EncoderConfig& enc, SeededRng& rng) {
  std::vector<ArrayD> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_array({enc.height, enc.width, enc.channels}, rng));
  return out;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const EncoderConfig enc = tiny_encoder();
  double worst_encoder = 0.0, worst_proj = 0.0, worst_con = 0.0, worst_pen = 0.0, worst_bdc = 0.0,
         worst_aucm = 0.0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    SeededRng rng(1000 + trial);

    // Encoder parameters through conv stages and pooling.
    ParameterSetD params = init_encoder<double>(enc, rng);
    for (const auto& name : params.names()) {
      for (auto& v : params.value(name).vec()) v += rng.normal(0.0, 0.1);
    }
    const ArrayD packed = pack_images<double>(random_images(2, enc, rng), enc);
    const ArrayD wf = random_array({2, enc.embedding_channels()}, rng);
    auto encoder_fn = [&](Graph<double>& g) {
      return ops::sum(g, ops::mul(g, build_pool(g, build_encoder(g, enc, g.constant(packed))), g.constant(wf)));
    };
    worst_encoder = std::max(worst_encoder, grad_check_parameters(encoder_fn, params).max_error);

    // Projection head, w.r.t. its parameters and its feature-map input.
    const ArrayD fm = random_array({3, enc.embedding_channels(), enc.positions()}, rng);
    const ArrayD wp = random_array({3, enc.projection_dim}, rng);
    auto proj_fn = [&](Graph<double>& g) {
      return ops::sum(g, ops::mul(g, build_projection(g, g.constant(fm)), g.constant(wp)));
    };
    worst_proj = std::max(worst_proj, grad_check_parameters(proj_fn, params).max_error);
    worst_proj = std::max(worst_proj, grad_check_detailed(
                                          [&](Graph<double>& g, std::span<const NodeId> x) {
                                            return ops::sum(g, ops::mul(g, build_projection(g, x[0]), g.constant(wp)));
                                          },
                                          std::vector<ArrayD>{fm}, 1e-5, &params)
                                          .max_error);

    // Subset contrastive loss and its squared theta-gradient.
    const std::vector<ArrayD> emb = {random_unit_rows(6, 4, rng), random_unit_rows(6, 4, rng),
                                     random_array({6}, rng)};
    worst_con = std::max(worst_con, grad_check(
                                        [](Graph<double>& g, std::span<const NodeId> x) {
                                          SubsetTerm t = build_subset_term(g, x[0], x[1], ops::sigmoid(g, x[2]), 0.5);
                                          return ops::div(g, t.loss, t.count);
                                        },
                                        emb));
    worst_pen = std::max(worst_pen, grad_check(
                                        [](Graph<double>& g, std::span<const NodeId> x) {
                                          SubsetTerm t = build_subset_term(g, x[0], x[1], ops::sigmoid(g, x[2]), 0.5);
                                          return ops::square(g, ops::div(g, t.dtheta, t.count));
                                        },
                                        emb));

    // BDC matrix, raw and normalized.
    const std::vector<ArrayD> maps = {random_array({2, 5, 7}, rng)};
    const ArrayD wb = random_array({2, 25}, rng);
    const bool normalize = trial % 2 == 1;
    worst_bdc = std::max(worst_bdc, grad_check(
                                        [&](Graph<double>& g, std::span<const NodeId> x) {
                                          return ops::sum(g, ops::mul(g, build_bdc(g, x[0], normalize), g.constant(wb)));
                                        },
                                        maps));

    // One-vs-rest AUC-M on softmax scores.
    const std::vector<ArrayD> am = {random_array({7, 3}, rng), random_array({3}, rng), random_array({3}, rng),
                                    random_array({3}, rng)};
    const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2, trial % 3};
    worst_aucm = std::max(worst_aucm, grad_check(
                                          [&](Graph<double>& g, std::span<const NodeId> x) {
                                            NodeId s = ops::weighted_softmax_rows(g, x[0], g.constant(ArrayD({7, 3}, 1.0)));
                                            return aucm_ovr_loss(g, s, x[1], x[2], x[3], labels, {0.3, 0.3, 0.4}, 1.0);
                                          },
                                          am));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double worst = std::max({worst_encoder, worst_proj, worst_con, worst_pen, worst_bdc, worst_aucm});
  Outcome o;
  o.pass = worst <= 1e-4 && secs < 120.0;
  o.detail = fmt("max rel err encoder %.1e projection %.1e contrastive %.1e", worst_encoder, worst_proj, worst_con) +
             fmt(" penalty %.1e bdc %.1e aucm %.1e", worst_pen, worst_bdc, worst_aucm) + fmt(" (%.1fs)", secs);
  return o;
}

// ---------------------------------------------------------------- 2

Outcome bdc_oracle_check() {
  SeededRng rng(2);
  double worst = 0.0, asym = 0.0, rowsum = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + rng.uniform_index(7), m = 2 + rng.uniform_index(9);
    FeatureMap<double> fm{random_array({d, m}, rng)};
    const BdcMatrix<double> got = bdc_matrix(fm);
    const auto want = metabdc::testing::bdc_oracle(fm.values);
    for (std::size_t i = 0; i < d; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        worst = std::max(worst, std::abs(got.values.at(i, j) - want[i * d + j]));
        asym = std::max(asym, std::abs(got.values.at(i, j) - got.values.at(j, i)));
        row += got.values.at(i, j);
      }
      rowsum = std::max(rowsum, std::abs(row));
    }
  }
  return {worst <= 1e-10 && asym <= 1e-10 && rowsum <= 1e-10,
          fmt("100 inputs: max |diff| %.1e, asymmetry %.1e, |row sum| %.1e", worst, asym, rowsum)};
}

// ---------------------------------------------------------------- 3

Outcome simclr_equivalence() {
  const EncoderConfig enc = tiny_encoder();
  SeededRng data_rng(3);
  const std::vector<ArrayD> images = random_images(16, enc, data_rng);
  PretrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.base_lr = 0.05;
  cfg.ipirm.lambda1 = 0.0;
  cfg.ipirm.outer_iterations = 0;  // partition set stays {trivial}
  cfg.mode = PretrainMode::simclr;
  SeededRng r1(33), r2(33);
  const auto simclr = pretrain<double>(enc, images, cfg, r1);
  cfg.mode = PretrainMode::ipirm;
  const auto ipirm = pretrain<double>(enc, images, cfg, r2);
  if (simclr.trace.size() != ipirm.trace.size() || ipirm.partitions.size() != 1) {
    return {false, "trajectories differ in length or partition count"};
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < simclr.trace.size(); ++i) {
    worst = std::max(worst, std::abs(simclr.trace[i].loss - ipirm.trace[i].loss));
  }
  return {worst <= 1e-12, fmt("%.0f steps, max per-step |loss diff| %.1e", static_cast<double>(simclr.trace.size()), worst)};
}

// ---------------------------------------------------------------- 4

Outcome irm_penalty_check() {
  SeededRng rng(4);
  const double tau = 0.5, h = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 4 + trial % 9, p = 3 + trial % 4;
    SslBatch b{random_unit_rows(n, p, rng), random_unit_rows(n, p, rng), std::vector<std::size_t>(n)};
    for (std::size_t i = 0; i < n; ++i) b.subset[i] = rng.uniform_index(2);
    b.subset[0] = 0;
    b.subset[1] = 1;
    const std::size_t k = static_cast<std::size_t>(trial % 2);
    const double fd = (contrastive_loss(b, k, 1.0 + h, tau) - contrastive_loss(b, k, 1.0 - h, tau)) / (2 * h);
    const double analytic = irm_penalty(b, k, tau);
    worst = std::max(worst, std::abs(analytic - fd * fd) / std::max(fd * fd, 1e-300));
  }
  return {worst <= 1e-6, fmt("50 batches, max relative error %.1e", worst)};
}

// ---------------------------------------------------------------- 5

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

Outcome partition_search_check() {
  const EncoderConfig enc = tiny_encoder();
  const AugmentConfig aug;
  const IpIrmConfig cfg;
  int good = 0;
  double worst_ratio = 1.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    SeededRng rng(500 + seed);
    const std::vector<ArrayD> images = random_images(8, enc, rng);
    auto params = init_encoder<double>(enc, rng);
    // Nonzero biases keep every projection away from the all-dead relu case.
    for (const auto& name : params.names()) {
      for (auto& v : params.value(name).vec()) v += rng.normal(0.0, 0.1);
    }
    SeededRng search(seed), replay(seed);
    const PartitionMatrix found = find_partition<double>(params, enc, images, aug, cfg, search);
    const auto views = augment_views<double>(images, aug, replay);
    const ArrayD za = project_images<double>(params, enc, views.first);
    const ArrayD zb = project_images<double>(params, enc, views.second);
    const double ratio = partition_objective(za, zb, found, cfg.lambda2, cfg.tau, cfg.reduction) /
                         exhaustive_max(za, zb, cfg);
    worst_ratio = std::min(worst_ratio, ratio);
    if (ratio >= 0.95) ++good;
  }

  // Two nuisance clusters: the oracle partition splits them.
  SeededRng rng(55);
  const std::size_t n = 8, p = 4;
  ArrayD a({n, p}), b({n, p});
  std::vector<std::uint8_t> truth(n);
  for (std::size_t i = 0; i < n; ++i) {
    truth[i] = i < n / 2 ? 0 : 1;
    for (ArrayD* v : {&a, &b}) {
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) {
        v->at(i, j) = (j == 0 ? (truth[i] == 0 ? 1.0 : -1.0) : 0.0) + rng.normal(0.0, 0.15);
        s += v->at(i, j) * v->at(i, j);
      }
      for (std::size_t j = 0; j < p; ++j) v->at(i, j) /= std::sqrt(s);
    }
  }
  SeededRng search(77);
  const PartitionMatrix got = search_partition(a, b, cfg, search);
  bool direct = true, flipped = true;
  for (std::size_t i = 0; i < n; ++i) {
    direct = direct && got.subset(i) == truth[i];
    flipped = flipped && got.subset(i) != truth[i];
  }
  const bool recovered = direct || flipped;
  return {good >= 9 && recovered, fmt("%.0f/10 seeds >= 95%% of exhaustive max (worst %.3f); two-cluster oracle ",
                                       good, worst_ratio) + (recovered ? "recovered" : "missed")};
}

// ---------------------------------------------------------------- 6

Outcome auroc_check() {
  SeededRng rng(6);
  double worst_bin = 0.0, worst_ovr = 0.0, worst_mono = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 6 + rng.uniform_index(40);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grid so ties occur.
      s[i] = std::round(rng.normal() * 4.0) / 4.0;
      y[i] = static_cast<int>(rng.uniform_index(2));
    }
    y[0] = 0;
    y[1] = 1;
    const double got = auroc_binary(s, y);
    worst_bin = std::max(worst_bin, std::abs(got - metabdc::testing::auroc_oracle(s, y)));
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(2.0 * s[i]) + 3.0;
    worst_mono = std::max(worst_mono, std::abs(auroc_binary(t, y) - got));

    const std::size_t c = 2 + rng.uniform_index(3);
    ArrayD scores({n, c});
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = i < c ? i : rng.uniform_index(c);
      for (std::size_t k = 0; k < c; ++k) scores.at(i, k) = std::round(rng.normal() * 4.0) / 4.0;
    }
    double mean = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      std::vector<double> col(n);
      std::vector<int> yk(n);
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = scores.at(i, k);
        yk[i] = labels[i] == k ? 1 : 0;
      }
      mean += metabdc::testing::auroc_oracle(col, yk) / static_cast<double>(c);
    }
    worst_ovr = std::max(worst_ovr, std::abs(auroc_multiclass_ovr(scores, labels).mean - mean));
  }
  return {worst_bin <= 1e-12 && worst_ovr <= 1e-12 && worst_mono <= 1e-12,
          fmt("200 instances: binary %.1e, one-vs-rest %.1e, monotone transform %.1e", worst_bin, worst_ovr,
              worst_mono)};
}

// ---------------------------------------------------------------- 7

Outcome lr_rule_check() {
  const double a = lr_from_batch(256), b = lr_from_batch(128), c = lr_from_batch(512);
  const bool ok = std::abs(a - 0.3) < 1e-15 && std::abs(b - 0.15) < 1e-15 && std::abs(c - 0.6) < 1e-15;
  return {ok, fmt("256 -> %.4g, 128 -> %.4g, 512 -> %.4g", a, b, c)};
}

// ---------------------------------------------------------------- 8

Outcome episode_check() {
  SyntheticConfig sc = SyntheticConfig::family_default(0);
  sc.raw_size = 48;
  for (auto& d : sc.domains) d.images_per_class = 16;
  const Dataset ds = generate_synthetic(sc);
  std::vector<std::size_t> pool(ds.images.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  SeededRng rng(8);
  std::size_t violations = 0;
  for (int e = 0; e < 1000; ++e) {
    const LabelSpace space = e % 2 == 0 ? LabelSpace::fine : LabelSpace::coarse;
    const EpisodeSpec spec{e % 3 == 0 ? 2u : 4u, e % 2 == 0 ? 1u : 5u, 10, space};
    const Episode ep = sample_episode(ds.images, pool, spec, rng);
    bool ok = ep.classes.size() == spec.n_way &&
              std::set<std::size_t>(ep.classes.begin(), ep.classes.end()).size() == spec.n_way &&
              ep.support.size() == spec.n_way * spec.k_shot && ep.query.size() == spec.n_way * spec.q_query;
    std::set<std::size_t> all(ep.support.begin(), ep.support.end());
    all.insert(ep.query.begin(), ep.query.end());
    ok = ok && all.size() == ep.support.size() + ep.query.size();
    std::vector<std::size_t> count(spec.n_way, 0);
    for (std::size_t i = 0; ok && i < ep.support.size(); ++i) {
      ok = label_of(ds.images[ep.support[i]], space) == ep.classes[ep.support_labels[i]];
      ++count[ep.support_labels[i]];
    }
    for (std::size_t i = 0; ok && i < ep.query.size(); ++i) {
      ok = label_of(ds.images[ep.query[i]], space) == ep.classes[ep.query_labels[i]];
    }
    for (std::size_t k : count) ok = ok && k == spec.k_shot;
    if (!ok) ++violations;
  }

  // 1-shot episode whose query is a copy of one support image.
  const EncoderConfig enc;
  SeededRng prng(88);
  const ParameterSetF params = init_encoder<float>(enc, prng);
  Dataset pre = preprocess_dataset(ds, 100.0, enc.height);
  std::size_t correct = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    const Episode ep = sample_episode(pre.images, pool, {4, 1, 1, LabelSpace::coarse}, rng);
    std::vector<ArrayF> imgs;
    for (std::size_t i : ep.support) imgs.push_back(pre.images[i].pixels);
    const std::size_t target = static_cast<std::size_t>(t) % 4;
    imgs.push_back(pre.images[ep.support[target]].pixels);
    const auto maps = encode<float>(imgs, enc, params);
    std::vector<BdcMatrix<float>> support, query;
    for (std::size_t i = 0; i < 4; ++i) support.push_back(bdc_matrix(maps[i]));
    query.push_back(bdc_matrix(maps[4]));
    const auto protos = class_prototypes<float>(support, ep.support_labels, 4, 1);
    const auto logits = episode_classify<float>(query, protos, BdcMetric::neg_sq_distance, 1.0);
    if (logits.predicted(0) == target) ++correct;
  }
  const bool ok = violations == 0 && correct == static_cast<std::size_t>(trials);
  return {ok, fmt("1000 episodes, %.0f invariant violations; duplicate-query 1-shot argmax correct %.0f/%.0f",
                  static_cast<double>(violations), static_cast<double>(correct), trials)};
}

// ---------------------------------------------------------------- 9

Outcome trend_check() {
  const auto t0 = std::chrono::steady_clock::now();
  double none_fine = 0.0, ipirm_fine = 0.0, ipirm_coarse = 0.0, ipirm_other = 0.0;
  const int seeds = 5;
  std::string failures;
  for (int seed = 1; seed <= seeds; ++seed) {
    ExperimentConfig c;
    apply_profile(c, Profile::ci);
    c.seed = static_cast<std::uint64_t>(seed);
    c.shots = {5};
    const ExperimentData data = prepare_data(c);
    auto arm = [&](const ParameterSetF& enc, FinetuneKind kind) {
      c.finetune.kind = kind;
      const RunArtifacts r = run_finetune(c, data, enc, true);
      if (!r.cells.at(0).ok) failures += " " + to_string(kind) + ": " + r.cells[0].reason;
      return r.cells[0].test.mean / seeds;
    };
    c.pretrain.kind = PretrainKind::none;
    const ParameterSetF random_init = run_pretrain(c, data);
    c.pretrain.kind = PretrainKind::ipirm;
    const ParameterSetF ipirm = run_pretrain(c, data);
    none_fine += arm(random_init, FinetuneKind::meta_fine_same);
    ipirm_fine += arm(ipirm, FinetuneKind::meta_fine_same);
    ipirm_coarse += arm(ipirm, FinetuneKind::meta_coarse_same);
    ipirm_other += arm(ipirm, FinetuneKind::meta_fine_other);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool a = ipirm_fine - none_fine >= 0.02;
  const bool b = ipirm_fine - ipirm_coarse >= 0.02;
  const bool c = ipirm_fine > ipirm_other;
  Outcome o;
  o.pass = a && b && c && secs <= 1800.0 && failures.empty();
  o.detail = fmt("5-shot mean AUROC over 5 seeds: random-init %.4f, IP-IRM fine-same %.4f, coarse-same %.4f, ",
                 none_fine, ipirm_fine, ipirm_coarse) +
             fmt("fine-other %.4f; (a) %+.4f (b) %+.4f (c) %+.4f", ipirm_other, ipirm_fine - none_fine,
                 ipirm_fine - ipirm_coarse, ipirm_fine - ipirm_other) +
             fmt(" (%.0fs)", secs) + failures;
  return o;
}

// ---------------------------------------------------------------- 10

std::string run_to_csv(const ExperimentConfig& c, const std::filesystem::path& path) {
  const RunArtifacts r = run_experiment(c, prepare_data(c));
  write_metrics_csv(path, r.metrics);
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism_check() {
  ExperimentConfig c;
  apply_profile(c, Profile::ci);
  c.seed = 11;
  c.shots = {1, 5};
  const auto dir = std::filesystem::temp_directory_path() / "metabdc_acceptance_det";
  std::filesystem::create_directories(dir);
  const std::string a = run_to_csv(c, dir / "a.csv");
  const std::string b = run_to_csv(c, dir / "b.csv");
  std::filesystem::remove_all(dir);
  return {!a.empty() && a == b, fmt("two runs, seed 11: %.0f bytes each, identical=", static_cast<double>(a.size())) +
                                    (a == b ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  const std::vector<std::pair<const char*, std::function<Outcome()>>> checks = {
      {"gradient suite", gradient_suite},
      {"BDC oracle", bdc_oracle_check},
      {"SimCLR equivalence", simclr_equivalence},
      {"IRM penalty", irm_penalty_check},
      {"partition search", partition_search_check},
      {"AUROC", auroc_check},
      {"LR rule", lr_rule_check},
      {"episodic protocol", episode_check},
      {"end-to-end trend", trend_check},
      {"determinism", determinism_check},
  };
  int failed = 0, run = 0;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    if (!only.empty() && only.count(i + 1) == 0) continue;
    ++run;
    Outcome o;
    try {
      o = checks[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("[%s] %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, checks[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", run - failed, run);
  return failed == 0 ? 0 : 1;
}
