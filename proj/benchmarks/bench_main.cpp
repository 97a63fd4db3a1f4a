#include <benchmark/benchmark.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "metabdc/bdc.hpp"
#include "metabdc/encoder.hpp"
#include "metabdc/graph.hpp"
#include "metabdc/metrics.hpp"
#include "metabdc/ops.hpp"
#include "metabdc/rng.hpp"
#include "metabdc/ssl.hpp"

namespace {

using namespace metabdc;

ArrayF random_float(Shape shape, SeededRng& rng) {
  ArrayF a(std::move(shape));
  for (auto& v : a.vec()) v = static_cast<float>(rng.normal());
  return a;
}

ArrayD unit_rows(std::size_t n, std::size_t p, SeededRng& rng) {
  ArrayD a({n, p});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      a.at(i, j) = rng.normal();
      s += a.at(i, j) * a.at(i, j);
    }
    for (std::size_t j = 0; j < p; ++j) a.at(i, j) /= std::sqrt(s);
  }
  return a;
}

// Full encoder forward and backward on a batch of 32x32 images.
void BM_EncoderForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  EncoderConfig enc;
  SeededRng rng(1);
  auto params = init_encoder<float>(enc, rng);
  const ArrayF images = random_float({batch, enc.channels, enc.height, enc.width}, rng);
  for (auto _ : state) {
    params.zero_grad();
    Graph<float> g(&params);
    NodeId x = g.input("x", images.shape());
    NodeId loss = ops::sum(g, ops::square(g, build_encoder(g, enc, x)));
    g.mark_output("loss", loss);
    benchmark::DoNotOptimize(g.forward({{"x", images}}));
    g.backward(loss);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(batch));
}
BENCHMARK(BM_EncoderForwardBackward)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

// Standalone BDC matrix for a [d, m] feature map.
void BM_BdcMatrix(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  SeededRng rng(2);
  const FeatureMap<float> fm{random_float({d, 16}, rng)};
  for (auto _ : state) benchmark::DoNotOptimize(bdc_matrix(fm));
}
BENCHMARK(BM_BdcMatrix)->Arg(16)->Arg(64)->Arg(128);

// Graph BDC plus episode head, forward and backward.
void BM_BdcEpisodeGraph(benchmark::State& state) {
  const std::size_t n_way = 2, k_shot = 5, n_query = 10, d = 32, m = 16;
  SeededRng rng(3);
  const ArrayF support = random_float({n_way * k_shot, d, m}, rng);
  const ArrayF query = random_float({n_way * n_query, d, m}, rng);
  std::vector<std::size_t> s_labels, q_labels;
  for (std::size_t c = 0; c < n_way; ++c) {
    for (std::size_t i = 0; i < k_shot; ++i) s_labels.push_back(c);
    for (std::size_t i = 0; i < n_query; ++i) q_labels.push_back(c);
  }
  const BdcHeadConfig head{BdcMetric::neg_sq_distance, 0.05, true};
  for (auto _ : state) {
    Graph<float> g;
    NodeId s = g.input("s", support.shape(), true);
    NodeId q = g.input("q", query.shape(), true);
    NodeId logits = build_episode_logits(g, build_bdc(g, s, true), s_labels, n_way,
                                         build_bdc(g, q, true), head);
    NodeId loss = ops::softmax_cross_entropy(g, logits, q_labels);
    g.mark_output("loss", loss);
    benchmark::DoNotOptimize(g.forward({{"s", support}, {"q", query}}));
    g.backward(loss);
  }
}
BENCHMARK(BM_BdcEpisodeGraph)->Unit(benchmark::kMicrosecond);

// Closed-form subset contrastive loss and IRM penalty on fixed embeddings.
void BM_ContrastivePenalty(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  SeededRng rng(4);
  SslBatch batch{unit_rows(n, 32, rng), unit_rows(n, 32, rng), std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) batch.subset[i] = i % 2;
  for (auto _ : state) {
    benchmark::DoNotOptimize(contrastive_loss(batch, 0, 1.0, 0.5));
    benchmark::DoNotOptimize(irm_penalty(batch, 1, 0.5));
  }
}
BENCHMARK(BM_ContrastivePenalty)->Arg(64)->Arg(256);

// Relaxed partition search on fixed embeddings.
void BM_PartitionSearch(benchmark::State& state) {
  SeededRng rng(5);
  const ArrayD a = unit_rows(64, 16, rng), b = unit_rows(64, 16, rng);
  IpIrmConfig cfg;
  for (auto _ : state) {
    SeededRng search(6);
    benchmark::DoNotOptimize(search_partition(a, b, cfg, search));
  }
}
BENCHMARK(BM_PartitionSearch)->Unit(benchmark::kMillisecond);

// Mid-rank binary AUROC.
void BM_AurocBinary(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  SeededRng rng(7);
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % 2);
    scores[i] = rng.normal() + 0.5 * labels[i];
  }
  for (auto _ : state) benchmark::DoNotOptimize(auroc_binary(scores, labels));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n));
}
BENCHMARK(BM_AurocBinary)->Arg(100)->Arg(10000);

}  // namespace

BENCHMARK_MAIN();
