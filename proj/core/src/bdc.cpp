#include "metabdc/bdc.hpp"

#include <cmath>
#include <string>

#include "metabdc/ops.hpp"

namespace metabdc {

template <typename T>
std::size_t EpisodeLogits<T>::predicted(std::size_t query) const {
  const std::size_t n = probabilities.dim(1);
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c) {
    if (probabilities.at(query, c) > probabilities.at(query, best)) best = c;
  }
  return best;
}

template <typename T>
BdcMatrix<T> bdc_matrix(const FeatureMap<T>& fm) {
  const Array<T>& x = fm.values;
  if (x.rank() != 2) throw ShapeError("bdc_matrix: feature map must be [d, m], got " + shape_str(x.shape()));
  const std::size_t d = x.dim(0), m = x.dim(1);
  if (d < 2 || m < 2) throw ShapeError("bdc_matrix: need d >= 2 and m >= 2, got " + shape_str(x.shape()));
  if (!x.all_finite()) throw NumericError("bdc_matrix: non-finite feature map");

  std::vector<double> dist(d * d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t l = 0; l < d; ++l) {
      double s = 0.0;
      for (std::size_t p = 0; p < m; ++p) {
        const double diff = static_cast<double>(x.at(k, p)) - static_cast<double>(x.at(l, p));
        s += diff * diff;
      }
      dist[k * d + l] = std::sqrt(s);
    }
  }
  std::vector<double> row(d, 0.0), col(d, 0.0);
  double grand = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t l = 0; l < d; ++l) {
      row[k] += dist[k * d + l];
      col[l] += dist[k * d + l];
    }
  }
  for (std::size_t k = 0; k < d; ++k) {
    grand += row[k];
    row[k] /= static_cast<double>(d);
    col[k] /= static_cast<double>(d);
  }
  grand /= static_cast<double>(d * d);

  BdcMatrix<T> out{Array<T>({d, d})};
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t l = 0; l < d; ++l) {
      out.values.at(k, l) = static_cast<T>(dist[k * d + l] - row[k] - col[l] + grand);
    }
  }
  return out;
}

template <typename T>
BdcMatrix<T> normalize_frobenius(const BdcMatrix<T>& m) {
  double s = 0.0;
  for (T v : m.values.data()) s += static_cast<double>(v) * v;
  const double norm = std::sqrt(s);
  if (norm == 0.0) return m;
  BdcMatrix<T> out = m;
  for (T& v : out.values.data()) v = static_cast<T>(v / norm);
  return out;
}

template <typename T>
std::vector<Prototype<T>> class_prototypes(std::span<const BdcMatrix<T>> support,
                                           std::span<const std::size_t> labels, std::size_t n_way,
                                           std::size_t k_shot) {
  if (support.size() != labels.size()) {
    throw Error("class_prototypes: " + std::to_string(support.size()) + " matrices but " +
                std::to_string(labels.size()) + " labels");
  }
  if (n_way == 0 || k_shot == 0) throw Error("class_prototypes: N and K must be positive");
  std::vector<std::size_t> count(n_way, 0);
  for (std::size_t y : labels) {
    if (y >= n_way) throw Error("class_prototypes: label " + std::to_string(y) + " outside N");
    ++count[y];
  }
  for (std::size_t c = 0; c < n_way; ++c) {
    if (count[c] != k_shot) {
      throw Error("class_prototypes: class " + std::to_string(c) + " has " +
                  std::to_string(count[c]) + " support matrices, expected K=" +
                  std::to_string(k_shot));
    }
  }
  const Shape shape = support.front().values.shape();
  std::vector<std::vector<double>> acc(n_way, std::vector<double>(shape_size(shape), 0.0));
  for (std::size_t i = 0; i < support.size(); ++i) {
    if (support[i].values.shape() != shape) {
      throw ShapeError("class_prototypes: support matrix " + std::to_string(i) + " has shape " +
                       shape_str(support[i].values.shape()) + ", expected " + shape_str(shape));
    }
    auto& a = acc[labels[i]];
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += support[i].values[j];
  }
  std::vector<Prototype<T>> out;
  out.reserve(n_way);
  for (std::size_t c = 0; c < n_way; ++c) {
    Array<T> mean(shape);
    for (std::size_t j = 0; j < mean.size(); ++j) {
      mean[j] = static_cast<T>(acc[c][j] / static_cast<double>(k_shot));
    }
    out.push_back({c, BdcMatrix<T>{std::move(mean)}});
  }
  return out;
}

template <typename T>
EpisodeLogits<T> episode_classify(std::span<const BdcMatrix<T>> queries,
                                  std::span<const Prototype<T>> prototypes, BdcMetric metric,
                                  double temperature) {
  if (prototypes.empty()) throw Error("episode_classify: no prototypes");
  if (!(temperature > 0.0)) throw Error("episode_classify: temperature must be positive");
  const std::size_t n = prototypes.size();
  const Shape shape = prototypes.front().matrix.values.shape();
  for (const auto& p : prototypes) {
    if (p.matrix.values.shape() != shape) throw ShapeError("episode_classify: prototype dims differ");
  }
  EpisodeLogits<T> out{Array<T>({queries.size(), n}), Array<T>({queries.size(), n})};
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const Array<T>& a = queries[q].values;
    if (a.shape() != shape) {
      throw ShapeError("episode_classify: query " + std::to_string(q) + " has shape " +
                       shape_str(a.shape()) + ", prototypes are " + shape_str(shape));
    }
    std::vector<double> z(n);
    for (std::size_t c = 0; c < n; ++c) {
      const Array<T>& p = prototypes[c].matrix.values;
      double s = 0.0;
      for (std::size_t j = 0; j < a.size(); ++j) {
        if (metric == BdcMetric::neg_sq_distance) {
          const double diff = static_cast<double>(a[j]) - p[j];
          s -= diff * diff;
        } else {
          s += static_cast<double>(a[j]) * p[j];
        }
      }
      out.similarity.at(q, c) = static_cast<T>(s);
      z[c] = s / temperature;
    }
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double total = 0.0;
    for (double& v : z) {
      v = std::exp(v - mx);
      total += v;
    }
    for (std::size_t c = 0; c < n; ++c) out.probabilities.at(q, c) = static_cast<T>(z[c] / total);
  }
  return out;
}

template <typename T>
NodeId build_bdc(Graph<T>& graph, NodeId feature_maps, bool normalize) {
  const Shape s = graph.shape(feature_maps);
  if (s.size() != 3) throw ShapeError("build_bdc: expected [B, d, m], got " + shape_str(s));
  if (s[1] < 2 || s[2] < 2) throw ShapeError("build_bdc: need d >= 2 and m >= 2, got " + shape_str(s));
  NodeId a = ops::double_center(graph, ops::pairwise_channel_distance(graph, feature_maps));
  a = ops::reshape(graph, a, Shape{s[0], s[1] * s[1]});
  if (normalize) a = ops::l2_normalize_rows(graph, a);
  return a;
}

template <typename T>
NodeId build_episode_logits(Graph<T>& graph, NodeId support_bdc,
                            const std::vector<std::size_t>& support_labels, std::size_t n_way,
                            NodeId query_bdc, const BdcHeadConfig& head) {
  if (!(head.temperature > 0.0)) throw Error("episode head: temperature must be positive");
  NodeId protos = ops::group_mean_rows(graph, support_bdc, support_labels, n_way);
  NodeId sim = head.metric == BdcMetric::neg_sq_distance
                   ? ops::neg_sq_dist_rows(graph, query_bdc, protos)
                   : ops::matmul_nt(graph, query_bdc, protos);
  if (head.temperature == 1.0) return sim;
  return ops::scale(graph, sim, static_cast<T>(1.0 / head.temperature));
}

#define METABDC_INSTANTIATE_BDC(T)                                                           \
  template struct EpisodeLogits<T>;                                                          \
  template BdcMatrix<T> bdc_matrix(const FeatureMap<T>&);                                    \
  template BdcMatrix<T> normalize_frobenius(const BdcMatrix<T>&);                            \
  template std::vector<Prototype<T>> class_prototypes(std::span<const BdcMatrix<T>>,         \
                                                      std::span<const std::size_t>,          \
                                                      std::size_t, std::size_t);             \
  template EpisodeLogits<T> episode_classify(std::span<const BdcMatrix<T>>,                  \
                                             std::span<const Prototype<T>>, BdcMetric,       \
                                             double);                                        \
  template NodeId build_bdc(Graph<T>&, NodeId, bool);                                        \
  template NodeId build_episode_logits(Graph<T>&, NodeId, const std::vector<std::size_t>&,   \
                                       std::size_t, NodeId, const BdcHeadConfig&);

METABDC_INSTANTIATE_BDC(float)
METABDC_INSTANTIATE_BDC(double)

}  // namespace metabdc
