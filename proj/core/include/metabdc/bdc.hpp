#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "metabdc/array.hpp"
#include "metabdc/encoder.hpp"
#include "metabdc/graph.hpp"

namespace metabdc {

/// Double-centered matrix of pairwise Euclidean distances between the d
/// channel vectors of a feature map (positions are the observations).
template <typename T>
struct BdcMatrix {
  Array<T> values;  // [d, d]
  std::size_t dim() const { return values.dim(0); }
};

template <typename T>
struct Prototype {
  std::size_t class_id = 0;
  BdcMatrix<T> matrix;
};

enum class BdcMetric { neg_sq_distance, inner_product };

struct BdcHeadConfig {
  BdcMetric metric = BdcMetric::neg_sq_distance;
  double temperature = 1.0;
  /// Scale every BDC matrix to unit Frobenius norm before comparison.
  bool normalize = false;
};

/// Per query row: raw similarity to each class and its softmax.
template <typename T>
struct EpisodeLogits {
  Array<T> similarity;     // [queries, N]
  Array<T> probabilities;  // [queries, N]
  std::size_t predicted(std::size_t query) const;
};

/// Throws for d < 2, m < 2 or non-finite input.
template <typename T>
BdcMatrix<T> bdc_matrix(const FeatureMap<T>& fm);

/// Divides by the Frobenius norm; an all-zero matrix is returned unchanged.
template <typename T>
BdcMatrix<T> normalize_frobenius(const BdcMatrix<T>& m);

/// `labels[i]` in [0, N) is the class of `support[i]`; each class must occur
/// exactly K times.
template <typename T>
std::vector<Prototype<T>> class_prototypes(std::span<const BdcMatrix<T>> support,
                                           std::span<const std::size_t> labels, std::size_t n_way,
                                           std::size_t k_shot);

template <typename T>
EpisodeLogits<T> episode_classify(std::span<const BdcMatrix<T>> queries,
                                  std::span<const Prototype<T>> prototypes, BdcMetric metric,
                                  double temperature);

// Graph builders -----------------------------------------------------------

/// [B, d, m] feature maps -> [B, d*d] flattened BDC matrices.
template <typename T>
NodeId build_bdc(Graph<T>& graph, NodeId feature_maps, bool normalize = false);

/// Prototype averaging plus metric, divided by the temperature: [queries, N].
template <typename T>
NodeId build_episode_logits(Graph<T>& graph, NodeId support_bdc,
                            const std::vector<std::size_t>& support_labels, std::size_t n_way,
                            NodeId query_bdc, const BdcHeadConfig& head);

}  // namespace metabdc
