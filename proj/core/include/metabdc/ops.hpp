#pragma once

#include <cstddef>
#include <vector>

#include "metabdc/graph.hpp"

// Graph builders. Every function appends one node and returns its id; shapes
// are checked immediately. Scalars are shape [1].
namespace metabdc::ops {

inline constexpr double kSqrtGuard = 1e-12;

// Elementwise, identical shapes.
template <typename T> NodeId add(Graph<T>& g, NodeId a, NodeId b);
template <typename T> NodeId sub(Graph<T>& g, NodeId a, NodeId b);
template <typename T> NodeId mul(Graph<T>& g, NodeId a, NodeId b);
/// a / b; a zero denominator is a NumericError.
template <typename T> NodeId div(Graph<T>& g, NodeId a, NodeId b);
template <typename T> NodeId scale(Graph<T>& g, NodeId x, T factor);
template <typename T> NodeId add_scalar(Graph<T>& g, NodeId x, T offset);
template <typename T> NodeId relu(Graph<T>& g, NodeId x);
template <typename T> NodeId exp(Graph<T>& g, NodeId x);
template <typename T> NodeId log(Graph<T>& g, NodeId x);
template <typename T> NodeId sigmoid(Graph<T>& g, NodeId x);
template <typename T> NodeId square(Graph<T>& g, NodeId x);
/// sqrt(max(x, guard)); zero derivative below the guard.
template <typename T> NodeId sqrt_guarded(Graph<T>& g, NodeId x, double guard = kSqrtGuard);

/// x[..., k] + bias[k]
template <typename T> NodeId add_row_bias(Graph<T>& g, NodeId x, NodeId bias);
/// [n,k] x [k,m]
template <typename T> NodeId matmul(Graph<T>& g, NodeId a, NodeId b);
/// [n,k] x [m,k]^T
template <typename T> NodeId matmul_nt(Graph<T>& g, NodeId a, NodeId b);

template <typename T> NodeId sum(Graph<T>& g, NodeId x);
/// [n,m] -> [n]
template <typename T> NodeId sum_rows(Graph<T>& g, NodeId x);
/// Mean over the last axis; rank-1 input yields [1].
template <typename T> NodeId mean_last_axis(Graph<T>& g, NodeId x);
template <typename T> NodeId reshape(Graph<T>& g, NodeId x, Shape shape);

/// Direct 2-D cross-correlation with zero padding.
/// x [N,C,H,W], weight [O,C,k,k], bias [O] -> [N,O,H',W'].
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId weight, NodeId bias, std::size_t stride,
              std::size_t padding);

/// Row-wise L2 normalization; a row with norm below 1e-12 is an error.
template <typename T> NodeId l2_normalize_rows(Graph<T>& g, NodeId x);

template <typename T> NodeId concat_cols(Graph<T>& g, NodeId a, NodeId b);
/// Concatenates along axis 0; trailing dims must agree.
template <typename T> NodeId concat_rows(Graph<T>& g, NodeId a, NodeId b);
/// Selects slices along axis 0.
template <typename T> NodeId gather_rows(Graph<T>& g, NodeId x, std::vector<std::size_t> rows);
/// v[m] -> [n,m] with every row equal to v.
template <typename T> NodeId broadcast_rows(Graph<T>& g, NodeId v, std::size_t n);
/// [n,n] -> [n]
template <typename T> NodeId diagonal(Graph<T>& g, NodeId x);

/// y_i = log sum_j w_ij exp(x_ij). w >= 0. Rows with zero total weight give 0.
template <typename T> NodeId weighted_logsumexp_rows(Graph<T>& g, NodeId x, NodeId w);
/// p_ij = w_ij exp(x_ij) / sum_k w_ik exp(x_ik).
template <typename T> NodeId weighted_softmax_rows(Graph<T>& g, NodeId x, NodeId w);

/// Mean over rows of -log softmax(logits)[label].
template <typename T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, std::vector<std::size_t> labels);

/// x [B,d,m] -> [B,d,d]: Euclidean distance between channel rows. Pairs whose
/// squared distance is at most `guard` get a zero gradient.
template <typename T>
NodeId pairwise_channel_distance(Graph<T>& g, NodeId x, double guard = kSqrtGuard);
/// [B,d,d] or [d,d]: subtract row and column means, add back the grand mean.
template <typename T> NodeId double_center(Graph<T>& g, NodeId x);

/// x [n,k] -> [groups,k]; row i contributes to group_of[i]. Every group must
/// be nonempty.
template <typename T>
NodeId group_mean_rows(Graph<T>& g, NodeId x, std::vector<std::size_t> group_of,
                       std::size_t groups);
/// q [a,k], p [b,k] -> [a,b] with entries -||q_i - p_j||^2.
template <typename T> NodeId neg_sq_dist_rows(Graph<T>& g, NodeId q, NodeId p);

}  // namespace metabdc::ops
