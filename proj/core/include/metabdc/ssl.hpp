#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metabdc/array.hpp"
#include "metabdc/encoder.hpp"
#include "metabdc/graph.hpp"
#include "metabdc/optim.hpp"
#include "metabdc/rng.hpp"

namespace metabdc {

// Augmentation -----------------------------------------------------------------

struct AugmentConfig {
  /// Return both views as exact copies of the input.
  bool identity = false;
  /// Square random resized crop; the fraction is of the image area.
  double crop_scale_min = 0.6;
  double crop_scale_max = 1.0;
  /// Per-view affine intensity jitter v * gain + bias.
  double gain_min = 0.8;
  double gain_max = 1.2;
  double bias_range = 0.1;
  /// Independent additive Gaussian noise per view and pixel.
  double noise_std = 0.0;

  void validate() const;
};

/// Two stochastic views per H x W x C image, resized back to the input size.
template <typename T>
std::pair<std::vector<Array<T>>, std::vector<Array<T>>> augment_views(
    std::span<const Array<T>> images, const AugmentConfig& config, SeededRng& rng);

// Partitions ---------------------------------------------------------------------

/// Hard two-subset assignment. Subset ids are 0 and 1 (the first subset is 0).
class PartitionMatrix {
 public:
  explicit PartitionMatrix(std::vector<std::uint8_t> subset_of);
  static PartitionMatrix trivial(std::size_t n);

  std::size_t n() const { return subset_.size(); }
  std::size_t subset(std::size_t i) const { return subset_.at(i); }
  const std::vector<std::uint8_t>& assignments() const { return subset_; }
  std::size_t count(std::size_t k) const;
  bool degenerate() const { return count(0) == 0 || count(1) == 0; }
  /// n x 2 one-hot matrix.
  ArrayD one_hot() const;
  friend bool operator==(const PartitionMatrix&, const PartitionMatrix&) = default;

 private:
  std::vector<std::uint8_t> subset_;
};

/// Ordered partitions; the first is always the trivial one.
class PartitionSet {
 public:
  explicit PartitionSet(std::size_t n) : items_{PartitionMatrix::trivial(n)} {}
  void append(PartitionMatrix p);
  std::size_t size() const { return items_.size(); }
  const PartitionMatrix& operator[](std::size_t i) const { return items_.at(i); }
  const std::vector<PartitionMatrix>& items() const { return items_; }

 private:
  std::vector<PartitionMatrix> items_;
};

/// How a subset's loss and IRM gradient are scaled before entering the
/// update and search objectives.
enum class LossReduction {
  sum,  // L_k + lambda * g_k^2
  mean  // L_k / n_k + lambda * (g_k / n_k)^2
};

struct IpIrmConfig {
  double lambda1 = 0.2;
  double lambda2 = 0.5;
  double tau = 0.5;
  std::size_t outer_iterations = 4;
  std::size_t search_steps = 100;
  double search_lr = 0.1;
  std::size_t search_restarts = 3;
  /// Samples per relaxed ascent step (the whole set when smaller).
  std::size_t search_batch = 128;
  /// Greedy single-flip polishing after hardening, for sets up to this size.
  std::size_t refine_max_n = 64;
  double tolerance = 1e-3;
  LossReduction reduction = LossReduction::mean;

  void validate() const;
};

// Contrastive loss and IRM penalty on fixed embeddings ------------------------

/// Index-aligned unit embeddings of two views plus a subset id per sample.
struct SslBatch {
  ArrayD view_a;  // [n, p]
  ArrayD view_b;  // [n, p]
  std::vector<std::size_t> subset;
};

/// Sum over anchors x in view A of subset k of
///   -log( exp(x.x* theta / tau) / sum_{x' in X_k u X*_k \ x} exp(x.x' theta / tau) ).
double contrastive_loss(const SslBatch& batch, std::size_t k, double theta, double tau);
/// dL/dtheta at theta = 1 in closed form.
double contrastive_dtheta(const SslBatch& batch, std::size_t k, double tau);
/// (dL/dtheta at theta = 1)^2.
double irm_penalty(const SslBatch& batch, std::size_t k, double tau);

/// sum_k [reduced L_k + lambda * reduced g_k^2] for a non-degenerate partition,
/// computed by direct summation over embeddings.
double partition_objective(const ArrayD& view_a, const ArrayD& view_b,
                           const PartitionMatrix& partition, double lambda, double tau,
                           LossReduction reduction);

/// Continuous relaxation of the partition argmax on fixed embeddings.
PartitionMatrix search_partition(const ArrayD& view_a, const ArrayD& view_b,
                                 const IpIrmConfig& config, SeededRng& rng);

// Graph builders -----------------------------------------------------------------

struct SubsetTerm {
  NodeId loss;     // sum over weighted anchors
  NodeId dtheta;   // closed-form dL/dtheta at theta = 1
  NodeId count;    // total anchor weight
};

/// Soft-weighted subset loss: `weights` [n] scales anchor rows and the
/// denominator columns of both views (self excluded in view A).
template <typename T>
SubsetTerm build_subset_term(Graph<T>& graph, NodeId za, NodeId zb, NodeId weights, double tau);

/// Standard contrastive loss with every sample in one set, averaged over
/// anchors. No partition weights, no penalty.
template <typename T>
NodeId build_simclr_loss(Graph<T>& graph, NodeId za, NodeId zb, double tau);

// Training ---------------------------------------------------------------------------

struct StepTrace {
  double objective = 0.0;
  double loss = 0.0;     // sum of reduced subset losses
  double penalty = 0.0;  // sum of reduced squared IRM gradients
  std::size_t skipped_partitions = 0;
};

/// Augmented mini-batch: packed [B, C, H, W] views and dataset indices.
template <typename T>
struct ViewBatch {
  Array<T> view_a;
  Array<T> view_b;
  std::vector<std::size_t> indices;
};

/// One optimizer step on sum_P sum_k [L + lambda1 * penalty] over the batch.
/// A non-trivial partition with an empty subset on this batch is skipped.
template <typename T>
StepTrace ipirm_step(ParameterSet<T>& params, const EncoderConfig& encoder,
                     const PartitionSet& partitions, const ViewBatch<T>& batch,
                     const IpIrmConfig& config, Sgd<T>& optimizer, double lr);

/// One optimizer step on the plain contrastive loss.
template <typename T>
StepTrace simclr_step(ParameterSet<T>& params, const EncoderConfig& encoder,
                      const ViewBatch<T>& batch, double tau, Sgd<T>& optimizer, double lr);

/// Unit projections for every image, in batches; returned in f64.
template <typename T>
ArrayD project_images(const ParameterSet<T>& params, const EncoderConfig& encoder,
                      std::span<const Array<T>> images, std::size_t batch_size = 128);

/// Frozen-encoder partition search over the whole unlabeled set using one
/// augmented view pair per image.
template <typename T>
PartitionMatrix find_partition(const ParameterSet<T>& params, const EncoderConfig& encoder,
                               std::span<const Array<T>> images, const AugmentConfig& augment,
                               const IpIrmConfig& config, SeededRng& rng);

enum class PretrainMode { simclr, ipirm };

struct PretrainConfig {
  PretrainMode mode = PretrainMode::ipirm;
  IpIrmConfig ipirm;
  AugmentConfig augment;
  /// Epochs of representation update per phase; ipirm runs up to
  /// outer_iterations + 1 phases.
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  SgdConfig sgd{0.9, 1e-4};
  /// 0 = derive the base LR from the batch size.
  double base_lr = 0.0;

  void validate() const;
};

struct TraceRow {
  std::size_t iter = 0;
  std::size_t partition_count = 0;
  double loss = 0.0;
  double penalty = 0.0;
  double lr = 0.0;
};

template <typename T>
struct PretrainResult {
  ParameterSet<T> params;
  PartitionSet partitions{0};
  std::vector<TraceRow> trace;
  std::size_t outer_iterations_run = 0;
};

/// simclr: plain contrastive training for `epochs`; ipirm: alternating
/// update phases and partition searches with cosine decay over the whole
/// planned budget. `init` optionally supplies starting parameters.
template <typename T>
PretrainResult<T> pretrain(const EncoderConfig& encoder, std::span<const Array<T>> images,
                           const PretrainConfig& config, SeededRng& rng,
                           const ParameterSet<T>* init = nullptr);

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows);

}  // namespace metabdc
