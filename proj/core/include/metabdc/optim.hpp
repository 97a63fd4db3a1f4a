#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "metabdc/graph.hpp"

namespace metabdc {

/// 0.3 * BS / 256. Throws for BS <= 0.
double lr_from_batch(std::int64_t batch_size);

enum class ScheduleKind { cosine, step };

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::cosine;
  double base_lr = 0.1;
  std::size_t total_epochs = 100;
  std::vector<std::size_t> decay_epochs;  // step kind only
  double decay_factor = 10.0;

  void validate() const;
};

/// cosine: base * 0.5 * (1 + cos(pi * epoch / total));
/// step: base / factor^(number of decay epochs <= epoch).
double schedule_lr(const ScheduleConfig& config, std::size_t epoch);

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Heavy-ball SGD with decoupled-from-loss L2 weight decay added to the
/// gradient.
template <typename T>
class Sgd {
 public:
  Sgd(const ParameterSet<T>& params, SgdConfig config);
  /// Throws NumericError on a non-finite gradient before touching params.
  void step(ParameterSet<T>& params, double lr);

 private:
  SgdConfig config_;
  std::vector<std::vector<double>> velocity_;
};

// AUC-M ------------------------------------------------------------------------

struct AucMState {
  double a = 0.0;
  double b = 0.0;
  double alpha = 0.0;
  double margin = 1.0;
  double p_hat = 0.5;

  void validate() const;
};

struct AucMResult {
  double loss = 0.0;
  std::vector<double> d_scores;
  double d_a = 0.0;
  double d_b = 0.0;
  double d_alpha = 0.0;
};

/// Min-max margin surrogate
///   (1-p) E[(s-a)^2 | y=1] + p E[(s-b)^2 | y=0]
///   + 2 alpha (m p (1-p) + p E[s | y=0] - (1-p) E[s | y=1]) - p (1-p) alpha^2
/// with its gradients. Conditional means over an absent class are dropped.
AucMResult aucm_loss(std::span<const double> scores, std::span<const int> labels,
                     const AucMState& state);

/// Graph node: sum over classes k of the one-vs-rest AUC-M loss on column k
/// of `scores` [n, C]. `a`, `b`, `alpha` are [C] nodes (usually parameters).
template <typename T>
NodeId aucm_ovr_loss(Graph<T>& graph, NodeId scores, NodeId a, NodeId b, NodeId alpha,
                     std::vector<std::size_t> labels, std::vector<double> p_hat, double margin);

// PESG -------------------------------------------------------------------------

struct PesgConfig {
  double lr = 0.1;
  double weight_decay = 0.0;
  /// Strength of the proximal pull toward the reference point.
  double epoch_decay = 1e-3;
  /// Epochs at which the LR is divided by `decay_factor` and the reference
  /// point is refreshed.
  std::vector<std::size_t> decay_epochs;
  double decay_factor = 10.0;

  void validate() const;
};

/// Proximal epoch stochastic method. Parameters listed in `ascent` (the AUC-M
/// dual variables) take a projected ascent step; all others a proximal
/// descent step  p -= lr * (g + epoch_decay (p - ref) + weight_decay p).
template <typename T>
class Pesg {
 public:
  Pesg(const ParameterSet<T>& params, PesgConfig config, std::set<std::string> ascent = {});

  /// Call at the start of every epoch; updates LR and refreshes the
  /// reference on decay boundaries.
  void begin_epoch(std::size_t epoch, const ParameterSet<T>& params);
  void step(ParameterSet<T>& params);
  double lr() const { return lr_; }

 private:
  PesgConfig config_;
  std::set<std::string> ascent_;
  std::vector<Array<T>> reference_;
  double lr_;
};

}  // namespace metabdc
