#pragma once

#include <functional>
#include <span>
#include <vector>

#include "metabdc/graph.hpp"

namespace metabdc {

/// Builds a scalar-valued computation from the given input nodes.
using ScalarBuilder =
    std::function<NodeId(Graph<double>& graph, std::span<const NodeId> inputs)>;

struct GradCheckResult {
  double max_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check_detailed(const ScalarBuilder& fn, std::span<const ArrayD> point,
                                    double eps = 1e-5, ParameterSet<double>* params = nullptr);

/// Same comparison w.r.t. the entries of a parameter set. At most
/// `max_coords_per_param` evenly spaced coordinates are probed per parameter
/// (0 = all).
using GraphBuilder = std::function<NodeId(Graph<double>& graph)>;
GradCheckResult grad_check_parameters(const GraphBuilder& fn, ParameterSet<double>& params,
                                      double eps = 1e-5, std::size_t max_coords_per_param = 0);

inline double grad_check(const ScalarBuilder& fn, std::span<const ArrayD> point,
                         double eps = 1e-5) {
  return grad_check_detailed(fn, point, eps).max_error;
}

}  // namespace metabdc
