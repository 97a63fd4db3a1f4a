#include "metabdc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace metabdc {

GradCheckResult grad_check_detailed(const ScalarBuilder& fn, std::span<const ArrayD> point,
                                    double eps, ParameterSet<double>* params) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");

  Graph<double> graph(params);
  std::vector<NodeId> inputs;
  std::map<std::string, ArrayD> bound;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const std::string name = "x" + std::to_string(i);
    inputs.push_back(graph.input(name, point[i].shape(), /*requires_grad=*/true));
    bound[name] = point[i];
  }
  const NodeId out = fn(graph, inputs);
  graph.forward(bound);
  if (graph.value(out).size() != 1) throw ShapeError("grad_check: function is not scalar");
  graph.backward(out);

  std::vector<ArrayD> analytic;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    try {
      analytic.push_back(graph.grad(inputs[i]));
    } catch (const Error&) {
      analytic.emplace_back(point[i].shape(), 0.0);  // input does not influence the output
    }
  }

  GradCheckResult result;
  auto eval = [&] {
    graph.forward(bound);
    return graph.value(out).item();
  };
  for (std::size_t i = 0; i < point.size(); ++i) {
    const std::string name = "x" + std::to_string(i);
    for (std::size_t k = 0; k < point[i].size(); ++k) {
      const double orig = point[i][k];
      bound[name][k] = orig + eps;
      const double up = eval();
      bound[name][k] = orig - eps;
      const double down = eval();
      bound[name][k] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i][k];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err >= result.max_error) {
        result.max_error = err;
        result.worst_input = i;
        result.worst_index = k;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult grad_check_parameters(const GraphBuilder& fn, ParameterSet<double>& params,
                                      double eps, std::size_t max_coords_per_param) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");
  Graph<double> graph(&params);
  const NodeId out = fn(graph);
  graph.forward({});
  params.zero_grad();
  graph.backward(out);

  GradCheckResult result;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ArrayD& value = params.value_at(i);
    const ArrayD analytic = params.grad_at(i);
    const std::size_t n = value.size();
    const std::size_t step =
        (max_coords_per_param == 0 || n <= max_coords_per_param) ? 1 : n / max_coords_per_param;
    for (std::size_t k = 0; k < n; k += step) {
      const double orig = value[k];
      value[k] = orig + eps;
      graph.forward({});
      const double up = graph.value(out).item();
      value[k] = orig - eps;
      graph.forward({});
      const double down = graph.value(out).item();
      value[k] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[k] - numeric) / std::max(1.0, std::abs(analytic[k]));
      if (err >= result.max_error) {
        result = {err, i, k, analytic[k], numeric};
      }
    }
  }
  return result;
}

}  // namespace metabdc
