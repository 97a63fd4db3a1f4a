#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "metabdc/array.hpp"

namespace metabdc {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// Named trainable arrays, each with a gradient slot of the same shape.
template <typename T>
class ParameterSet {
 public:
  void add(const std::string& name, Array<T> init);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  Array<T>& value(const std::string& name) { return values_[lookup(name)]; }
  const Array<T>& value(const std::string& name) const { return values_[lookup(name)]; }
  Array<T>& grad(const std::string& name) { return grads_[lookup(name)]; }
  const Array<T>& grad(const std::string& name) const { return grads_[lookup(name)]; }

  Array<T>& value_at(std::size_t i) { return values_[i]; }
  const Array<T>& value_at(std::size_t i) const { return values_[i]; }
  Array<T>& grad_at(std::size_t i) { return grads_[i]; }
  const Array<T>& grad_at(std::size_t i) const { return grads_[i]; }

  void zero_grad();
  std::size_t total_size() const;

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const;

  std::vector<std::string> names_;
  std::vector<Array<T>> values_;
  std::vector<Array<T>> grads_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// One differentiable operation. Implementations are stateless apart from
/// construction-time attributes; all activations live in the graph.
template <typename T>
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view kind() const = 0;
  /// Throws ShapeError (message without node context) on incompatible inputs.
  virtual Shape infer_shape(std::span<const Shape> inputs) const = 0;
  virtual void forward(std::span<const Array<T>* const> inputs, Array<T>& out) const = 0;
  /// Accumulates d(loss)/d(input) into grads[i]; grads[i] is null when input
  /// i does not need a gradient.
  virtual void backward(std::span<const Array<T>* const> inputs, const Array<T>& out,
                        const Array<T>& grad_out, std::span<Array<T>* const> grads) const = 0;
};

/// Recorded computation: leaves (inputs, constants, parameters) followed by
/// op nodes in topological order. Shapes are inferred when nodes are added;
/// `forward` (re)executes the whole record against bound inputs.
template <typename T>
class Graph {
 public:
  explicit Graph(ParameterSet<T>* params = nullptr) : params_read_(params), params_(params) {}
  /// Inference-only graph: parameters are readable, backward() still fills
  /// node gradients but never touches parameter gradient slots.
  explicit Graph(const ParameterSet<T>* params) : params_read_(params), params_(nullptr) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  NodeId input(const std::string& name, Shape shape, bool requires_grad = false);
  NodeId constant(Array<T> value);
  NodeId parameter(const std::string& name);
  NodeId apply(std::unique_ptr<Op<T>> op, std::vector<NodeId> parents);

  void mark_output(const std::string& name, NodeId node);

  /// Binds named inputs and evaluates every node. Returns marked outputs.
  std::map<std::string, Array<T>> forward(const std::map<std::string, Array<T>>& inputs);

  /// Reverse sweep from a scalar node. Parameter gradients are accumulated
  /// into the ParameterSet; node gradients are readable through grad().
  void backward(NodeId loss);

  const Array<T>& value(NodeId id) const;
  /// Gradient of the last backward() w.r.t. this node; throws if none.
  const Array<T>& grad(NodeId id) const;
  const Shape& shape(NodeId id) const { return node(id).shape; }
  std::size_t size() const { return nodes_.size(); }
  std::string_view kind(NodeId id) const;
  bool evaluated() const { return evaluated_; }
  std::optional<NodeId> find_input(const std::string& name) const;

 private:
  enum class Leaf { none, input, constant, parameter };
  struct Node {
    Leaf leaf = Leaf::none;
    std::string name;
    std::unique_ptr<Op<T>> op;
    std::vector<NodeId> parents;
    Shape shape;
    Array<T> value;
    Array<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
  };

  const Node& node(NodeId id) const;
  Node& node(NodeId id);
  std::string describe(NodeId id) const;

  const ParameterSet<T>* params_read_;
  ParameterSet<T>* params_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, NodeId>> outputs_;
  bool evaluated_ = false;
};

using ParameterSetF = ParameterSet<float>;
using ParameterSetD = ParameterSet<double>;

}  // namespace metabdc
