#include "metabdc/graph.hpp"

#include <algorithm>

namespace metabdc {

template <typename T>
void ParameterSet<T>::add(const std::string& name, Array<T> init) {
  if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
  index_[name] = names_.size();
  names_.push_back(name);
  grads_.emplace_back(init.shape(), T{0});
  values_.push_back(std::move(init));
}

template <typename T>
std::size_t ParameterSet<T>::lookup(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& g : grads_) g.fill(T{0});
}

template <typename T>
std::size_t ParameterSet<T>::total_size() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw Error("node id out of range");
  return nodes_[id.index];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(NodeId id) {
  if (id.index >= nodes_.size()) throw Error("node id out of range");
  return nodes_[id.index];
}

template <typename T>
std::string Graph<T>::describe(NodeId id) const {
  const Node& n = node(id);
  std::string label = "node #" + std::to_string(id.index) + " (" + std::string(kind(id));
  if (!n.name.empty()) label += " '" + n.name + "'";
  return label + ")";
}

template <typename T>
std::string_view Graph<T>::kind(NodeId id) const {
  const Node& n = node(id);
  switch (n.leaf) {
    case Leaf::input:
      return "input";
    case Leaf::constant:
      return "constant";
    case Leaf::parameter:
      return "parameter";
    case Leaf::none:
      break;
  }
  return n.op->kind();
}

template <typename T>
NodeId Graph<T>::input(const std::string& name, Shape shape, bool requires_grad) {
  if (find_input(name)) throw Error("duplicate graph input '" + name + "'");
  Node n;
  n.leaf = Leaf::input;
  n.name = name;
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId Graph<T>::constant(Array<T> value) {
  Node n;
  n.leaf = Leaf::constant;
  n.shape = value.shape();
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId Graph<T>::parameter(const std::string& name) {
  if (params_read_ == nullptr) {
    throw Error("graph has no parameter set; cannot bind '" + name + "'");
  }
  Node n;
  n.leaf = Leaf::parameter;
  n.name = name;
  n.shape = params_read_->value(name).shape();
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId Graph<T>::apply(std::unique_ptr<Op<T>> op, std::vector<NodeId> parents) {
  std::vector<Shape> shapes;
  shapes.reserve(parents.size());
  bool requires_grad = false;
  for (NodeId p : parents) {
    shapes.push_back(node(p).shape);
    requires_grad = requires_grad || node(p).requires_grad;
  }
  Shape out;
  try {
    out = op->infer_shape(shapes);
  } catch (const ShapeError& e) {
    std::string msg = std::string(op->kind()) + " at node #" + std::to_string(nodes_.size()) +
                      ": " + e.what() + "; inputs:";
    for (NodeId p : parents) msg += " " + describe(p) + "=" + shape_str(node(p).shape);
    throw ShapeError(msg);
  }
  Node n;
  n.op = std::move(op);
  n.parents = std::move(parents);
  n.shape = std::move(out);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return NodeId{nodes_.size() - 1};
}

template <typename T>
void Graph<T>::mark_output(const std::string& name, NodeId id) {
  node(id);
  outputs_.emplace_back(name, id);
}

template <typename T>
std::optional<NodeId> Graph<T>::find_input(const std::string& name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].leaf == Leaf::input && nodes_[i].name == name) return NodeId{i};
  }
  return std::nullopt;
}

template <typename T>
std::map<std::string, Array<T>> Graph<T>::forward(const std::map<std::string, Array<T>>& inputs) {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    n.has_grad = false;
    switch (n.leaf) {
      case Leaf::input: {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) throw Error("missing graph input '" + n.name + "'");
        if (it->second.shape() != n.shape) {
          throw ShapeError("input '" + n.name + "' at node #" + std::to_string(i) +
                           ": expected shape " + shape_str(n.shape) + ", got " +
                           shape_str(it->second.shape()));
        }
        n.value = it->second;
        break;
      }
      case Leaf::constant:
        break;
      case Leaf::parameter: {
        const Array<T>& v = params_read_->value(n.name);
        if (v.shape() != n.shape) {
          throw ShapeError("parameter '" + n.name + "' changed shape: expected " +
                           shape_str(n.shape) + ", got " + shape_str(v.shape()));
        }
        n.value = v;
        break;
      }
      case Leaf::none: {
        std::vector<const Array<T>*> in;
        in.reserve(n.parents.size());
        for (NodeId p : n.parents) in.push_back(&nodes_[p.index].value);
        if (n.value.shape() != n.shape) {
          n.value = Array<T>(n.shape);
        }
        n.op->forward(in, n.value);
        break;
      }
    }
  }
  evaluated_ = true;
  std::map<std::string, Array<T>> out;
  for (const auto& [name, id] : outputs_) out[name] = nodes_[id.index].value;
  return out;
}

template <typename T>
void Graph<T>::backward(NodeId loss) {
  if (!evaluated_) throw Error("backward called before forward");
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss " + describe(loss) + " must be scalar, has shape " +
                     shape_str(root.shape));
  }
  for (auto& n : nodes_) n.has_grad = false;
  root.grad = Array<T>(root.shape, T{1});
  root.has_grad = true;

  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || n.leaf != Leaf::none) continue;
    std::vector<const Array<T>*> in;
    std::vector<Array<T>*> grads;
    in.reserve(n.parents.size());
    grads.reserve(n.parents.size());
    bool any = false;
    for (NodeId p : n.parents) {
      Node& parent = nodes_[p.index];
      in.push_back(&parent.value);
      if (parent.requires_grad) {
        if (!parent.has_grad) {
          if (parent.grad.shape() != parent.shape) {
            parent.grad = Array<T>(parent.shape, T{0});
          } else {
            parent.grad.fill(T{0});
          }
          parent.has_grad = true;
        }
        grads.push_back(&parent.grad);
        any = true;
      } else {
        grads.push_back(nullptr);
      }
    }
    if (any) n.op->backward(in, n.value, n.grad, grads);
  }

  if (params_ == nullptr) return;
  for (auto& n : nodes_) {
    if (n.leaf != Leaf::parameter || !n.has_grad) continue;
    Array<T>& slot = params_->grad(n.name);
    for (std::size_t k = 0; k < slot.size(); ++k) slot[k] += n.grad[k];
  }
}

template <typename T>
const Array<T>& Graph<T>::value(NodeId id) const {
  if (!evaluated_) throw Error("graph not evaluated");
  return node(id).value;
}

template <typename T>
const Array<T>& Graph<T>::grad(NodeId id) const {
  const Node& n = node(id);
  if (!n.has_grad) throw Error("no gradient recorded for " + describe(id));
  return n.grad;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace metabdc
