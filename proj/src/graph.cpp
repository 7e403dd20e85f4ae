#include "saliency/graph.hpp"

#include <algorithm>
#include <cmath>

#include "saliency/kernels.hpp"

namespace saliency {

std::string_view op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::gap: return "gap";
    case OpKind::flatten: return "flatten";
    case OpKind::dense: return "dense";
    case OpKind::softmax: return "softmax";
  }
  return "unknown";
}

template <typename T>
NodeId Graph<T>::append(Node<T> node) {
  for (NodeId in : node.inputs) {
    if (in >= nodes_.size()) {
      throw Error(ErrorKind::InvalidArgument, "node '" + node.name + "' refers to unknown input id " +
                                                  std::to_string(in));
    }
  }
  if (find(node.name)) throw Error(ErrorKind::InvalidArgument, "duplicate node name '" + node.name + "'");
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::add_input(std::string name, Shape sample_shape) {
  if (!nodes_.empty()) throw Error(ErrorKind::InvalidArgument, "the input node must be the first node");
  Node<T> node;
  node.kind = OpKind::input;
  node.name = std::move(name);
  node.sample_shape = std::move(sample_shape);
  return append(std::move(node));
}

template <typename T>
NodeId Graph<T>::add_conv2d(std::string name, NodeId input, std::shared_ptr<const Tensor<T>> kernel,
                            std::shared_ptr<const Tensor<T>> bias, Extent2 stride, Extent2 padding) {
  if (!kernel || !bias) throw Error(ErrorKind::InvalidArgument, "conv2d '" + name + "' needs kernel and bias");
  Node<T> node;
  node.kind = OpKind::conv2d;
  node.name = std::move(name);
  node.inputs = {input};
  node.weight = std::move(kernel);
  node.bias = std::move(bias);
  node.stride = stride;
  node.padding = padding;
  return append(std::move(node));
}

template <typename T>
NodeId Graph<T>::add_relu(std::string name, NodeId input) {
  Node<T> node;
  node.kind = OpKind::relu;
  node.name = std::move(name);
  node.inputs = {input};
  return append(std::move(node));
}

template <typename T>
NodeId Graph<T>::add_maxpool2d(std::string name, NodeId input, Extent2 window, Extent2 stride) {
  Node<T> node;
  node.kind = OpKind::maxpool2d;
  node.name = std::move(name);
  node.inputs = {input};
  node.window = window;
  node.stride = stride;
  return append(std::move(node));
}

template <typename T>
NodeId Graph<T>::add_gap(std::string name, NodeId input) {
  Node<T> node;
  node.kind = OpKind::gap;
  node.name = std::move(name);
  node.inputs = {input};
  return append(std::move(node));
}

template <typename T>
NodeId Graph<T>::add_flatten(std::string name, NodeId input) {
  Node<T> node;
  node.kind = OpKind::flatten;
  node.name = std::move(name);
  node.inputs = {input};
  return append(std::move(node));
}

template <typename T>
NodeId Graph<T>::add_dense(std::string name, NodeId input, std::shared_ptr<const Tensor<T>> weight,
                           std::shared_ptr<const Tensor<T>> bias) {
  if (!weight || !bias) throw Error(ErrorKind::InvalidArgument, "dense '" + name + "' needs weight and bias");
  Node<T> node;
  node.kind = OpKind::dense;
  node.name = std::move(name);
  node.inputs = {input};
  node.weight = std::move(weight);
  node.bias = std::move(bias);
  return append(std::move(node));
}

template <typename T>
NodeId Graph<T>::add_softmax(std::string name, NodeId input) {
  Node<T> node;
  node.kind = OpKind::softmax;
  node.name = std::move(name);
  node.inputs = {input};
  return append(std::move(node));
}

template <typename T>
void Graph<T>::set_score_node(NodeId id) {
  if (id >= nodes_.size()) throw Error(ErrorKind::InvalidArgument, "score node id out of range");
  score_node_ = id;
}

template <typename T>
NodeId Graph<T>::score_node() const {
  if (score_node_) return *score_node_;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].kind == OpKind::dense) return i;
  }
  if (nodes_.empty()) throw Error(ErrorKind::GraphStateError, "empty graph has no score node");
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::input_node() const {
  if (nodes_.empty() || nodes_.front().kind != OpKind::input) {
    throw Error(ErrorKind::GraphStateError, "graph has no input node");
  }
  return 0;
}

template <typename T>
std::optional<NodeId> Graph<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename T>
NodeId Graph<T>::require(std::string_view name) const {
  if (auto id = find(name)) return *id;
  throw Error(ErrorKind::UnknownLayer, "no layer named '" + std::string(name) + "'");
}

template <typename T>
void Graph<T>::evaluate(Node<T>& node) {
  if (node.kind == OpKind::input) return;
  const Tensor<T>& in = nodes_[node.inputs.at(0)].output;
  switch (node.kind) {
    case OpKind::input:
      break;
    case OpKind::conv2d:
      node.output = kernels::conv2d(in, *node.weight, *node.bias, node.stride, node.padding);
      break;
    case OpKind::relu:
      node.output = kernels::relu(in);
      break;
    case OpKind::maxpool2d: {
      auto pooled = kernels::maxpool2d(in, node.window, node.stride);
      node.output = std::move(pooled.output);
      node.argmax = std::move(pooled.argmax);
      break;
    }
    case OpKind::gap:
      node.output = kernels::global_average_pool(in);
      break;
    case OpKind::flatten: {
      const std::size_t batch = in.dim(0);
      node.output = in.reshaped({batch, in.size() / batch});
      break;
    }
    case OpKind::dense:
      node.output = kernels::dense(in, *node.weight, *node.bias);
      break;
    case OpKind::softmax:
      node.output = kernels::softmax(in);
      break;
  }
}

template <typename T>
Tensor<T> Graph<T>::forward(const Tensor<T>& input) {
  auto& head = nodes_.at(input_node());
  const Shape& declared = head.sample_shape;
  Tensor<T> batched;
  if (input.shape() == declared) {
    Shape with_batch{1};
    with_batch.insert(with_batch.end(), declared.begin(), declared.end());
    batched = input.reshaped(std::move(with_batch));
  } else if (input.rank() == declared.size() + 1 && std::equal(declared.begin(), declared.end(),
                                                                 input.shape().begin() + 1)) {
    batched = input;
  } else {
    throw Error(ErrorKind::ShapeMismatch, "layer '" + head.name + "': input " + shape_to_string(input.shape()) +
                                              " does not match declared shape " + shape_to_string(declared));
  }
  for (auto& node : nodes_) node.evaluated = false;
  head.output = std::move(batched);
  head.evaluated = true;

  for (std::size_t i = 1; i < nodes_.size(); ++i) {
    auto& node = nodes_[i];
    try {
      evaluate(node);
    } catch (const Error& e) {
      throw Error(e.kind(), "layer '" + node.name + "' (" + std::string(op_kind_name(node.kind)) + "): " + e.detail());
    }
    node.evaluated = true;
  }
  return nodes_[score_node()].output;
}

template <typename T>
const Tensor<T>& Graph<T>::output(NodeId id) const {
  const auto& node = nodes_.at(id);
  if (!node.evaluated) {
    throw Error(ErrorKind::GraphStateError, "layer '" + node.name + "' has no output before forward()");
  }
  return node.output;
}

template <typename T>
bool Graph<T>::is_ancestor(NodeId ancestor, NodeId descendant) const {
  if (ancestor > descendant || descendant >= nodes_.size()) return false;
  std::vector<bool> reach(descendant + 1, false);
  reach[descendant] = true;
  for (std::size_t i = descendant + 1; i-- > ancestor;) {
    if (!reach[i]) continue;
    if (i == ancestor) return true;
    for (NodeId in : nodes_[i].inputs) reach[in] = true;
  }
  return false;
}

template <typename T>
Tensor<T> Graph<T>::one_hot_seed(const GradientSeed& seed) const {
  const auto& out = output(seed.node);
  if (out.dim(0) != 1 || seed.class_index >= out.size()) {
    throw Error(ErrorKind::InvalidArgument, "class index " + std::to_string(seed.class_index) +
                                                " out of range for layer '" + nodes_[seed.node].name + "' output " +
                                                shape_to_string(out.shape()));
  }
  Tensor<T> grad(out.shape());
  grad[seed.class_index] = T{1};
  return grad;
}

template <typename T>
Tensor<T> Graph<T>::backward(NodeId seed_node, const Tensor<T>& seed_gradient, NodeId target,
                             BackpropMode mode) const {
  if (seed_node >= nodes_.size() || target >= nodes_.size()) {
    throw Error(ErrorKind::InvalidArgument, "backward node id out of range");
  }
  if (!evaluated()) throw Error(ErrorKind::GraphStateError, "backward() called before forward()");
  if (seed_gradient.shape() != nodes_[seed_node].output.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "seed gradient " + shape_to_string(seed_gradient.shape()) +
                                              " does not match layer '" + nodes_[seed_node].name + "' output " +
                                              shape_to_string(nodes_[seed_node].output.shape()));
  }
  if (!is_ancestor(target, seed_node)) {
    throw Error(ErrorKind::GraphStateError, "layer '" + nodes_[target].name + "' is not an ancestor of '" +
                                                nodes_[seed_node].name + "'");
  }

  std::vector<std::optional<Tensor<T>>> grads(seed_node + 1);
  grads[seed_node] = seed_gradient;
  auto accumulate = [&](NodeId id, Tensor<T> g) {
    if (!grads[id]) {
      grads[id] = std::move(g);
      return;
    }
    auto dst = grads[id]->data();
    const auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };

  for (std::size_t i = seed_node + 1; i-- > target + 1;) {
    if (!grads[i]) continue;
    const auto& node = nodes_[i];
    const Tensor<T>& g = *grads[i];
    const NodeId in_id = node.inputs.at(0);
    const Tensor<T>& in = nodes_[in_id].output;
    switch (node.kind) {
      case OpKind::input:
        break;
      case OpKind::conv2d:
        accumulate(in_id, kernels::conv2d_backward_input(g, *node.weight, in.shape(), node.stride, node.padding));
        break;
      case OpKind::relu:
        accumulate(in_id, kernels::relu_backward(g, in, mode == BackpropMode::guided));
        break;
      case OpKind::maxpool2d:
        accumulate(in_id, kernels::maxpool2d_backward(g, node.argmax, in.shape()));
        break;
      case OpKind::gap:
        accumulate(in_id, kernels::global_average_pool_backward(g, in.shape()));
        break;
      case OpKind::flatten:
        accumulate(in_id, g.reshaped(in.shape()));
        break;
      case OpKind::dense:
        accumulate(in_id, kernels::dense_backward_input(g, *node.weight));
        break;
      case OpKind::softmax:
        accumulate(in_id, kernels::softmax_backward(g, node.output));
        break;
    }
  }
  if (!grads[target]) return Tensor<T>(nodes_[target].output.shape());
  return std::move(*grads[target]);
}

template <typename T>
Tensor<T> Graph<T>::backward(const GradientSeed& seed, NodeId target) const {
  return backward(seed.node, one_hot_seed(seed), target, BackpropMode::standard);
}

template <typename T>
Tensor<T> Graph<T>::backward_guided(const GradientSeed& seed) const {
  return backward(seed.node, one_hot_seed(seed), input_node(), BackpropMode::guided);
}

template class Graph<float>;
template class Graph<double>;

}  // namespace saliency
