#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "saliency/tensor.hpp"

namespace saliency {

enum class OpKind { input, conv2d, relu, maxpool2d, gap, flatten, dense, softmax };

std::string_view op_kind_name(OpKind kind);

using NodeId = std::size_t;

/// How ReLU nodes route gradients during a reverse sweep.
enum class BackpropMode {
  standard,
  /// Guided backpropagation: a ReLU passes gradient only where both its
  /// forward input and the incoming gradient are positive.
  guided,
};

/// One-hot seed placed on an output node (normally the pre-softmax scores).
struct GradientSeed {
  NodeId node = 0;
  std::size_t class_index = 0;
};

template <typename T>
struct Node {
  OpKind kind = OpKind::input;
  std::string name;
  std::vector<NodeId> inputs;

  // Parameters are shared between copies of a graph; they are never mutated.
  std::shared_ptr<const Tensor<T>> weight;
  std::shared_ptr<const Tensor<T>> bias;
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  Extent2 window{0, 0};
  Shape sample_shape;  // input nodes only, excludes batch

  // Forward cache.
  Tensor<T> output;
  std::vector<std::size_t> argmax;
  bool evaluated = false;
};

/// Recorded feed-forward computation supporting reverse-mode sweeps.
///
/// Nodes are appended in topological order (inputs always precede their
/// consumers). A graph owns its forward cache, so a single instance is not
/// thread-safe; copies share parameters and can run on separate threads.
template <typename T>
class Graph {
 public:
  /// `sample_shape` excludes the batch dimension, e.g. [C,H,W].
  NodeId add_input(std::string name, Shape sample_shape);
  NodeId add_conv2d(std::string name, NodeId input, std::shared_ptr<const Tensor<T>> kernel,
                    std::shared_ptr<const Tensor<T>> bias, Extent2 stride, Extent2 padding);
  NodeId add_relu(std::string name, NodeId input);
  NodeId add_maxpool2d(std::string name, NodeId input, Extent2 window, Extent2 stride);
  NodeId add_gap(std::string name, NodeId input);
  NodeId add_flatten(std::string name, NodeId input);
  NodeId add_dense(std::string name, NodeId input, std::shared_ptr<const Tensor<T>> weight,
                   std::shared_ptr<const Tensor<T>> bias);
  NodeId add_softmax(std::string name, NodeId input);

  /// The node whose output forward() returns. Defaults to the last dense
  /// node added, i.e. the pre-softmax class scores.
  void set_score_node(NodeId id);
  NodeId score_node() const;
  NodeId input_node() const;
  /// Declared per-sample input shape, e.g. [C,H,W].
  const Shape& input_shape() const { return nodes_.at(input_node()).sample_shape; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node<T>& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<Node<T>>& nodes() const noexcept { return nodes_; }
  std::optional<NodeId> find(std::string_view name) const;
  /// Like find() but throws UnknownLayer.
  NodeId require(std::string_view name) const;

  /// Runs every node on `input` ([N,C,H,W], or [C,H,W] for a single sample)
  /// and returns the score node's output.
  Tensor<T> forward(const Tensor<T>& input);

  bool evaluated() const noexcept { return !nodes_.empty() && nodes_.back().evaluated; }
  const Tensor<T>& output(NodeId id) const;

  /// Gradient of sum(seed_gradient * output(seed_node)) with respect to the
  /// output of `target`. Requires a prior forward() and that `target` is an
  /// ancestor of (or equal to) `seed_node`.
  Tensor<T> backward(NodeId seed_node, const Tensor<T>& seed_gradient, NodeId target,
                     BackpropMode mode = BackpropMode::standard) const;

  /// d y^c / d output(target) for a one-hot seed.
  Tensor<T> backward(const GradientSeed& seed, NodeId target) const;

  /// Input-space gradient under the guided ReLU rule.
  Tensor<T> backward_guided(const GradientSeed& seed) const;

  /// Builds the one-hot seed tensor matching a node's output.
  Tensor<T> one_hot_seed(const GradientSeed& seed) const;

  bool is_ancestor(NodeId ancestor, NodeId descendant) const;

 private:
  NodeId append(Node<T> node);
  void evaluate(Node<T>& node);

  std::vector<Node<T>> nodes_;
  std::optional<NodeId> score_node_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace saliency
