#include "saliency/explain.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace saliency {

namespace {

constexpr std::array<std::string_view, 5> kMethodNames = {"cam", "gradcam", "gbp", "guided-gradcam", "occlusion"};

void require_feature_maps(const TensorD& activations, const char* what) {
  if (activations.rank() != 3) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + " expects [K,u,v] feature maps, got " +
                                              shape_to_string(activations.shape()));
  }
}

Heatmap weighted_sum(const TensorD& activations, const TensorD& weights, bool clamp, Method method) {
  require_feature_maps(activations, method == Method::cam ? "cam" : "grad_cam");
  const std::size_t maps = activations.dim(0), rows = activations.dim(1), cols = activations.dim(2);
  if (weights.shape() != Shape{maps}) {
    throw Error(ErrorKind::ShapeMismatch, "weights " + shape_to_string(weights.shape()) + " do not match " +
                                              std::to_string(maps) + " feature maps");
  }
  Grid grid(rows, cols);
  const std::size_t area = rows * cols;
  for (std::size_t i = 0; i < area; ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < maps; ++k) sum += weights[k] * activations[k * area + i];
    grid.values[i] = clamp ? std::max(sum, 0.0) : sum;
  }
  Heatmap map;
  map.grid = std::move(grid);
  map.method = method;
  return map;
}

}  // namespace

std::string_view method_name(Method method) { return kMethodNames[static_cast<std::size_t>(method)]; }

Method parse_method(std::string_view text) {
  for (std::size_t i = 0; i < kMethodNames.size(); ++i) {
    if (kMethodNames[i] == text) return static_cast<Method>(i);
  }
  throw Error(ErrorKind::InvalidArgument, "unknown method '" + std::string(text) +
                                              "' (expected cam, gradcam, gbp, guided-gradcam or occlusion)");
}

TensorD compute_alpha(const TensorD& gradients) {
  require_feature_maps(gradients, "compute_alpha");
  const std::size_t maps = gradients.dim(0);
  const std::size_t area = gradients.dim(1) * gradients.dim(2);
  TensorD alpha({maps});
  for (std::size_t k = 0; k < maps; ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < area; ++i) sum += gradients[k * area + i];
    alpha[k] = sum / static_cast<double>(area);
  }
  return alpha;
}

Heatmap grad_cam(const TensorD& activations, const TensorD& alpha) {
  return weighted_sum(activations, alpha, true, Method::gradcam);
}

Heatmap cam(const TensorD& activations, const TensorD& class_weights) {
  return weighted_sum(activations, class_weights, false, Method::cam);
}

Heatmap normalize(const Heatmap& map) {
  Heatmap out = map;
  out.normalized = true;
  if (map.grid.values.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(map.grid.values.begin(), map.grid.values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(out.grid.values.begin(), out.grid.values.end(), 0.0);
    return out;
  }
  const double range = hi - lo;
  for (auto& v : out.grid.values) v = std::clamp((v - lo) / range, 0.0, 1.0);
  return out;
}

Heatmap upsample(const Heatmap& map, std::size_t height, std::size_t width) {
  const Grid& src = map.grid;
  if (src.rows == 0 || src.cols == 0) throw Error(ErrorKind::InvalidArgument, "cannot upsample an empty heatmap");
  if (height < src.rows || width < src.cols) {
    throw Error(ErrorKind::InvalidArgument, "upsample target " + std::to_string(height) + "x" + std::to_string(width) +
                                                " is smaller than source " + std::to_string(src.rows) + "x" +
                                                std::to_string(src.cols));
  }
  // Corner-aligned sampling: output corners coincide with input corners.
  auto coord = [](std::size_t out_i, std::size_t out_n, std::size_t in_n) {
    if (out_n <= 1 || in_n <= 1) return 0.0;
    return static_cast<double>(out_i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
  };
  Heatmap out = map;
  out.grid = Grid(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = coord(y, height, src.rows);
    const auto y0 = std::min(static_cast<std::size_t>(std::floor(sy)), src.rows - 1);
    const std::size_t y1 = std::min(y0 + 1, src.rows - 1);
    const double ty = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = coord(x, width, src.cols);
      const auto x0 = std::min(static_cast<std::size_t>(std::floor(sx)), src.cols - 1);
      const std::size_t x1 = std::min(x0 + 1, src.cols - 1);
      const double tx = sx - static_cast<double>(x0);
      const double a = src(y0, x0), b = src(y0, x1), c = src(y1, x0), d = src(y1, x1);
      const double top = a + tx * (b - a);
      const double bottom = c + tx * (d - c);
      const double v = top + ty * (bottom - top);
      const double lo = std::min({a, b, c, d}), hi = std::max({a, b, c, d});
      out.grid(y, x) = std::clamp(v, lo, hi);
    }
  }
  return out;
}

PixelAttribution guided_grad_cam(const PixelAttribution& gbp, const Heatmap& map) {
  const TensorD& g = gbp.values;
  if (g.rank() != 3 || g.dim(1) != map.grid.rows || g.dim(2) != map.grid.cols) {
    throw Error(ErrorKind::ShapeMismatch, "guided backprop " + shape_to_string(g.shape()) + " does not match heatmap " +
                                              std::to_string(map.grid.rows) + "x" + std::to_string(map.grid.cols));
  }
  PixelAttribution out{g, Method::guided_gradcam};
  const std::size_t area = map.grid.size();
  for (std::size_t c = 0; c < g.dim(0); ++c) {
    for (std::size_t i = 0; i < area; ++i) out.values[c * area + i] = g[c * area + i] * map.grid.values[i];
  }
  return out;
}

template <typename T>
CamBinding cam_binding(const Graph<T>& graph) {
  const NodeId score = graph.score_node();
  const auto& dense = graph.node(score);
  if (dense.kind != OpKind::dense) {
    throw Error(ErrorKind::NotCamCompatible, "score layer '" + dense.name + "' is not a dense layer");
  }
  const NodeId gap = dense.inputs.at(0);
  if (graph.node(gap).kind != OpKind::gap) {
    throw Error(ErrorKind::NotCamCompatible, "CAM needs global average pooling feeding the score layer '" +
                                                 dense.name + "' directly, found '" + graph.node(gap).name + "' (" +
                                                 std::string(op_kind_name(graph.node(gap).kind)) + ")");
  }
  for (const auto& node : graph.nodes()) {
    if (node.kind == OpKind::dense && node.name != dense.name) {
      throw Error(ErrorKind::NotCamCompatible, "CAM does not apply to networks with more than one dense layer ('" +
                                                   node.name + "')");
    }
  }
  return {graph.node(gap).inputs.at(0), gap, score};
}

template <typename T>
NodeId resolve_target_layer(const Graph<T>& graph, std::string_view layer) {
  if (layer != "last-conv") return graph.require(layer);
  std::optional<NodeId> conv;
  for (NodeId i = 0; i < graph.size(); ++i) {
    if (graph.node(i).kind == OpKind::conv2d) conv = i;
  }
  if (!conv) throw Error(ErrorKind::UnknownLayer, "model has no conv2d layer for 'last-conv'");
  for (NodeId i = *conv + 1; i < graph.size(); ++i) {
    const auto& node = graph.node(i);
    if (node.kind == OpKind::relu && node.inputs.at(0) == *conv) return i;
  }
  return *conv;
}

std::size_t argmax_class(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorKind::InvalidArgument, "no class scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

template <typename T>
TensorD squeeze_batch(const Tensor<T>& batched) {
  if (batched.rank() < 2 || batched.dim(0) != 1) {
    throw Error(ErrorKind::ShapeMismatch, "expected a single-sample batch, got " + shape_to_string(batched.shape()));
  }
  Shape shape(batched.shape().begin() + 1, batched.shape().end());
  return batched.template cast<double>().reshaped(std::move(shape));
}

template <typename T>
Explanation explain(Graph<T>& graph, const Tensor<T>& image, const ExplainRequest& request) {
  if (request.method == Method::occlusion) {
    throw Error(ErrorKind::InvalidArgument, "occlusion is computed by the faithfulness sweep, not explain()");
  }
  if (image.shape() != graph.input_shape()) {
    throw Error(ErrorKind::ShapeMismatch, "image " + shape_to_string(image.shape()) +
                                              " does not match model input " + shape_to_string(graph.input_shape()));
  }
  std::optional<CamBinding> binding;
  if (request.method == Method::cam) {
    binding = cam_binding(graph);
    if (request.layer != "last-conv" && graph.require(request.layer) != binding->features) {
      throw Error(ErrorKind::NotCamCompatible, "CAM is defined only on the feature maps feeding the GAP layer ('" +
                                                   graph.node(binding->features).name + "')");
    }
  }

  Explanation result;
  result.method = request.method;
  const Tensor<T> scores = graph.forward(image);
  const auto as_double = scores.template cast<double>();
  result.scores = as_double.values();
  result.class_index = request.class_index.value_or(argmax_class(result.scores));
  if (result.class_index >= result.scores.size()) {
    throw Error(ErrorKind::InvalidArgument, "class " + std::to_string(result.class_index) + " out of range; model has " +
                                                std::to_string(result.scores.size()) + " classes");
  }
  result.score = result.scores[result.class_index];
  const GradientSeed seed{graph.score_node(), result.class_index};
  const std::size_t height = image.dim(1), width = image.dim(2);

  if (request.method == Method::cam) {
    const NodeId features = binding->features;
    result.layer = graph.node(features).name;
    const auto& weight = *graph.node(binding->dense).weight;
    const std::size_t maps = weight.dim(1);
    TensorD row({maps});
    for (std::size_t k = 0; k < maps; ++k) row[k] = static_cast<double>(weight[result.class_index * maps + k]);
    Heatmap raw = cam(squeeze_batch(graph.output(features)), row);
    raw.layer = result.layer;
    raw.class_index = result.class_index;
    result.heatmap = normalize(raw);
    result.upsampled = upsample(*result.heatmap, height, width);
    return result;
  }

  if (request.method == Method::gradcam || request.method == Method::guided_gradcam) {
    const NodeId target = resolve_target_layer(graph, request.layer);
    result.layer = graph.node(target).name;
    const auto& activations = graph.output(target);
    if (activations.rank() != 4) {
      throw Error(ErrorKind::InvalidArgument, "layer '" + result.layer + "' has no spatial feature maps (output " +
                                                  shape_to_string(activations.shape()) + ")");
    }
    const TensorD gradients = squeeze_batch(graph.backward(seed, target));
    Heatmap raw = grad_cam(squeeze_batch(activations), compute_alpha(gradients));
    raw.layer = result.layer;
    raw.class_index = result.class_index;
    raw.method = request.method;
    result.heatmap = normalize(raw);
    result.upsampled = upsample(*result.heatmap, height, width);
  }

  if (request.method == Method::gbp || request.method == Method::guided_gradcam) {
    PixelAttribution gbp{squeeze_batch(graph.backward_guided(seed)), Method::gbp};
    result.attribution = request.method == Method::gbp ? std::move(gbp) : guided_grad_cam(gbp, *result.upsampled);
    if (request.method == Method::gbp) result.layer = graph.node(graph.input_node()).name;
  }
  return result;
}

template CamBinding cam_binding(const Graph<float>&);
template CamBinding cam_binding(const Graph<double>&);
template NodeId resolve_target_layer(const Graph<float>&, std::string_view);
template NodeId resolve_target_layer(const Graph<double>&, std::string_view);
template TensorD squeeze_batch(const Tensor<float>&);
template TensorD squeeze_batch(const Tensor<double>&);
template Explanation explain(Graph<float>&, const Tensor<float>&, const ExplainRequest&);
template Explanation explain(Graph<double>&, const Tensor<double>&, const ExplainRequest&);

}  // namespace saliency
