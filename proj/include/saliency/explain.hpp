#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "saliency/graph.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

enum class Method { cam, gradcam, gbp, guided_gradcam, occlusion };

std::string_view method_name(Method method);
/// Accepts "cam", "gradcam", "gbp", "guided-gradcam" and "occlusion".
Method parse_method(std::string_view text);

/// Coarse localization map at feature-map resolution (or upsampled to the
/// input resolution). Normalized maps lie in [0,1].
struct Heatmap {
  Grid grid;
  bool normalized = false;
  std::string layer;
  std::size_t class_index = 0;
  Method method = Method::gradcam;
};

/// Signed image-shaped attribution [C,H,W].
struct PixelAttribution {
  TensorD values;
  Method method = Method::gbp;
};

/// Channel weights from target-layer gradients [K,u,v]: the spatial mean of
/// each gradient map.
TensorD compute_alpha(const TensorD& gradients);

/// ReLU(sum_k alpha_k * A^k) for activations [K,u,v]. Unnormalized.
Heatmap grad_cam(const TensorD& activations, const TensorD& alpha);

/// sum_k w_k * A^k for activations [K,u,v], without clamping. Unnormalized.
Heatmap cam(const TensorD& activations, const TensorD& class_weights);

/// Min-max rescale to [0,1]; a constant grid becomes all zeros.
Heatmap normalize(const Heatmap& map);

/// Corner-aligned bilinear upsampling. Downsampling is rejected.
Heatmap upsample(const Heatmap& map, std::size_t height, std::size_t width);

/// gbp[c,h,w] * map[h,w], the map broadcast across channels.
PixelAttribution guided_grad_cam(const PixelAttribution& gbp, const Heatmap& map);

/// Nodes involved in CAM: feature maps -> GAP -> the single score layer.
struct CamBinding {
  NodeId features = 0;
  NodeId gap = 0;
  NodeId dense = 0;
};

/// Throws NotCamCompatible unless the score layer is fed directly by a GAP.
template <typename T>
CamBinding cam_binding(const Graph<T>& graph);

/// "last-conv" picks the rectified output of the last conv2d layer (the conv
/// itself when no ReLU follows it); any other string must name a layer.
template <typename T>
NodeId resolve_target_layer(const Graph<T>& graph, std::string_view layer);

/// Lowest index wins ties.
std::size_t argmax_class(std::span<const double> scores);

struct ExplainRequest {
  Method method = Method::gradcam;
  /// nullopt selects the top-scoring class.
  std::optional<std::size_t> class_index;
  std::string layer = "last-conv";
};

struct Explanation {
  Method method = Method::gradcam;
  std::size_t class_index = 0;
  double score = 0.0;
  std::vector<double> scores;
  std::string layer;
  /// Normalized map at feature resolution (cam, gradcam, guided-gradcam).
  std::optional<Heatmap> heatmap;
  /// `heatmap` upsampled to the input resolution.
  std::optional<Heatmap> upsampled;
  /// Pixel-space result (gbp, guided-gradcam).
  std::optional<PixelAttribution> attribution;
};

/// forward -> one-hot seed -> backward -> alpha -> weighted map -> normalize
/// -> upsample, plus guided backprop and fusion where the method needs it.
/// `image` is a single preprocessed sample [C,H,W].
template <typename T>
Explanation explain(Graph<T>& graph, const Tensor<T>& image, const ExplainRequest& request);

/// Drops a leading batch dimension of extent 1 and widens to double.
template <typename T>
TensorD squeeze_batch(const Tensor<T>& batched);

}  // namespace saliency
