#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "saliency/graph.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

enum class LayerType { conv2d, relu, maxpool2d, gap, flatten, dense, softmax };

std::string_view layer_type_name(LayerType type);

struct LayerSpec {
  std::string name;
  LayerType type = LayerType::relu;
  // conv2d
  std::size_t out_channels = 0;
  Extent2 kernel{0, 0};
  Extent2 padding{0, 0};
  // conv2d and maxpool2d
  Extent2 stride{1, 1};
  // maxpool2d
  Extent2 window{0, 0};
  // dense
  std::size_t out_features = 0;

  bool has_parameters() const { return type == LayerType::conv2d || type == LayerType::dense; }
};

/// Per-channel input normalization: x = (sample/255 - mean) / std.
struct Preprocess {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Architecture description loaded from the JSON model file. Shapes below
/// exclude the batch dimension.
struct ModelSpec {
  std::string name;
  Shape input_shape;  // [C,H,W]
  std::vector<LayerSpec> layers;
  std::vector<std::string> class_labels;
  Preprocess preprocess;

  /// Output shape of each layer, filled by validation.
  std::vector<Shape> output_shapes;

  std::size_t num_classes() const;
  /// Index of the terminal dense layer producing pre-softmax scores.
  std::size_t score_layer() const;
  std::optional<std::size_t> find_layer(std::string_view name) const;
};

/// Expected parameter shape, e.g. "conv1.weight" -> [K,C,kh,kw].
struct ParameterSlot {
  std::string name;
  Shape shape;
};

/// Parses and validates the JSON model description, including shape chaining.
ModelSpec parse_model_spec(std::string_view json_text);
ModelSpec load_model_spec(const std::filesystem::path& path);

/// Parameters every layer of `spec` needs, in layer order.
std::vector<ParameterSlot> parameter_slots(const ModelSpec& spec);

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using ParameterTensor = std::variant<TensorF, TensorD>;

DType dtype_of(const ParameterTensor& tensor);
const Shape& shape_of(const ParameterTensor& tensor);

/// Named parameters in insertion order. Serialization preserves both the
/// order and each tensor's stored dtype, so load/save is bit-exact.
class WeightStore {
 public:
  void add(std::string name, ParameterTensor tensor);

  const ParameterTensor* find(std::string_view name) const;
  const ParameterTensor& at(std::string_view name) const;
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  const std::vector<std::pair<std::string, ParameterTensor>>& entries() const noexcept { return entries_; }

  /// Parameter converted to the engine dtype.
  template <typename T>
  Tensor<T> get(std::string_view name) const {
    return std::visit([](const auto& t) { return t.template cast<T>(); }, at(name));
  }

  friend bool operator==(const WeightStore&, const WeightStore&) = default;

 private:
  std::vector<std::pair<std::string, ParameterTensor>> entries_;
};

// GCW1 binary layout, all integers little-endian:
//   "GCW1" | u32 count | count x { u32 name_len | name | u8 dtype | u32 ndim |
//   ndim x u32 dim | payload }
inline constexpr std::size_t kWeightHeaderSize = 8;

std::vector<std::uint8_t> serialize_weights(const WeightStore& store);
WeightStore parse_weights(std::span<const std::uint8_t> bytes);
WeightStore read_weights(const std::filesystem::path& path);
void save_weights(const WeightStore& store, const std::filesystem::path& path);

/// Throws MissingParameter, OrphanParameter or ParameterShapeMismatch.
void validate_weights(const ModelSpec& spec, const WeightStore& store);

struct LoadedModel {
  ModelSpec spec;
  WeightStore weights;
};

LoadedModel load_model(const std::filesystem::path& spec_path, const std::filesystem::path& weights_path);

/// Graph with node "input" followed by one node per layer, named after the
/// layer. The score node is the terminal dense layer.
template <typename T>
Graph<T> build_graph(const ModelSpec& spec, const WeightStore& store);

extern template Graph<float> build_graph<float>(const ModelSpec&, const WeightStore&);
extern template Graph<double> build_graph<double>(const ModelSpec&, const WeightStore&);

struct LayerInfo {
  std::string name;
  std::string type;
  Shape output_shape;
  std::size_t parameters = 0;
};

std::vector<LayerInfo> describe(const ModelSpec& spec);

}  // namespace saliency
