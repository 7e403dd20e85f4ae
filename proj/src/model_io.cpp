#include "saliency/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <set>

#include "saliency/kernels.hpp"

namespace saliency {

namespace {

using nlohmann::json;

constexpr std::string_view kMagic = "GCW1";
constexpr std::uint32_t kMaxRank = 8;
constexpr long long kMaxExtent = 1 << 20;

std::string_view layer_type_names[] = {"conv2d", "relu", "maxpool2d", "gap", "flatten", "dense", "softmax"};

LayerType parse_layer_type(const std::string& text, const std::string& layer) {
  for (std::size_t i = 0; i < std::size(layer_type_names); ++i) {
    if (layer_type_names[i] == text) return static_cast<LayerType>(i);
  }
  throw Error(ErrorKind::ParseError, "layer '" + layer + "': unknown layer type '" + text + "'");
}

std::size_t positive_int(const json& value, const std::string& what) {
  if (!value.is_number_integer() || value.get<long long>() <= 0 || value.get<long long>() > kMaxExtent) {
    throw Error(ErrorKind::ParseError, what + " must be a positive integer no larger than 2^20");
  }
  return value.get<std::size_t>();
}

std::size_t non_negative_int(const json& value, const std::string& what) {
  if (!value.is_number_integer() || value.get<long long>() < 0 || value.get<long long>() > kMaxExtent) {
    throw Error(ErrorKind::ParseError, what + " must be a non-negative integer no larger than 2^20");
  }
  return value.get<std::size_t>();
}

// Accepts either a scalar or an [h, w] pair.
Extent2 parse_pair(const json& value, const std::string& what, bool allow_zero) {
  auto read = [&](const json& v) { return allow_zero ? non_negative_int(v, what) : positive_int(v, what); };
  if (value.is_array()) {
    if (value.size() != 2) throw Error(ErrorKind::ParseError, what + " must be an integer or a pair");
    return {read(value[0]), read(value[1])};
  }
  const std::size_t v = read(value);
  return {v, v};
}

Extent2 optional_pair(const json& layer, const char* key, Extent2 fallback, const std::string& name,
                      bool allow_zero) {
  if (!layer.contains(key)) return fallback;
  return parse_pair(layer.at(key), "layer '" + name + "': " + key, allow_zero);
}

[[noreturn]] void chain_error(const LayerSpec& layer, const std::string& detail) {
  throw Error(ErrorKind::ShapeChainError, "layer '" + layer.name + "' (" + std::string(layer_type_name(layer.type)) +
                                              "): " + detail);
}

Shape chain_shape(const LayerSpec& layer, const Shape& in) {
  switch (layer.type) {
    case LayerType::conv2d: {
      if (in.size() != 3) chain_error(layer, "expects [C,H,W] input, got " + shape_to_string(in));
      try {
        const auto h = kernels::window_output_extent(in[1], layer.kernel.h, layer.stride.h, layer.padding.h, "height");
        const auto w = kernels::window_output_extent(in[2], layer.kernel.w, layer.stride.w, layer.padding.w, "width");
        return {layer.out_channels, h, w};
      } catch (const Error& e) {
        chain_error(layer, e.detail() + " for input " + shape_to_string(in));
      }
    }
    case LayerType::maxpool2d: {
      if (in.size() != 3) chain_error(layer, "expects [C,H,W] input, got " + shape_to_string(in));
      try {
        const auto h = kernels::window_output_extent(in[1], layer.window.h, layer.stride.h, 0, "height");
        const auto w = kernels::window_output_extent(in[2], layer.window.w, layer.stride.w, 0, "width");
        return {in[0], h, w};
      } catch (const Error& e) {
        chain_error(layer, e.detail() + " for input " + shape_to_string(in));
      }
    }
    case LayerType::gap:
      if (in.size() != 3) chain_error(layer, "expects [C,H,W] input, got " + shape_to_string(in));
      return {in[0]};
    case LayerType::flatten:
      return {shape_numel(in)};
    case LayerType::dense:
      if (in.size() != 1) chain_error(layer, "expects a flat [D] input, got " + shape_to_string(in));
      return {layer.out_features};
    case LayerType::relu:
      return in;
    case LayerType::softmax:
      if (in.size() != 1) chain_error(layer, "expects a flat [D] input, got " + shape_to_string(in));
      return in;
  }
  return in;
}

void validate_structure(ModelSpec& spec) {
  if (spec.input_shape.size() != 3) {
    throw Error(ErrorKind::ParseError, "input_shape must be [C,H,W], got " + shape_to_string(spec.input_shape));
  }
  if (spec.layers.empty()) throw Error(ErrorKind::ShapeChainError, "model has no layers");

  std::set<std::string> names{"input"};
  for (const auto& layer : spec.layers) {
    if (layer.name.empty()) throw Error(ErrorKind::ParseError, "layer names must be non-empty");
    if (!names.insert(layer.name).second) {
      throw Error(ErrorKind::ParseError, "duplicate or reserved layer name '" + layer.name + "'");
    }
  }

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    if (layer.type == LayerType::softmax && i + 1 != spec.layers.size()) {
      chain_error(layer, "softmax may only appear as the last layer");
    }
  }
  const bool has_softmax = spec.layers.back().type == LayerType::softmax;
  if (has_softmax && spec.layers.size() < 2) {
    throw Error(ErrorKind::ShapeChainError, "softmax needs a dense score layer before it");
  }
  const std::size_t score = spec.score_layer();
  if (spec.layers[score].type != LayerType::dense) {
    throw Error(ErrorKind::ShapeChainError, "the last layer before an optional softmax must be a dense score layer");
  }

  constexpr std::size_t kMaxActivation = std::size_t{1} << 28;
  if (shape_numel(spec.input_shape) > kMaxActivation) {
    throw Error(ErrorKind::ParseError, "input_shape " + shape_to_string(spec.input_shape) + " is too large");
  }
  spec.output_shapes.clear();
  Shape current = spec.input_shape;
  for (const auto& layer : spec.layers) {
    current = chain_shape(layer, current);
    if (shape_numel(current) > kMaxActivation) chain_error(layer, "output " + shape_to_string(current) + " is too large");
    spec.output_shapes.push_back(current);
  }

  const std::size_t classes = spec.output_shapes[score].at(0);
  if (!spec.class_labels.empty() && spec.class_labels.size() != classes) {
    throw Error(ErrorKind::ParseError, "class_labels has " + std::to_string(spec.class_labels.size()) +
                                           " entries but the score layer produces " + std::to_string(classes));
  }

  const std::size_t channels = spec.input_shape[0];
  if (spec.preprocess.mean.empty()) spec.preprocess.mean.assign(channels, 0.5);
  if (spec.preprocess.std.empty()) spec.preprocess.std.assign(channels, 0.5);
  if (spec.preprocess.mean.size() != channels || spec.preprocess.std.size() != channels) {
    throw Error(ErrorKind::ParseError, "preprocess mean/std must have one entry per input channel");
  }
  for (double s : spec.preprocess.std) {
    if (!(s > 0.0) || !std::isfinite(s)) throw Error(ErrorKind::ParseError, "preprocess std must be positive");
  }
  for (double m : spec.preprocess.mean) {
    if (!std::isfinite(m)) throw Error(ErrorKind::ParseError, "preprocess mean must be finite");
  }
}

LayerSpec parse_layer(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::ParseError, "each layer must be a JSON object");
  LayerSpec layer;
  if (!j.contains("name") || !j.at("name").is_string()) {
    throw Error(ErrorKind::ParseError, "layer is missing a string 'name'");
  }
  layer.name = j.at("name").get<std::string>();
  if (!j.contains("type") || !j.at("type").is_string()) {
    throw Error(ErrorKind::ParseError, "layer '" + layer.name + "' is missing a string 'type'");
  }
  layer.type = parse_layer_type(j.at("type").get<std::string>(), layer.name);
  const std::string where = "layer '" + layer.name + "': ";
  switch (layer.type) {
    case LayerType::conv2d:
      if (!j.contains("out_channels") || !j.contains("kernel")) {
        throw Error(ErrorKind::ParseError, where + "conv2d needs out_channels and kernel");
      }
      layer.out_channels = positive_int(j.at("out_channels"), where + "out_channels");
      layer.kernel = parse_pair(j.at("kernel"), where + "kernel", false);
      layer.stride = optional_pair(j, "stride", {1, 1}, layer.name, false);
      layer.padding = optional_pair(j, "padding", {0, 0}, layer.name, true);
      break;
    case LayerType::maxpool2d:
      if (!j.contains("window")) throw Error(ErrorKind::ParseError, where + "maxpool2d needs window");
      layer.window = parse_pair(j.at("window"), where + "window", false);
      layer.stride = optional_pair(j, "stride", layer.window, layer.name, false);
      break;
    case LayerType::dense:
      if (!j.contains("out_features")) throw Error(ErrorKind::ParseError, where + "dense needs out_features");
      layer.out_features = positive_int(j.at("out_features"), where + "out_features");
      break;
    default:
      break;
  }
  return layer;
}

std::vector<double> parse_reals(const json& j, const std::string& what) {
  if (!j.is_array()) throw Error(ErrorKind::ParseError, what + " must be an array of numbers");
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) throw Error(ErrorKind::ParseError, what + " must be an array of numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

// Little-endian primitive IO. Floats travel as their IEEE-754 bit patterns.

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (n > remaining()) {
      throw Error(ErrorKind::TruncatedFile, std::string("weights file ends inside ") + what + " at byte " +
                                                std::to_string(pos_));
    }
  }

  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return value;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename T, typename Bits>
Tensor<T> decode_payload(const Shape& shape, ByteReader& reader, const std::string& name) {
  const std::size_t count = shape_numel(shape);
  reader.need(count * sizeof(Bits), "parameter payload");
  std::vector<T> values(count);
  for (auto& v : values) {
    v = std::bit_cast<T>(reader.le<Bits>("parameter payload"));
    if (!std::isfinite(v)) throw Error(ErrorKind::FormatError, "parameter '" + name + "' contains non-finite values");
  }
  return Tensor<T>(shape, std::move(values));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string_view layer_type_name(LayerType type) { return layer_type_names[static_cast<std::size_t>(type)]; }

std::size_t ModelSpec::score_layer() const {
  if (layers.empty()) throw Error(ErrorKind::ShapeChainError, "model has no layers");
  return layers.back().type == LayerType::softmax ? layers.size() - 2 : layers.size() - 1;
}

std::size_t ModelSpec::num_classes() const { return layers.at(score_layer()).out_features; }

std::optional<std::size_t> ModelSpec::find_layer(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  return std::nullopt;
}

ModelSpec parse_model_spec(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("model spec is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorKind::ParseError, "model spec must be a JSON object");

  ModelSpec spec;
  try {
    if (doc.contains("name")) {
      if (!doc.at("name").is_string()) throw Error(ErrorKind::ParseError, "name must be a string");
      spec.name = doc.at("name").get<std::string>();
    }
    if (!doc.contains("input_shape") || !doc.at("input_shape").is_array()) {
      throw Error(ErrorKind::ParseError, "model spec needs an input_shape array");
    }
    for (const auto& d : doc.at("input_shape")) spec.input_shape.push_back(positive_int(d, "input_shape entry"));

    if (!doc.contains("layers") || !doc.at("layers").is_array()) {
      throw Error(ErrorKind::ParseError, "model spec needs a layers array");
    }
    for (const auto& l : doc.at("layers")) spec.layers.push_back(parse_layer(l));

    if (doc.contains("class_labels")) {
      const auto& labels = doc.at("class_labels");
      if (!labels.is_array()) throw Error(ErrorKind::ParseError, "class_labels must be an array of strings");
      for (const auto& l : labels) {
        if (!l.is_string()) throw Error(ErrorKind::ParseError, "class_labels must be an array of strings");
        spec.class_labels.push_back(l.get<std::string>());
      }
    }
    if (doc.contains("preprocess")) {
      const auto& pre = doc.at("preprocess");
      if (!pre.is_object()) throw Error(ErrorKind::ParseError, "preprocess must be an object");
      if (pre.contains("mean")) spec.preprocess.mean = parse_reals(pre.at("mean"), "preprocess.mean");
      if (pre.contains("std")) spec.preprocess.std = parse_reals(pre.at("std"), "preprocess.std");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("malformed model spec: ") + e.what());
  }

  validate_structure(spec);
  return spec;
}

ModelSpec load_model_spec(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_model_spec(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::vector<ParameterSlot> parameter_slots(const ModelSpec& spec) {
  std::vector<ParameterSlot> slots;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    const Shape& in = i == 0 ? spec.input_shape : spec.output_shapes.at(i - 1);
    if (layer.type == LayerType::conv2d) {
      slots.push_back({layer.name + ".weight", {layer.out_channels, in.at(0), layer.kernel.h, layer.kernel.w}});
      slots.push_back({layer.name + ".bias", {layer.out_channels}});
    } else if (layer.type == LayerType::dense) {
      slots.push_back({layer.name + ".weight", {layer.out_features, in.at(0)}});
      slots.push_back({layer.name + ".bias", {layer.out_features}});
    }
  }
  return slots;
}

DType dtype_of(const ParameterTensor& tensor) {
  return std::holds_alternative<TensorF>(tensor) ? DType::f32 : DType::f64;
}

const Shape& shape_of(const ParameterTensor& tensor) {
  return std::visit([](const auto& t) -> const Shape& { return t.shape(); }, tensor);
}

void WeightStore::add(std::string name, ParameterTensor tensor) {
  if (name.empty()) throw Error(ErrorKind::InvalidArgument, "parameter names must be non-empty");
  if (find(name)) throw Error(ErrorKind::InvalidArgument, "duplicate parameter '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(tensor));
}

const ParameterTensor* WeightStore::find(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return &t;
  }
  return nullptr;
}

const ParameterTensor& WeightStore::at(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  throw Error(ErrorKind::MissingParameter, std::string(name));
}

std::vector<std::uint8_t> serialize_weights(const WeightStore& store) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, tensor] : store.entries()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(dtype_of(tensor)));
    const Shape& shape = shape_of(tensor);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    std::visit(
        [&](const auto& t) {
          using T = typename std::decay_t<decltype(t)>::value_type;
          using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
          for (T v : t.data()) put_le<Bits>(out, std::bit_cast<Bits>(v));
        },
        tensor);
  }
  return out;
}

WeightStore parse_weights(std::span<const std::uint8_t> bytes) {
  ByteReader reader(bytes);
  const auto magic = reader.take(kMagic.size(), "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) {
    throw Error(ErrorKind::FormatError, "weights file does not start with GCW1 magic");
  }
  const auto count = reader.le<std::uint32_t>("parameter count");

  WeightStore store;
  for (std::uint32_t p = 0; p < count; ++p) {
    const auto name_len = reader.le<std::uint32_t>("name length");
    const auto name_bytes = reader.take(name_len, "parameter name");
    std::string name(name_bytes.begin(), name_bytes.end());
    if (name.empty()) throw Error(ErrorKind::FormatError, "parameter " + std::to_string(p) + " has an empty name");
    if (store.find(name)) throw Error(ErrorKind::FormatError, "duplicate parameter '" + name + "'");

    const auto tag = reader.le<std::uint8_t>("dtype tag");
    if (tag > 1) {
      throw Error(ErrorKind::FormatError, "parameter '" + name + "' has unknown dtype tag " + std::to_string(tag));
    }
    const auto ndim = reader.le<std::uint32_t>("rank");
    if (ndim == 0 || ndim > kMaxRank) {
      throw Error(ErrorKind::FormatError, "parameter '" + name + "' has unsupported rank " + std::to_string(ndim));
    }
    Shape shape;
    std::size_t count_elems = 1;
    const std::size_t elem_size = tag == 0 ? 4 : 8;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto extent = reader.le<std::uint32_t>("dimensions");
      if (extent == 0) throw Error(ErrorKind::FormatError, "parameter '" + name + "' has a zero extent");
      if (count_elems > std::numeric_limits<std::size_t>::max() / elem_size / extent) {
        throw Error(ErrorKind::FormatError, "parameter '" + name + "' is too large");
      }
      count_elems *= extent;
      shape.push_back(extent);
    }
    reader.need(count_elems * elem_size, "parameter payload");
    if (tag == 0) {
      store.add(name, decode_payload<float, std::uint32_t>(shape, reader, name));
    } else {
      store.add(name, decode_payload<double, std::uint64_t>(shape, reader, name));
    }
  }
  if (reader.remaining() != 0) {
    throw Error(ErrorKind::FormatError, std::to_string(reader.remaining()) + " trailing bytes after last parameter");
  }
  return store;
}

WeightStore read_weights(const std::filesystem::path& path) { return parse_weights(read_file(path)); }

void save_weights(const WeightStore& store, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "failed writing '" + path.string() + "'");
}

void validate_weights(const ModelSpec& spec, const WeightStore& store) {
  const auto slots = parameter_slots(spec);
  for (const auto& slot : slots) {
    const auto* t = store.find(slot.name);
    if (!t) throw Error(ErrorKind::MissingParameter, slot.name);
    if (shape_of(*t) != slot.shape) {
      throw Error(ErrorKind::ParameterShapeMismatch, slot.name + ": expected " + shape_to_string(slot.shape) +
                                                         ", got " + shape_to_string(shape_of(*t)));
    }
  }
  for (const auto& [name, tensor] : store.entries()) {
    const bool known = std::any_of(slots.begin(), slots.end(), [&](const auto& s) { return s.name == name; });
    if (!known) throw Error(ErrorKind::OrphanParameter, name);
  }
}

LoadedModel load_model(const std::filesystem::path& spec_path, const std::filesystem::path& weights_path) {
  LoadedModel model{load_model_spec(spec_path), read_weights(weights_path)};
  validate_weights(model.spec, model.weights);
  return model;
}

template <typename T>
Graph<T> build_graph(const ModelSpec& spec, const WeightStore& store) {
  Graph<T> graph;
  NodeId prev = graph.add_input("input", spec.input_shape);
  auto param = [&](const std::string& name) { return std::make_shared<const Tensor<T>>(store.get<T>(name)); };
  for (const auto& layer : spec.layers) {
    switch (layer.type) {
      case LayerType::conv2d:
        prev = graph.add_conv2d(layer.name, prev, param(layer.name + ".weight"), param(layer.name + ".bias"),
                                layer.stride, layer.padding);
        break;
      case LayerType::relu:
        prev = graph.add_relu(layer.name, prev);
        break;
      case LayerType::maxpool2d:
        prev = graph.add_maxpool2d(layer.name, prev, layer.window, layer.stride);
        break;
      case LayerType::gap:
        prev = graph.add_gap(layer.name, prev);
        break;
      case LayerType::flatten:
        prev = graph.add_flatten(layer.name, prev);
        break;
      case LayerType::dense:
        prev = graph.add_dense(layer.name, prev, param(layer.name + ".weight"), param(layer.name + ".bias"));
        break;
      case LayerType::softmax:
        prev = graph.add_softmax(layer.name, prev);
        break;
    }
  }
  graph.set_score_node(spec.score_layer() + 1);
  return graph;
}

template Graph<float> build_graph<float>(const ModelSpec&, const WeightStore&);
template Graph<double> build_graph<double>(const ModelSpec&, const WeightStore&);

std::vector<LayerInfo> describe(const ModelSpec& spec) {
  const auto slots = parameter_slots(spec);
  std::vector<LayerInfo> rows;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerInfo row{spec.layers[i].name, std::string(layer_type_name(spec.layers[i].type)), spec.output_shapes.at(i), 0};
    for (const auto& slot : slots) {
      if (slot.name == row.name + ".weight" || slot.name == row.name + ".bias") row.parameters += shape_numel(slot.shape);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace saliency
