// saliency: command-line front end for explain / occlude / evaluate / info.
//
// Exit codes: 0 success, 1 input error (flags, files, model description),
// 2 failure during computation.

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "saliency/explain.hpp"
#include "saliency/faithfulness.hpp"
#include "saliency/imaging.hpp"
#include "saliency/model_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace saliency;

namespace {

struct RunConfig {
  std::string subcommand;
  std::string model;
  std::string weights;
  std::string image;
  std::string class_selector = "auto";
  std::string layer = "last-conv";
  std::vector<std::string> methods;
  std::optional<std::size_t> patch;
  std::optional<std::size_t> stride;
  std::string fill = "mean";
  std::string out = ".";
  std::string dtype = "f32";
};

json config_json(const RunConfig& cfg) {
  json j{{"subcommand", cfg.subcommand}, {"model", cfg.model}, {"weights", cfg.weights}, {"dtype", cfg.dtype}};
  if (cfg.subcommand == "info") return j;
  j["image"] = cfg.image;
  j["class"] = cfg.class_selector;
  j["out"] = cfg.out;
  if (cfg.subcommand == "explain") {
    j["layer"] = cfg.layer;
    j["methods"] = cfg.methods;
  }
  if (cfg.subcommand == "evaluate") j["methods"] = cfg.methods;
  if (cfg.subcommand == "occlude" || cfg.subcommand == "evaluate") {
    j["patch"] = cfg.patch ? json(*cfg.patch) : json("default");
    j["stride"] = cfg.stride ? json(*cfg.stride) : json("default");
    j["fill"] = cfg.fill;
  }
  return j;
}

std::vector<Method> parse_methods(const std::vector<std::string>& names) {
  std::vector<Method> out;
  for (const auto& name : names) {
    const Method m = parse_method(name);
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  }
  return out;
}

std::optional<std::size_t> resolve_class(const std::string& selector, const ModelSpec& spec) {
  if (selector == "auto") return std::nullopt;
  const auto& labels = spec.class_labels;
  if (auto it = std::find(labels.begin(), labels.end(), selector); it != labels.end()) {
    return static_cast<std::size_t>(it - labels.begin());
  }
  std::size_t index = 0;
  const bool numeric = !selector.empty() && std::all_of(selector.begin(), selector.end(), [](char c) {
    return c >= '0' && c <= '9';
  });
  if (numeric && selector.size() < 10) index = std::stoul(selector);
  if (!numeric || selector.size() >= 10 || index >= spec.num_classes()) {
    throw Error(ErrorKind::InvalidArgument,
                "--class '" + selector + "' is not 'auto', a class label or an index below " +
                    std::to_string(spec.num_classes()));
  }
  return index;
}

std::string class_tag(std::size_t index, const ModelSpec& spec) {
  std::string tag = index < spec.class_labels.size() ? spec.class_labels[index] : std::to_string(index);
  for (char& c : tag) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return tag.empty() ? std::to_string(index) : tag;
}

SweepParams make_sweep(const RunConfig& cfg, const ModelSpec& spec) {
  SweepParams sweep = default_sweep(spec.input_shape);
  if (cfg.patch) sweep.patch = *cfg.patch;
  if (cfg.stride) sweep.stride = *cfg.stride;
  const std::size_t h = spec.input_shape[1], w = spec.input_shape[2];
  if (sweep.patch == 0 || sweep.stride == 0 || sweep.patch > std::min(h, w)) {
    throw Error(ErrorKind::InvalidArgument, "--patch " + std::to_string(sweep.patch) + " / --stride " +
                                                std::to_string(sweep.stride) + " do not fit a " + std::to_string(h) +
                                                "x" + std::to_string(w) + " input");
  }
  // Fill values live in the normalized input domain.
  const auto& norm = spec.preprocess;
  sweep.fill_name = cfg.fill;
  for (std::size_t c = 0; c < sweep.fill.size(); ++c) {
    if (cfg.fill == "mean") {
      sweep.fill[c] = 0.0;
    } else if (cfg.fill == "zero") {
      sweep.fill[c] = (0.0 - norm.mean[c]) / norm.std[c];
    } else {
      sweep.fill[c] = (0.5 - norm.mean[c]) / norm.std[c];
    }
  }
  return sweep;
}

std::string format_score(double v) {
  std::ostringstream ss;
  ss << std::setprecision(9) << v;
  return ss.str();
}

class Outputs {
 public:
  Outputs(fs::path dir, std::string stem) : dir_(std::move(dir)), stem_(std::move(stem)) {}

  fs::path path(const std::string& suffix) const { return dir_ / (stem_ + "." + suffix); }

  void image(const std::string& suffix, const Image& img) {
    write_image(img, path(suffix + ".ppm"));
    written_.push_back(path(suffix + ".ppm").filename().string());
  }

  // Flat little-endian f32 values plus a JSON sidecar describing them.
  void raw(const std::string& suffix, std::span<const double> values, const Shape& shape, json meta) {
    std::vector<std::uint8_t> bytes(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float f = static_cast<float>(values[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    write_bytes(path(suffix + ".f32"), bytes);
    meta["dtype"] = "f32";
    meta["byte_order"] = "little";
    meta["shape"] = shape;
    text(suffix + ".f32.json", meta.dump(2) + "\n");
    written_.push_back(path(suffix + ".f32").filename().string());
  }

  void text(const std::string& suffix, const std::string& body) {
    const std::vector<std::uint8_t> bytes(body.begin(), body.end());
    write_bytes(path(suffix), bytes);
    written_.push_back(path(suffix).filename().string());
  }

  void manifest(const RunConfig& cfg, json extra) {
    json j{{"engine", "saliency"}, {"engine_version", SALIENCY_VERSION}, {"config", config_json(cfg)}};
    for (auto& [k, v] : extra.items()) j[k] = v;
    j["outputs"] = written_;
    const std::string body = j.dump(2) + "\n";
    write_bytes(dir_ / "run.json", std::vector<std::uint8_t>(body.begin(), body.end()));
  }

 private:
  static void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::IoError, "cannot write '" + p.string() + "'");
  }

  fs::path dir_;
  std::string stem_;
  std::vector<std::string> written_;
};

struct Prepared {
  LoadedModel model;
  Image image;  // at model resolution
  std::optional<std::size_t> class_index;
};

Prepared prepare(const RunConfig& cfg) {
  Prepared p{load_model(cfg.model, cfg.weights), read_image(cfg.image), std::nullopt};
  const auto& shape = p.model.spec.input_shape;
  if (p.image.height != shape[1] || p.image.width != shape[2]) p.image = resize_bilinear(p.image, shape[2], shape[1]);
  if (p.image.channels != shape[0] && !(p.image.channels == 1 && shape[0] == 3)) {
    throw Error(ErrorKind::InvalidArgument, "image has " + std::to_string(p.image.channels) +
                                                " channels but the model expects " + std::to_string(shape[0]));
  }
  p.class_index = resolve_class(cfg.class_selector, p.model.spec);
  fs::create_directories(cfg.out);
  return p;
}

void report_class(const ModelSpec& spec, std::size_t index, double score) {
  std::cout << "class " << index;
  if (index < spec.class_labels.size()) std::cout << " (" << spec.class_labels[index] << ")";
  std::cout << " score " << format_score(score) << "\n";
}

template <typename T>
int cmd_explain(const RunConfig& cfg) {
  const auto methods = parse_methods(cfg.methods.empty() ? std::vector<std::string>{"gradcam"} : cfg.methods);
  for (Method m : methods) {
    if (m == Method::occlusion) throw Error(ErrorKind::InvalidArgument, "use 'occlude' for occlusion maps");
  }
  auto prepared = prepare(cfg);
  const auto& spec = prepared.model.spec;
  auto graph = build_graph<T>(spec, prepared.model.weights);
  // CAM compatibility and the target layer are checked before any compute.
  for (Method m : methods) {
    if (m == Method::cam) cam_binding(graph);
  }
  if (cfg.layer != "last-conv") graph.require(cfg.layer);

  const auto input = preprocess(prepared.image, spec.preprocess, spec.input_shape[0]).template cast<T>();
  Outputs out(cfg.out, fs::path(cfg.image).stem().string());
  json summary = json::array();
  for (Method m : methods) {
    const auto ex = explain(graph, input, ExplainRequest{m, prepared.class_index, cfg.layer});
    const std::string name(method_name(m));
    const std::string suffix = name + "." + class_tag(ex.class_index, spec);
    report_class(spec, ex.class_index, ex.score);
    json meta{{"method", name}, {"class_index", ex.class_index}, {"score", ex.score}, {"layer", ex.layer}};
    if (ex.attribution) {
      out.image(suffix, render_attribution(ex.attribution->values));
      out.raw(suffix, ex.attribution->values.data(), ex.attribution->values.shape(), meta);
    } else {
      out.image(suffix, render_overlay(prepared.image, ex.upsampled->grid, 0.5));
      meta["normalized"] = true;
      out.raw(suffix, ex.heatmap->grid.values, {ex.heatmap->grid.rows, ex.heatmap->grid.cols}, meta);
    }
    summary.push_back(meta);
  }
  out.manifest(cfg, {{"results", summary}});
  return 0;
}

template <typename T>
int cmd_occlude(const RunConfig& cfg) {
  auto prepared = prepare(cfg);
  const auto& spec = prepared.model.spec;
  const SweepParams sweep = make_sweep(cfg, spec);
  auto graph = build_graph<T>(spec, prepared.model.weights);
  const auto input = preprocess(prepared.image, spec.preprocess, spec.input_shape[0]).template cast<T>();
  const auto scores = graph.forward(input).template cast<double>();
  const std::size_t cls = prepared.class_index.value_or(argmax_class(scores.values()));
  const auto map = occlusion_map(graph, input, cls, sweep, sweep_threads_from_env());
  report_class(spec, cls, map.base_score);

  Outputs out(cfg.out, fs::path(cfg.image).stem().string());
  const std::string suffix = "occlusion." + class_tag(cls, spec);
  Heatmap h;
  h.grid = map.grid;
  const auto shown = upsample(normalize(h), spec.input_shape[1], spec.input_shape[2]);
  out.image(suffix, render_overlay(prepared.image, shown.grid, 0.5));
  json meta{{"method", "occlusion"},   {"class_index", cls},        {"base_score", map.base_score},
            {"patch", sweep.patch},    {"stride", sweep.stride},    {"fill", sweep.fill_name},
            {"normalized", false}};
  out.raw(suffix, map.grid.values, {map.grid.rows, map.grid.cols}, meta);
  out.manifest(cfg, {{"sweep", {{"patch", sweep.patch}, {"stride", sweep.stride}, {"fill", sweep.fill_name}}}});
  return 0;
}

template <typename T>
int cmd_evaluate(const RunConfig& cfg) {
  const auto methods =
      parse_methods(cfg.methods.empty() ? std::vector<std::string>{"gradcam", "gbp", "guided-gradcam"} : cfg.methods);
  auto prepared = prepare(cfg);
  const auto& spec = prepared.model.spec;
  const SweepParams sweep = make_sweep(cfg, spec);
  auto graph = build_graph<T>(spec, prepared.model.weights);
  for (Method m : methods) {
    if (m == Method::cam) cam_binding(graph);
  }
  const auto input = preprocess(prepared.image, spec.preprocess, spec.input_shape[0]).template cast<T>();
  const auto result =
      faithfulness_report(graph, input, prepared.class_index, methods, sweep, sweep_threads_from_env());
  report_class(spec, result.class_index, result.occlusion.base_score);

  json reports = json::array();
  for (const auto& r : result.reports) {
    reports.push_back({{"method", r.method}, {"rho", r.spearman_rho}, {"n_patches", r.n_patches}});
    std::cout << r.method << " rho " << format_score(r.spearman_rho) << "\n";
  }
  const std::string image_id = fs::path(cfg.image).filename().string();
  json doc{{"image", image_id},
           {"class_index", result.class_index},
           {"base_score", result.occlusion.base_score},
           {"sweep", {{"patch", sweep.patch}, {"stride", sweep.stride}, {"fill", sweep.fill_name}}},
           {"results", reports}};
  Outputs out(cfg.out, fs::path(cfg.image).stem().string());
  out.text("evaluate." + class_tag(result.class_index, spec) + ".json", doc.dump(2) + "\n");
  out.manifest(cfg, {{"sweep", {{"patch", sweep.patch}, {"stride", sweep.stride}, {"fill", sweep.fill_name}}}});
  return 0;
}

int cmd_info(const RunConfig& cfg) {
  const auto model = load_model(cfg.model, cfg.weights);
  std::cout << std::left << std::setw(16) << "layer" << std::setw(12) << "type" << std::setw(16) << "output"
            << "params\n";
  for (const auto& row : describe(model.spec)) {
    std::cout << std::left << std::setw(16) << row.name << std::setw(12) << row.type << std::setw(16)
              << shape_to_string(row.output_shape) << row.parameters << "\n";
  }
  return 0;
}

template <typename T>
int dispatch(const RunConfig& cfg) {
  if (cfg.subcommand == "explain") return cmd_explain<T>(cfg);
  if (cfg.subcommand == "occlude") return cmd_occlude<T>(cfg);
  if (cfg.subcommand == "evaluate") return cmd_evaluate<T>(cfg);
  return cmd_info(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-discriminative saliency maps for small CNNs"};
  app.set_version_flag("--version", std::string(SALIENCY_VERSION));
  app.require_subcommand(1);
  RunConfig cfg;

  auto add_model = [&](CLI::App* sub, bool with_image) {
    sub->add_option("model", cfg.model, "Model description (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("weights", cfg.weights, "Weights (GCW1)")->required()->check(CLI::ExistingFile);
    if (with_image) sub->add_option("image", cfg.image, "Input image (PPM/PGM/PNG)")->required()->check(CLI::ExistingFile);
    sub->add_option("--dtype", cfg.dtype, "Engine precision")->check(CLI::IsMember({"f32", "f64"}));
  };
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--class", cfg.class_selector, "Class index, label or 'auto'");
    sub->add_option("--out", cfg.out, "Output directory");
  };
  auto add_sweep = [&](CLI::App* sub) {
    sub->add_option("--patch", cfg.patch, "Occlusion patch size in pixels");
    sub->add_option("--stride", cfg.stride, "Occlusion stride in pixels");
    sub->add_option("--fill", cfg.fill, "Occluder fill")->check(CLI::IsMember({"mean", "zero", "gray"}));
  };

  auto* explain_cmd = app.add_subcommand("explain", "Write heatmaps and attribution images");
  add_model(explain_cmd, true);
  add_common(explain_cmd);
  explain_cmd->add_option("--method,--methods", cfg.methods, "cam, gradcam, gbp, guided-gradcam")->delimiter(',');
  explain_cmd->add_option("--layer", cfg.layer, "Target layer name or 'last-conv'");

  auto* occlude_cmd = app.add_subcommand("occlude", "Occlusion sensitivity map");
  add_model(occlude_cmd, true);
  add_common(occlude_cmd);
  add_sweep(occlude_cmd);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Rank correlation of methods against occlusion");
  add_model(evaluate_cmd, true);
  add_common(evaluate_cmd);
  add_sweep(evaluate_cmd);
  evaluate_cmd->add_option("--methods,--method", cfg.methods, "Methods to score")->delimiter(',');

  auto* info_cmd = app.add_subcommand("info", "Print the layer table");
  add_model(info_cmd, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  cfg.subcommand = app.get_subcommands().front()->get_name();

  try {
    return cfg.dtype == "f64" ? dispatch<double>(cfg) : dispatch<float>(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_input_error(e.kind()) ? 1 : 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: IoError: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
