#include "saliency/faithfulness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

namespace saliency {

namespace {

void check_geometry(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0) throw Error(ErrorKind::GeometryError, "patch and stride must be positive");
  if (patch > height || patch > width) {
    throw Error(ErrorKind::GeometryError, "patch " + std::to_string(patch) + " exceeds image extent " +
                                              std::to_string(height) + "x" + std::to_string(width));
  }
}

Grid pool_plane(std::span<const double> plane, std::size_t height, std::size_t width, std::size_t patch,
                std::size_t stride) {
  check_geometry(height, width, patch, stride);
  Grid out(sweep_extent(height, patch, stride), sweep_extent(width, patch, stride));
  const double area = static_cast<double>(patch * patch);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      double sum = 0.0;
      for (std::size_t y = r * stride; y < r * stride + patch; ++y) {
        for (std::size_t x = c * stride; x < c * stride + patch; ++x) sum += std::abs(plane[y * width + x]);
      }
      out(r, c) = sum / area;
    }
  }
  return out;
}

}  // namespace

std::size_t sweep_extent(std::size_t size, std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0 || patch > size) {
    throw Error(ErrorKind::GeometryError, "invalid sweep: patch " + std::to_string(patch) + ", stride " +
                                              std::to_string(stride) + " over extent " + std::to_string(size));
  }
  return (size - patch) / stride + 1;
}

SweepParams default_sweep(const Shape& input_shape) {
  if (input_shape.size() != 3) throw Error(ErrorKind::ShapeMismatch, "expected [C,H,W] input shape");
  SweepParams sweep;
  sweep.patch = (input_shape[1] + 7) / 8;
  sweep.stride = std::max<std::size_t>(1, sweep.patch / 2);
  sweep.fill.assign(input_shape[0], 0.0);
  sweep.fill_name = "mean";
  return sweep;
}

template <typename T>
Tensor<T> occlude(const Tensor<T>& image, const SweepParams& sweep, std::size_t row, std::size_t col) {
  const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
  Tensor<T> out = image;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    const T fill = static_cast<T>(sweep.fill[ch]);
    for (std::size_t y = row * sweep.stride; y < row * sweep.stride + sweep.patch; ++y) {
      for (std::size_t x = col * sweep.stride; x < col * sweep.stride + sweep.patch; ++x) {
        out[(ch * height + y) * width + x] = fill;
      }
    }
  }
  return out;
}

template <typename T>
OcclusionMap occlusion_map(const Graph<T>& graph, const Tensor<T>& image, std::size_t class_index,
                           const SweepParams& sweep, std::size_t threads) {
  if (image.rank() != 3) {
    throw Error(ErrorKind::ShapeMismatch, "occlusion expects a [C,H,W] image, got " + shape_to_string(image.shape()));
  }
  const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
  check_geometry(height, width, sweep.patch, sweep.stride);
  if (sweep.fill.size() != channels) {
    throw Error(ErrorKind::GeometryError, "fill has " + std::to_string(sweep.fill.size()) + " values for " +
                                              std::to_string(channels) + " channels");
  }

  Graph<T> base = graph;
  const Tensor<T> scores = base.forward(image);
  if (class_index >= scores.size()) {
    throw Error(ErrorKind::InvalidArgument, "class " + std::to_string(class_index) + " out of range");
  }

  OcclusionMap map;
  map.sweep = sweep;
  map.class_index = class_index;
  map.base_score = static_cast<double>(scores[class_index]);
  map.grid = Grid(sweep_extent(height, sweep.patch, sweep.stride), sweep_extent(width, sweep.patch, sweep.stride));

  const std::size_t total = map.grid.size();
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    try {
      Graph<T> local = graph;
      for (std::size_t p = next++; p < total; p = next++) {
        const auto occluded = occlude(image, sweep, p / map.grid.cols, p % map.grid.cols);
        const Tensor<T> s = local.forward(occluded);
        map.grid.values[p] = map.base_score - static_cast<double>(s[class_index]);
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = total;
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(total, 1));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return map;
}

Grid pool_saliency_to_patches(const TensorD& attribution, std::size_t patch, std::size_t stride) {
  if (attribution.rank() != 3) {
    throw Error(ErrorKind::GeometryError, "attribution must be [C,H,W], got " + shape_to_string(attribution.shape()));
  }
  const std::size_t channels = attribution.dim(0), height = attribution.dim(1), width = attribution.dim(2);
  const std::size_t area = height * width;
  std::vector<double> summed(area, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < area; ++i) summed[i] += attribution[c * area + i];
  }
  return pool_plane(summed, height, width, patch, stride);
}

Grid pool_saliency_to_patches(const Grid& map, std::size_t patch, std::size_t stride) {
  return pool_plane(map.values, map.rows, map.cols, patch, stride);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::InvalidArgument, "spearman inputs differ in length: " + std::to_string(a.size()) + " vs " +
                                                std::to_string(b.size()));
  }
  if (a.size() < 2) throw Error(ErrorKind::InvalidArgument, "spearman needs at least two values");
  auto finite = [](std::span<const double> v) { return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); }); };
  if (!finite(a) || !finite(b)) throw Error(ErrorKind::InvalidArgument, "spearman inputs must be finite");

  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(ra.size());
  const double mean = (n + 1.0) / 2.0;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) {
    throw Error(ErrorKind::DegenerateRanks, "rank correlation is undefined for a constant input");
  }
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

template <typename T>
FaithfulnessResult faithfulness_report(Graph<T>& graph, const Tensor<T>& image, std::optional<std::size_t> class_index,
                                       const std::vector<Method>& methods, const SweepParams& sweep,
                                       std::size_t threads) {
  FaithfulnessResult result;
  const Tensor<T> scores = graph.forward(image);
  const auto as_double = scores.template cast<double>();
  result.class_index = class_index.value_or(argmax_class(as_double.values()));
  result.occlusion = occlusion_map(graph, image, result.class_index, sweep, threads);
  const Grid& reference = result.occlusion.grid;

  for (Method method : methods) {
    Grid pooled;
    if (method == Method::occlusion) {
      pooled = reference;
    } else {
      const auto ex = explain(graph, image, ExplainRequest{method, result.class_index, "last-conv"});
      pooled = ex.attribution ? pool_saliency_to_patches(ex.attribution->values, sweep.patch, sweep.stride)
                              : pool_saliency_to_patches(ex.upsampled->grid, sweep.patch, sweep.stride);
    }
    CorrelationReport report;
    report.method = std::string(method_name(method));
    report.spearman_rho = spearman(pooled.values, reference.values);
    report.n_patches = reference.size();
    report.sweep = sweep;
    result.reports.push_back(std::move(report));
  }
  return result;
}

std::size_t sweep_threads_from_env() {
  const char* raw = std::getenv("SALIENCY_THREADS");
  if (!raw || !*raw) return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (end == raw || *end != '\0' || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

template Tensor<float> occlude(const Tensor<float>&, const SweepParams&, std::size_t, std::size_t);
template Tensor<double> occlude(const Tensor<double>&, const SweepParams&, std::size_t, std::size_t);
template OcclusionMap occlusion_map(const Graph<float>&, const Tensor<float>&, std::size_t, const SweepParams&,
                                    std::size_t);
template OcclusionMap occlusion_map(const Graph<double>&, const Tensor<double>&, std::size_t, const SweepParams&,
                                    std::size_t);
template FaithfulnessResult faithfulness_report(Graph<float>&, const Tensor<float>&, std::optional<std::size_t>,
                                                const std::vector<Method>&, const SweepParams&, std::size_t);
template FaithfulnessResult faithfulness_report(Graph<double>&, const Tensor<double>&, std::optional<std::size_t>,
                                                const std::vector<Method>&, const SweepParams&, std::size_t);

}  // namespace saliency
