#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saliency/explain.hpp"
#include "saliency/graph.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

/// Patch sweep geometry. `fill` holds one value per input channel, expressed
/// in the preprocessed (model input) domain.
struct SweepParams {
  std::size_t patch = 0;
  std::size_t stride = 0;
  std::vector<double> fill;
  std::string fill_name = "mean";
};

/// patch = ceil(H/8), stride = max(1, patch/2), fill = 0 (the dataset mean
/// after normalization).
SweepParams default_sweep(const Shape& input_shape);

/// Number of patch positions along one axis.
std::size_t sweep_extent(std::size_t size, std::size_t patch, std::size_t stride);

struct OcclusionMap {
  /// grid(r,c) = base_score - score with patch (r,c) filled.
  Grid grid;
  SweepParams sweep;
  std::size_t class_index = 0;
  double base_score = 0.0;
};

/// Replaces `image` [C,H,W] with the sweep's fill inside the patch at grid
/// position (row, col), across all channels.
template <typename T>
Tensor<T> occlude(const Tensor<T>& image, const SweepParams& sweep, std::size_t row, std::size_t col);

/// Occlusion sensitivity sweep in row-major order. Each worker thread runs its
/// own copy of `graph`; results are merged positionally, so the map does not
/// depend on `threads`.
template <typename T>
OcclusionMap occlusion_map(const Graph<T>& graph, const Tensor<T>& image, std::size_t class_index,
                           const SweepParams& sweep, std::size_t threads = 1);

/// Mean over each patch of |sum over channels| of the attribution [C,H,W].
Grid pool_saliency_to_patches(const TensorD& attribution, std::size_t patch, std::size_t stride);
/// Same for a single-channel map at input resolution.
Grid pool_saliency_to_patches(const Grid& map, std::size_t patch, std::size_t stride);

/// Average ranks (1-based); ties share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman rank correlation with average ranks on ties, i.e. the Pearson
/// correlation of the rank vectors. Throws DegenerateRanks when either input
/// is constant.
double spearman(std::span<const double> a, std::span<const double> b);

struct CorrelationReport {
  std::string method;
  double spearman_rho = 0.0;
  std::size_t n_patches = 0;
  SweepParams sweep;
};

struct FaithfulnessResult {
  OcclusionMap occlusion;
  std::size_t class_index = 0;
  std::vector<CorrelationReport> reports;
};

/// One occlusion sweep shared by every method; one report per method.
/// `class_index` nullopt selects the top-scoring class.
template <typename T>
FaithfulnessResult faithfulness_report(Graph<T>& graph, const Tensor<T>& image, std::optional<std::size_t> class_index,
                                       const std::vector<Method>& methods, const SweepParams& sweep,
                                       std::size_t threads = 1);

/// Worker count from SALIENCY_THREADS, defaulting to the hardware
/// concurrency. Invalid values fall back to 1.
std::size_t sweep_threads_from_env();

}  // namespace saliency
