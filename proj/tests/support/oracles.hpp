#pragma once

// Independent reference implementations and helpers shared by the unit and
// acceptance tests. Nothing here calls into saliency::kernels.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "saliency/graph.hpp"
#include "saliency/model_io.hpp"
#include "saliency/tensor.hpp"

namespace oracle {

using saliency::Extent2;
using saliency::Shape;
using saliency::Tensor;

inline std::filesystem::path fixture_dir() { return FIXTURE_DIR; }

template <typename T>
Tensor<T> random_tensor(std::mt19937& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

inline std::size_t pick(std::mt19937& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Smallest extent >= size for which a window of `k`, stride `s` and padding
// `p` tiles the padded input exactly.
inline std::size_t fit_extent(std::size_t size, std::size_t k, std::size_t s, std::size_t p) {
  size = std::max(size, k);
  while ((size + 2 * p - k) % s != 0) ++size;
  return size;
}

// Direct 7-loop convolution, zero padding, accumulating in double.
template <typename T>
Tensor<double> conv2d(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b, Extent2 s, Extent2 p) {
  const long N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const long K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const long OH = (H + 2 * long(p.h) - kh) / long(s.h) + 1;
  const long OW = (W + 2 * long(p.w) - kw) / long(s.w) + 1;
  Tensor<double> out({std::size_t(N), std::size_t(K), std::size_t(OH), std::size_t(OW)});
  for (long n = 0; n < N; ++n)
    for (long k = 0; k < K; ++k)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OW; ++ox) {
          double acc = b[k];
          for (long c = 0; c < C; ++c)
            for (long dy = 0; dy < kh; ++dy)
              for (long dx = 0; dx < kw; ++dx) {
                const long y = oy * long(s.h) + dy - long(p.h);
                const long x = ox * long(s.w) + dx - long(p.w);
                if (y < 0 || y >= H || x < 0 || x >= W) continue;
                acc += double(in[((n * C + c) * H + y) * W + x]) * double(w[((k * C + c) * kh + dy) * kw + dx]);
              }
          out[((n * K + k) * OH + oy) * OW + ox] = acc;
        }
  return out;
}

template <typename T>
Tensor<double> maxpool2d(const Tensor<T>& in, Extent2 win, Extent2 s) {
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t OH = (H - win.h) / s.h + 1, OW = (W - win.w) / s.w + 1;
  Tensor<double> out({N, C, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          for (std::size_t dy = 0; dy < win.h; ++dy)
            for (std::size_t dx = 0; dx < win.w; ++dx)
              best = std::max(best, double(in.at({n, c, oy * s.h + dy, ox * s.w + dx})));
          out.at({n, c, oy, ox}) = best;
        }
  return out;
}

template <typename T>
Tensor<double> gap(const Tensor<T>& in) {
  const std::size_t N = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
  Tensor<double> out({N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double sum = 0.0;
      for (std::size_t i = 0; i < HW; ++i) sum += in[(n * C + c) * HW + i];
      out.at({n, c}) = sum / double(HW);
    }
  return out;
}

template <typename T>
Tensor<double> dense(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t N = in.dim(0), D = in.dim(1), M = w.dim(0);
  Tensor<double> out({N, M});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < M; ++m) {
      double acc = b[m];
      for (std::size_t d = 0; d < D; ++d) acc += double(in.at({n, d})) * double(w.at({m, d}));
      out.at({n, m}) = acc;
    }
  return out;
}

// Largest |a-b| / max(|a|,|b|, floor) over all elements.
template <typename A, typename B>
double max_rel_error(const A& a, const B& b, double floor = 1e-12) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = double(a[i]), y = double(b[i]);
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return worst;
}

template <typename T>
std::shared_ptr<const Tensor<T>> param(std::mt19937& rng, Shape shape, double scale) {
  return std::make_shared<const Tensor<T>>(random_tensor<T>(rng, std::move(shape), -scale, scale));
}

// Small random network. Variant 0 ends conv->relu->gap->dense->softmax,
// variant 1 uses maxpool->flatten->dense->relu->dense. Both start with a
// strided, padded conv so every op kind is covered across the two.
template <typename T>
saliency::Graph<T> random_graph(std::mt19937& rng, int variant) {
  saliency::Graph<T> g;
  const std::size_t C = pick(rng, 1, 3);
  const std::size_t K1 = pick(rng, 2, 4), K2 = pick(rng, 2, 4), classes = pick(rng, 2, 4);
  const std::size_t k = pick(rng, 2, 3);
  const Extent2 s{pick(rng, 1, 2), pick(rng, 1, 2)};
  const Extent2 p{pick(rng, 0, 1), pick(rng, 0, 1)};
  const std::size_t H = fit_extent(pick(rng, 6, 9), k, s.h, p.h), W = fit_extent(pick(rng, 6, 9), k, s.w, p.w);
  auto x = g.add_input("input", {C, H, W});
  auto n = g.add_conv2d("conv1", x, param<T>(rng, {K1, C, k, k}, 0.8), param<T>(rng, {K1}, 0.3), s, p);
  n = g.add_relu("relu1", n);
  const std::size_t h1 = (H + 2 * p.h - k) / s.h + 1, w1 = (W + 2 * p.w - k) / s.w + 1;
  if (variant == 0) {
    n = g.add_conv2d("conv2", n, param<T>(rng, {K2, K1, 3, 3}, 0.8), param<T>(rng, {K2}, 0.3), {1, 1}, {1, 1});
    n = g.add_relu("relu2", n);
    n = g.add_gap("gap", n);
    n = g.add_dense("fc", n, param<T>(rng, {classes, K2}, 1.0), param<T>(rng, {classes}, 0.3));
    g.add_softmax("softmax", n);
  } else {
    const Extent2 win{2, 2};
    const Extent2 step{h1 % 2 == 0 ? 2u : 1u, w1 % 2 == 0 ? 2u : 1u};
    n = g.add_maxpool2d("pool1", n, win, step);
    const std::size_t features = K1 * ((h1 - win.h) / step.h + 1) * ((w1 - win.w) / step.w + 1);
    n = g.add_flatten("flatten", n);
    n = g.add_dense("fc1", n, param<T>(rng, {5, features}, 0.8), param<T>(rng, {5}, 0.3));
    n = g.add_relu("relu2", n);
    n = g.add_dense("fc2", n, param<T>(rng, {classes, 5}, 1.0), param<T>(rng, {classes}, 0.3));
  }
  return g;
}

struct FixtureImage {
  std::string file;
  int square_quadrant = 0;
  int disc_quadrant = 0;
};

inline std::vector<FixtureImage> fixture_images() {
  std::ifstream in(fixture_dir() / "images.json");
  const auto j = nlohmann::json::parse(in);
  std::vector<FixtureImage> out;
  for (const auto& e : j) {
    out.push_back({e.at("file").get<std::string>(), e.at("square").at("quadrant").get<int>(),
                   e.at("disc").at("quadrant").get<int>()});
  }
  return out;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace oracle
