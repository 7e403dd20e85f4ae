#include "saliency/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace saliency::kernels {

namespace {

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + " expects a rank-" + std::to_string(rank) +
                                              " tensor, got " + shape_to_string(shape));
  }
}

template <typename T>
Tensor<T> from_accumulator(const Shape& shape, const std::vector<double>& acc) {
  std::vector<T> out(acc.size());
  std::transform(acc.begin(), acc.end(), out.begin(), [](double v) { return static_cast<T>(v); });
  return Tensor<T>(shape, std::move(out));
}

}  // namespace

std::size_t window_output_extent(std::size_t in, std::size_t window, std::size_t stride, std::size_t pad,
                                 const char* axis) {
  if (stride == 0) throw Error(ErrorKind::GeometryError, std::string("stride along ") + axis + " must be positive");
  if (window == 0) throw Error(ErrorKind::GeometryError, std::string("window along ") + axis + " must be positive");
  const std::size_t padded = in + 2 * pad;
  if (window > padded) {
    throw Error(ErrorKind::GeometryError, std::string("window ") + std::to_string(window) + " exceeds input extent " +
                                              std::to_string(padded) + " along " + axis);
  }
  if ((padded - window) % stride != 0) {
    throw Error(ErrorKind::GeometryError, std::string("non-integral output extent along ") + axis + ": (" +
                                              std::to_string(padded) + " - " + std::to_string(window) + ") / " +
                                              std::to_string(stride));
  }
  return (padded - window) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, Extent2 stride,
                 Extent2 padding) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1), height = input.dim(2), width = input.dim(3);
  const std::size_t filters = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != channels) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d channel mismatch: input " + shape_to_string(input.shape()) +
                                              " vs kernel " + shape_to_string(kernel.shape()));
  }
  if (bias.shape() != Shape{filters}) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d bias " + shape_to_string(bias.shape()) + " does not match kernel " +
                                              shape_to_string(kernel.shape()));
  }
  const std::size_t out_h = window_output_extent(height, kh, stride.h, padding.h, "height");
  const std::size_t out_w = window_output_extent(width, kw, stride.w, padding.w, "width");

  const auto in = input.data();
  const auto w = kernel.data();
  std::vector<double> acc(n_batch * filters * out_h * out_w);
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t k = 0; k < filters; ++k) {
      for (std::size_t y = 0; y < out_h; ++y) {
        for (std::size_t x = 0; x < out_w; ++x) {
          double sum = static_cast<double>(bias[k]);
          for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t dy = 0; dy < kh; ++dy) {
              const auto iy = static_cast<std::ptrdiff_t>(y * stride.h + dy) - static_cast<std::ptrdiff_t>(padding.h);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const auto ix =
                    static_cast<std::ptrdiff_t>(x * stride.w + dx) - static_cast<std::ptrdiff_t>(padding.w);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
                sum += static_cast<double>(in[((n * channels + c) * height + iy) * width + ix]) *
                       static_cast<double>(w[((k * channels + c) * kh + dy) * kw + dx]);
              }
            }
          }
          acc[((n * filters + k) * out_h + y) * out_w + x] = sum;
        }
      }
    }
  }
  return from_accumulator<T>({n_batch, filters, out_h, out_w}, acc);
}

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_output, const Tensor<T>& kernel, const Shape& input_shape,
                                Extent2 stride, Extent2 padding) {
  require_rank(grad_output.shape(), 4, "conv2d gradient");
  require_rank(input_shape, 4, "conv2d input");
  const std::size_t n_batch = input_shape[0], channels = input_shape[1], height = input_shape[2],
                    width = input_shape[3];
  const std::size_t filters = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t out_h = grad_output.dim(2), out_w = grad_output.dim(3);
  if (grad_output.dim(0) != n_batch || grad_output.dim(1) != filters) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d gradient " + shape_to_string(grad_output.shape()) +
                                              " does not match kernel " + shape_to_string(kernel.shape()));
  }

  const auto g = grad_output.data();
  const auto w = kernel.data();
  std::vector<double> acc(shape_numel(input_shape), 0.0);
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t k = 0; k < filters; ++k) {
      for (std::size_t y = 0; y < out_h; ++y) {
        for (std::size_t x = 0; x < out_w; ++x) {
          const double go = static_cast<double>(g[((n * filters + k) * out_h + y) * out_w + x]);
          if (go == 0.0) continue;
          for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t dy = 0; dy < kh; ++dy) {
              const auto iy = static_cast<std::ptrdiff_t>(y * stride.h + dy) - static_cast<std::ptrdiff_t>(padding.h);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const auto ix =
                    static_cast<std::ptrdiff_t>(x * stride.w + dx) - static_cast<std::ptrdiff_t>(padding.w);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
                acc[((n * channels + c) * height + iy) * width + ix] +=
                    go * static_cast<double>(w[((k * channels + c) * kh + dy) * kw + dx]);
              }
            }
          }
        }
      }
    }
  }
  return from_accumulator<T>(input_shape, acc);
}

template <typename T>
PoolResult<T> maxpool2d(const Tensor<T>& input, Extent2 window, Extent2 stride) {
  require_rank(input.shape(), 4, "maxpool2d input");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1), height = input.dim(2), width = input.dim(3);
  const std::size_t out_h = window_output_extent(height, window.h, stride.h, 0, "height");
  const std::size_t out_w = window_output_extent(width, window.w, stride.w, 0, "width");

  const auto in = input.data();
  Tensor<T> out({n_batch, channels, out_h, out_w});
  std::vector<std::size_t> argmax(out.size());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n_batch * channels; ++plane) {
    const std::size_t base = plane * height * width;
    for (std::size_t y = 0; y < out_h; ++y) {
      for (std::size_t x = 0; x < out_w; ++x, ++o) {
        std::size_t best = base + (y * stride.h) * width + x * stride.w;
        for (std::size_t dy = 0; dy < window.h; ++dy) {
          for (std::size_t dx = 0; dx < window.w; ++dx) {
            const std::size_t idx = base + (y * stride.h + dy) * width + (x * stride.w + dx);
            if (in[idx] > in[best]) best = idx;
          }
        }
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  return {std::move(out), std::move(argmax)};
}

template <typename T>
Tensor<T> maxpool2d_backward(const Tensor<T>& grad_output, const std::vector<std::size_t>& argmax,
                             const Shape& input_shape) {
  if (argmax.size() != grad_output.size()) {
    throw Error(ErrorKind::ShapeMismatch, "maxpool2d gradient " + shape_to_string(grad_output.shape()) +
                                              " does not match recorded argmax grid");
  }
  std::vector<double> acc(shape_numel(input_shape), 0.0);
  for (std::size_t i = 0; i < argmax.size(); ++i) acc[argmax[i]] += static_cast<double>(grad_output[i]);
  return from_accumulator<T>(input_shape, acc);
}

template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& input) {
  require_rank(input.shape(), 4, "global_average_pool input");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  const auto in = input.data();
  std::vector<double> acc(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    double sum = 0.0;
    for (std::size_t i = 0; i < area; ++i) sum += static_cast<double>(in[p * area + i]);
    acc[p] = sum / static_cast<double>(area);
  }
  return from_accumulator<T>({input.dim(0), input.dim(1)}, acc);
}

template <typename T>
Tensor<T> global_average_pool_backward(const Tensor<T>& grad_output, const Shape& input_shape) {
  require_rank(input_shape, 4, "global_average_pool input");
  const std::size_t planes = input_shape[0] * input_shape[1];
  const std::size_t area = input_shape[2] * input_shape[3];
  if (grad_output.size() != planes) {
    throw Error(ErrorKind::ShapeMismatch, "global_average_pool gradient " + shape_to_string(grad_output.shape()) +
                                              " does not match input " + shape_to_string(input_shape));
  }
  std::vector<double> acc(planes * area);
  for (std::size_t p = 0; p < planes; ++p) {
    const double g = static_cast<double>(grad_output[p]) / static_cast<double>(area);
    std::fill_n(acc.begin() + static_cast<std::ptrdiff_t>(p * area), area, g);
  }
  return from_accumulator<T>(input_shape, acc);
}

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input.shape(), 2, "dense input");
  require_rank(weight.shape(), 2, "dense weight");
  const std::size_t rows = input.dim(0), inner = input.dim(1), outs = weight.dim(0);
  if (weight.dim(1) != inner) {
    throw Error(ErrorKind::ShapeMismatch, "dense dimension mismatch: input " + shape_to_string(input.shape()) +
                                              " vs weight " + shape_to_string(weight.shape()));
  }
  if (bias.shape() != Shape{outs}) {
    throw Error(ErrorKind::ShapeMismatch, "dense bias " + shape_to_string(bias.shape()) + " does not match weight " +
                                              shape_to_string(weight.shape()));
  }
  const auto x = input.data();
  const auto w = weight.data();
  std::vector<double> acc(rows * outs);
  for (std::size_t n = 0; n < rows; ++n) {
    for (std::size_t m = 0; m < outs; ++m) {
      double sum = static_cast<double>(bias[m]);
      for (std::size_t d = 0; d < inner; ++d) {
        sum += static_cast<double>(x[n * inner + d]) * static_cast<double>(w[m * inner + d]);
      }
      acc[n * outs + m] = sum;
    }
  }
  return from_accumulator<T>({rows, outs}, acc);
}

template <typename T>
Tensor<T> dense_backward_input(const Tensor<T>& grad_output, const Tensor<T>& weight) {
  require_rank(grad_output.shape(), 2, "dense gradient");
  const std::size_t rows = grad_output.dim(0), outs = weight.dim(0), inner = weight.dim(1);
  if (grad_output.dim(1) != outs) {
    throw Error(ErrorKind::ShapeMismatch, "dense gradient " + shape_to_string(grad_output.shape()) +
                                              " does not match weight " + shape_to_string(weight.shape()));
  }
  const auto g = grad_output.data();
  const auto w = weight.data();
  std::vector<double> acc(rows * inner, 0.0);
  for (std::size_t n = 0; n < rows; ++n) {
    for (std::size_t m = 0; m < outs; ++m) {
      const double go = static_cast<double>(g[n * outs + m]);
      for (std::size_t d = 0; d < inner; ++d) acc[n * inner + d] += go * static_cast<double>(w[m * inner + d]);
    }
  }
  return from_accumulator<T>({rows, inner}, acc);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_output, const Tensor<T>& input, bool guided) {
  if (grad_output.shape() != input.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "relu gradient " + shape_to_string(grad_output.shape()) +
                                              " does not match input " + shape_to_string(input.shape()));
  }
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool open = input[i] > T{0} && (!guided || grad_output[i] > T{0});
    out[i] = open ? grad_output[i] : T{0};
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& input) {
  require_rank(input.shape(), 2, "softmax input");
  const std::size_t rows = input.dim(0), cols = input.dim(1);
  std::vector<double> acc(input.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) peak = std::max(peak, static_cast<double>(input[r * cols + c]));
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      acc[r * cols + c] = std::exp(static_cast<double>(input[r * cols + c]) - peak);
      total += acc[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) acc[r * cols + c] /= total;
  }
  return from_accumulator<T>(input.shape(), acc);
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& grad_output, const Tensor<T>& output) {
  if (grad_output.shape() != output.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "softmax gradient " + shape_to_string(grad_output.shape()) +
                                              " does not match output " + shape_to_string(output.shape()));
  }
  const std::size_t rows = output.dim(0), cols = output.dim(1);
  std::vector<double> acc(output.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      dot += static_cast<double>(grad_output[r * cols + c]) * static_cast<double>(output[r * cols + c]);
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const double s = static_cast<double>(output[r * cols + c]);
      acc[r * cols + c] = s * (static_cast<double>(grad_output[r * cols + c]) - dot);
    }
  }
  return from_accumulator<T>(output.shape(), acc);
}

#define SALIENCY_INSTANTIATE_KERNELS(T)                                                                         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Extent2, Extent2);           \
  template Tensor<T> conv2d_backward_input(const Tensor<T>&, const Tensor<T>&, const Shape&, Extent2, Extent2); \
  template PoolResult<T> maxpool2d(const Tensor<T>&, Extent2, Extent2);                                        \
  template Tensor<T> maxpool2d_backward(const Tensor<T>&, const std::vector<std::size_t>&, const Shape&);      \
  template Tensor<T> global_average_pool(const Tensor<T>&);                                                     \
  template Tensor<T> global_average_pool_backward(const Tensor<T>&, const Shape&);                              \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> dense_backward_input(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                                    \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&, bool);                                   \
  template Tensor<T> softmax(const Tensor<T>&);                                                                 \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);

SALIENCY_INSTANTIATE_KERNELS(float)
SALIENCY_INSTANTIATE_KERNELS(double)

#undef SALIENCY_INSTANTIATE_KERNELS

}  // namespace saliency::kernels
