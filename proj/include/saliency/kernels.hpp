#pragma once

#include <cstddef>
#include <vector>

#include "saliency/tensor.hpp"

// Raw numeric kernels. Forward kernels follow framework conventions
// (cross-correlation, NCHW); the *_backward functions propagate a gradient
// from a kernel's output back to its activation input. Sums accumulate in
// double regardless of T.
namespace saliency::kernels {

/// out[n,k,y,x] = bias[k] + sum_{c,dy,dx} in[n,c,y*s+dy-p, x*s+dx-p] * w[k,c,dy,dx],
/// with out-of-bounds input reading as zero.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, Extent2 stride,
                 Extent2 padding);

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_output, const Tensor<T>& kernel, const Shape& input_shape,
                                Extent2 stride, Extent2 padding);

/// Output extent of a sliding window, or throws GeometryError / ShapeMismatch
/// when the window does not tile the padded input.
std::size_t window_output_extent(std::size_t in, std::size_t window, std::size_t stride, std::size_t pad,
                                 const char* axis);

template <typename T>
struct PoolResult {
  Tensor<T> output;
  /// Flat index into the input tensor of each output's winner.
  std::vector<std::size_t> argmax;
};

/// Ties go to the first element in row-major window order.
template <typename T>
PoolResult<T> maxpool2d(const Tensor<T>& input, Extent2 window, Extent2 stride);

template <typename T>
Tensor<T> maxpool2d_backward(const Tensor<T>& grad_output, const std::vector<std::size_t>& argmax,
                             const Shape& input_shape);

template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& input);

template <typename T>
Tensor<T> global_average_pool_backward(const Tensor<T>& grad_output, const Shape& input_shape);

/// out = input * weight^T + bias for input [N,D], weight [M,D], bias [M].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> dense_backward_input(const Tensor<T>& grad_output, const Tensor<T>& weight);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Standard rule passes grad where input > 0 (exactly 0 gets zero gradient).
/// Guided rule additionally requires the incoming gradient to be positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_output, const Tensor<T>& input, bool guided);

/// Row-wise softmax of an [N,M] tensor using max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& input);

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& grad_output, const Tensor<T>& output);

}  // namespace saliency::kernels
