#include "saliency/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace saliency {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) {
      throw Error(ErrorKind::ShapeMismatch,
                  "tensor extents must be positive, got " + shape_to_string(shape));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), T{0});
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw Error(ErrorKind::ShapeMismatch, "shape " + shape_to_string(shape_) + " needs " +
                                              std::to_string(shape_numel(shape_)) + " elements, got " +
                                              std::to_string(data_.size()));
  }
}

template <typename T>
Tensor<T> Tensor<T>::filled(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw Error(ErrorKind::InvalidArgument, "index rank " + std::to_string(index.size()) +
                                                " does not match tensor shape " + shape_to_string(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) {
      throw Error(ErrorKind::InvalidArgument, "index out of range for shape " + shape_to_string(shape_));
    }
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template class Tensor<float>;
template class Tensor<double>;

Grid::Grid(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
  if (values.size() != rows * cols) {
    throw Error(ErrorKind::ShapeMismatch, "grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                                              " needs " + std::to_string(rows * cols) + " values, got " +
                                              std::to_string(values.size()));
  }
}

}  // namespace saliency
