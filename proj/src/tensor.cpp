#include "embolite/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "embolite/errors.hpp"

namespace embolite {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match data length " +
                         std::to_string(data_.size()));
  }
}

int Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw DimensionError("axis out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

std::size_t Tensor::offset(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw DimensionError("index rank mismatch for shape " + shape_str(shape_));
  }
  std::size_t off = 0;
  std::size_t k = 0;
  for (int i : idx) off = off * static_cast<std::size_t>(shape_[k++]) + static_cast<std::size_t>(i);
  return off;
}

double& Tensor::at(std::initializer_list<int> idx) { return data_[offset(idx)]; }
double Tensor::at(std::initializer_list<int> idx) const { return data_[offset(idx)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
double Tensor::max() const { return *std::max_element(data_.begin(), data_.end()); }
double Tensor::min() const { return *std::min_element(data_.begin(), data_.end()); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor slice_leading(const Tensor& t, int start, int count) {
  if (start < 0 || count <= 0 || start + count > t.dim(0)) {
    throw DimensionError("leading slice out of range for shape " + shape_str(t.shape()));
  }
  Shape s = t.shape();
  const std::size_t inner = t.numel() / static_cast<std::size_t>(s[0]);
  s[0] = count;
  std::vector<double> d(t.vec().begin() + static_cast<std::ptrdiff_t>(inner * start),
                        t.vec().begin() + static_cast<std::ptrdiff_t>(inner * (start + count)));
  return Tensor(std::move(s), std::move(d));
}

}  // namespace embolite
