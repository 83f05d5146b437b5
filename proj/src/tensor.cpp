#include "moa/tensor.hpp"

#include "moa/errors.hpp"

namespace moa {

std::string shape_string(std::size_t rows, std::size_t cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("tensor dimensions must be positive, got " +
                         moa::shape_string(rows, cols));
  }
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("tensor dimensions must be positive, got " +
                         moa::shape_string(rows, cols));
  }
  if (data_.size() != rows * cols) {
    throw DimensionError("tensor " + moa::shape_string(rows, cols) + " given " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() requires a 1x1 tensor, got " + shape_string());
  }
  return data_[0];
}

std::string Tensor::shape_string() const { return moa::shape_string(rows_, cols_); }

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

Tensor& Tensor::operator+=(const Tensor& o) {
  if (!same_shape(o)) {
    throw DimensionError("cannot add " + o.shape_string() + " into " + shape_string());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

}  // namespace moa
