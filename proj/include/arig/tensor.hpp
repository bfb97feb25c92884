#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "arig/error.hpp"

namespace arig {

// Dense row-major 2-D array. Vectors are either std::vector or a 1-row Tensor.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match " + shape_string(rows_, cols_));
    }
  }

  static Tensor row_vector(std::span<const T> v) {
    return Tensor(1, v.size(), std::vector<T>(v.begin(), v.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  const std::vector<T>& values() const { return data_; }

  std::string shape() const { return shape_string(rows_, cols_); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(rows_, cols_, std::move(out));
  }

  bool operator==(const Tensor& o) const = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
T max_abs(std::span<const T> v) {
  T m{0};
  for (T x : v) m = std::max(m, std::abs(x));
  return m;
}

// Stack rows of several tensors with equal width.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) {
    throw ConfigError("concat_rows width mismatch " + a.shape() + " vs " + b.shape());
  }
  Tensor<T> out(a.rows() + b.rows(), a.cols());
  std::copy(a.flat().begin(), a.flat().end(), out.data());
  std::copy(b.flat().begin(), b.flat().end(), out.data() + a.size());
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  Tensor<T> out(count, x.cols());
  std::copy(x.data() + begin * x.cols(), x.data() + (begin + count) * x.cols(), out.data());
  return out;
}

}  // namespace arig
