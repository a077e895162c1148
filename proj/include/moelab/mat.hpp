#pragma once

#include <cstddef>
#include <cstring>
#include <string>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

// Dense row-major matrix. Every tensor in this library is 2-D; scalars are
// 1x1 and vectors are nx1 or 1xn. The element type is float for training
// and double for gradient-check oracles.
template <typename T>
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Mat: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str());
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool bit_equal(const Mat& o) const {
    return same_shape(o) &&
           (data_.empty() ||
            std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0);
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  static Mat zeros_like(const Mat& o) { return Mat(o.rows_, o.cols_); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
inline void check_same_shape(const Mat<T>& a, const Mat<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

}  // namespace moelab
