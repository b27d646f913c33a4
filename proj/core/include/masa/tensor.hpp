#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "masa/errors.hpp"

namespace masa {

struct Shape4 {
  int batch = 0;
  int channels = 0;
  int height = 0;
  int width = 0;

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(batch) * channels * height * width;
  }
  [[nodiscard]] std::size_t sample_size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

std::string to_string(const Shape4& s);

// Dense NCHW tensor with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {
    MASA_EXPECTS(shape.batch >= 0 && shape.channels >= 0 && shape.height >= 0 && shape.width >= 0,
                 "negative tensor dimension");
  }
  Tensor(Shape4 shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    MASA_EXPECTS(data_.size() == shape_.size(), "tensor value count does not match shape");
  }

  [[nodiscard]] const Shape4& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] T* data() { return data_.data(); }
  [[nodiscard]] const T* data() const { return data_.data(); }
  [[nodiscard]] std::span<T> values() { return data_; }
  [[nodiscard]] std::span<const T> values() const { return data_; }

  [[nodiscard]] std::span<T> sample(int b) {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(b) * shape_.sample_size(),
                                       shape_.sample_size());
  }
  [[nodiscard]] std::span<const T> sample(int b) const {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(b) * shape_.sample_size(),
                                             shape_.sample_size());
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int b, int c, int y, int x) { return data_[offset(b, c, y, x)]; }
  const T& at(int b, int c, int y, int x) const { return data_[offset(b, c, y, x)]; }

  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  [[nodiscard]] std::size_t offset(int b, int c, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_.channels + c) * shape_.height + y) * shape_.width + x;
  }

  Shape4 shape_{};
  std::vector<T> data_;
};

using Latent = Tensor<float>;

template <typename T>
void expect_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!(a.shape() == b.shape())) {
    throw ContractError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                        to_string(b.shape()));
  }
}

// Draws an i.i.d. standard-normal tensor from a seeded engine.
Tensor<float> gaussian_tensor(Shape4 shape, unsigned long long seed);

// Stacks batch-1 tensors along the batch axis.
template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, int b);

}  // namespace masa
