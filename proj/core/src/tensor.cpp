#include "masa/tensor.hpp"

#include <random>

namespace masa {

std::string to_string(const Shape4& s) {
  return "[" + std::to_string(s.batch) + "," + std::to_string(s.channels) + "," +
         std::to_string(s.height) + "," + std::to_string(s.width) + "]";
}

Tensor<float> gaussian_tensor(Shape4 shape, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Tensor<float> out(shape);
  for (auto& v : out.values()) v = normal(rng);
  return out;
}

template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  MASA_EXPECTS(!parts.empty(), "concat_batch of nothing");
  Shape4 s = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    MASA_EXPECTS(p.shape().channels == s.channels && p.shape().height == s.height &&
                     p.shape().width == s.width,
                 "concat_batch: incompatible sample shapes");
    total += p.shape().batch;
  }
  s.batch = total;
  std::vector<T> values;
  values.reserve(s.size());
  for (const auto& p : parts) values.insert(values.end(), p.values().begin(), p.values().end());
  return Tensor<T>(s, std::move(values));
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, int b) {
  MASA_EXPECTS(b >= 0 && b < t.shape().batch, "slice_batch: index out of range");
  Shape4 s = t.shape();
  s.batch = 1;
  auto src = t.sample(b);
  return Tensor<T>(s, std::vector<T>(src.begin(), src.end()));
}

template Tensor<float> concat_batch(std::span<const Tensor<float>>);
template Tensor<double> concat_batch(std::span<const Tensor<double>>);
template Tensor<float> slice_batch(const Tensor<float>&, int);
template Tensor<double> slice_batch(const Tensor<double>&, int);

}  // namespace masa
