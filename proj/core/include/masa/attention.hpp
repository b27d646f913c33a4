#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

namespace masa {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// One matrix per head, each [rows, head_dim] (or [n_q, n_k] for attention maps).
template <typename T>
using Heads = std::vector<Mat<T>>;

template <typename T>
struct AttentionResult {
  Heads<T> out;      // [h][n_q, d]
  Heads<T> weights;  // [h][n_q, n_k], row-stochastic
};

template <typename T>
struct MaskedAttentionResult {
  Heads<T> out;
  bool fallback = false;  // key mask was empty, plain attention was used
};

// Additive score bias for excluded keys.
inline constexpr double kMaskedScoreBias = -1e9;

// softmax(Q K^T / sqrt(d)) V per head, with max subtraction.
template <typename T>
AttentionResult<T> attention(const Heads<T>& q, const Heads<T>& k, const Heads<T>& v);

// Attention restricted to keys with key_mask = 1. An all-ones mask takes the
// unmasked path; an all-zeros mask falls back to unmasked attention.
template <typename T>
MaskedAttentionResult<T> masked_attention(const Heads<T>& q, const Heads<T>& k, const Heads<T>& v,
                                          std::span<const std::uint8_t> key_mask);

// Row-wise softmax in place.
template <typename T>
void softmax_rows(Mat<T>& scores);

}  // namespace masa
