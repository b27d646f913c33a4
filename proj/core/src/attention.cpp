#include "masa/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "masa/errors.hpp"

namespace masa {

namespace {

template <typename T>
void check_inputs(const Heads<T>& q, const Heads<T>& k, const Heads<T>& v) {
  MASA_EXPECTS(!q.empty(), "attention: no heads");
  MASA_EXPECTS(q.size() == k.size() && q.size() == v.size(), "attention: head count mismatch");
  for (std::size_t h = 0; h < q.size(); ++h) {
    MASA_EXPECTS(q[h].cols() > 0, "attention: head_dim must be positive");
    MASA_EXPECTS(q[h].cols() == k[h].cols(), "attention: query/key dim mismatch");
    MASA_EXPECTS(k[h].rows() == v[h].rows(), "attention: key/value count mismatch");
    MASA_EXPECTS(k[h].rows() > 0, "attention: no keys");
    MASA_EXPECTS(q[h].allFinite() && k[h].allFinite() && v[h].allFinite(),
                 "attention: non-finite input");
  }
}

template <typename T>
Mat<T> scores_for_head(const Mat<T>& q, const Mat<T>& k) {
  const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  Mat<T> s = (q * k.transpose()) * scale;
  return s;
}

}  // namespace

template <typename T>
void softmax_rows(Mat<T>& scores) {
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    auto row = scores.row(r);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

template <typename T>
AttentionResult<T> attention(const Heads<T>& q, const Heads<T>& k, const Heads<T>& v) {
  check_inputs(q, k, v);
  AttentionResult<T> res;
  res.out.reserve(q.size());
  res.weights.reserve(q.size());
  for (std::size_t h = 0; h < q.size(); ++h) {
    Mat<T> a = scores_for_head(q[h], k[h]);
    softmax_rows(a);
    res.out.push_back(a * v[h]);
    res.weights.push_back(std::move(a));
  }
  return res;
}

template <typename T>
MaskedAttentionResult<T> masked_attention(const Heads<T>& q, const Heads<T>& k, const Heads<T>& v,
                                          std::span<const std::uint8_t> key_mask) {
  check_inputs(q, k, v);
  const auto n_k = static_cast<std::size_t>(k.front().rows());
  if (key_mask.size() != n_k) {
    throw ContractError("masked_attention: mask has " + std::to_string(key_mask.size()) + " entries for " +
                        std::to_string(n_k) + " keys");
  }
  const auto active = static_cast<std::size_t>(std::count_if(key_mask.begin(), key_mask.end(),
                                                             [](std::uint8_t m) { return m != 0; }));
  MaskedAttentionResult<T> res;
  if (active == n_k || active == 0) {
    res.out = attention(q, k, v).out;
    res.fallback = active == 0;
    return res;
  }
  const T bias = static_cast<T>(kMaskedScoreBias);
  res.out.reserve(q.size());
  for (std::size_t h = 0; h < q.size(); ++h) {
    Mat<T> a = scores_for_head(q[h], k[h]);
    for (std::size_t j = 0; j < n_k; ++j) {
      if (key_mask[j] == 0) a.col(static_cast<Eigen::Index>(j)).array() += bias;
    }
    softmax_rows(a);
    res.out.push_back(a * v[h]);
  }
  return res;
}

template void softmax_rows(Mat<float>&);
template void softmax_rows(Mat<double>&);
template AttentionResult<float> attention(const Heads<float>&, const Heads<float>&, const Heads<float>&);
template AttentionResult<double> attention(const Heads<double>&, const Heads<double>&, const Heads<double>&);
template MaskedAttentionResult<float> masked_attention(const Heads<float>&, const Heads<float>&,
                                                       const Heads<float>&, std::span<const std::uint8_t>);
template MaskedAttentionResult<double> masked_attention(const Heads<double>&, const Heads<double>&,
                                                        const Heads<double>&, std::span<const std::uint8_t>);

}  // namespace masa
