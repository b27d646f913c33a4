#pragma once

// Scalar-loop reference implementations. They share no code with the library:
// plain nested loops over std::vector in long double, no Eigen.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace masa::oracle {

using Real = long double;
// Row-major [rows][cols].
using Matrix = std::vector<std::vector<Real>>;

inline Matrix random_matrix(std::mt19937_64& rng, int rows, int cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(static_cast<std::size_t>(rows), std::vector<Real>(static_cast<std::size_t>(cols)));
  for (auto& row : m) {
    for (auto& x : row) x = n(rng);
  }
  return m;
}

// softmax over keys where keep[j] != 0 (all keys when keep is empty), then weights @ V.
inline Matrix attention_head(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<std::uint8_t>& keep = {}) {
  const std::size_t nq = q.size(), nk = k.size(), d = q.front().size(), dv = v.front().size();
  const Real scale = 1.0L / std::sqrt(static_cast<Real>(d));
  Matrix out(nq, std::vector<Real>(dv, 0.0L));
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<Real> s(nk, 0.0L);
    Real mx = -INFINITY;
    for (std::size_t j = 0; j < nk; ++j) {
      if (!keep.empty() && keep[j] == 0) continue;
      Real dot = 0.0L;
      for (std::size_t c = 0; c < d; ++c) dot += q[i][c] * k[j][c];
      s[j] = dot * scale;
      mx = std::max(mx, s[j]);
    }
    Real z = 0.0L;
    for (std::size_t j = 0; j < nk; ++j) {
      if (!keep.empty() && keep[j] == 0) {
        s[j] = 0.0L;
        continue;
      }
      s[j] = std::exp(s[j] - mx);
      z += s[j];
    }
    for (std::size_t j = 0; j < nk; ++j) {
      for (std::size_t c = 0; c < dv; ++c) out[i][c] += s[j] / z * v[j][c];
    }
  }
  return out;
}

// Attention weights [nq][nk].
inline Matrix attention_weights(const Matrix& q, const Matrix& k) {
  const std::size_t nq = q.size(), nk = k.size(), d = q.front().size();
  Matrix w(nq, std::vector<Real>(nk));
  for (std::size_t i = 0; i < nq; ++i) {
    Real mx = -INFINITY;
    for (std::size_t j = 0; j < nk; ++j) {
      Real dot = 0.0L;
      for (std::size_t c = 0; c < d; ++c) dot += q[i][c] * k[j][c];
      w[i][j] = dot / std::sqrt(static_cast<Real>(d));
      mx = std::max(mx, w[i][j]);
    }
    Real z = 0.0L;
    for (auto& x : w[i]) z += (x = std::exp(x - mx));
    for (auto& x : w[i]) x /= z;
  }
  return w;
}

// An all-empty key set falls back to unrestricted attention.
inline Matrix masked_attention_head(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<std::uint8_t>& keep) {
  const bool any = std::any_of(keep.begin(), keep.end(), [](std::uint8_t x) { return x != 0; });
  return any ? attention_head(q, k, v, keep) : attention_head(q, k, v);
}

// Linear or scaled-linear betas and their cumulative products.
struct Schedule {
  std::vector<Real> beta, alpha_bar;
};

inline Schedule schedule(int T, double b0, double b1, bool scaled = false) {
  Schedule s;
  Real prod = 1.0L;
  for (int i = 0; i < T; ++i) {
    const Real f = T == 1 ? 0.0L : static_cast<Real>(i) / static_cast<Real>(T - 1);
    Real b;
    if (scaled) {
      const Real r = std::sqrt(static_cast<Real>(b0)) + f * (std::sqrt(static_cast<Real>(b1)) - std::sqrt(static_cast<Real>(b0)));
      b = r * r;
    } else {
      b = b0 + f * (static_cast<Real>(b1) - b0);
    }
    prod *= 1.0L - b;
    s.beta.push_back(b);
    s.alpha_bar.push_back(prod);
  }
  return s;
}

// alpha_bar with t = -1 standing for the clean boundary.
inline Real ab(const Schedule& s, int t) { return t < 0 ? 1.0L : s.alpha_bar[static_cast<std::size_t>(t)]; }

inline Real ddim(const Schedule& s, Real x, Real eps, int t, int t_prev) {
  const Real x0 = (x - std::sqrt(1.0L - ab(s, t)) * eps) / std::sqrt(ab(s, t));
  return std::sqrt(ab(s, t_prev)) * x0 + std::sqrt(1.0L - ab(s, t_prev)) * eps;
}

inline Real ddim_clipped(const Schedule& s, Real x, Real eps, int t, int t_prev, Real clip) {
  Real x0 = (x - std::sqrt(1.0L - ab(s, t)) * eps) / std::sqrt(ab(s, t));
  if (x0 > clip) x0 = clip;
  if (x0 < -clip) x0 = -clip;
  const Real e = (x - std::sqrt(ab(s, t)) * x0) / std::sqrt(1.0L - ab(s, t));
  return std::sqrt(ab(s, t_prev)) * x0 + std::sqrt(1.0L - ab(s, t_prev)) * e;
}

// Same deterministic map; DDIM inversion swaps which end is the source.
inline Real ddim_invert(const Schedule& s, Real x, Real eps, int t, int t_next) { return ddim(s, x, eps, t, t_next); }

inline Real ddpm(const Schedule& s, Real x, Real eps, int t, Real noise) {
  const Real b = s.beta[static_cast<std::size_t>(t)];
  const Real mu = (x - b / std::sqrt(1.0L - ab(s, t)) * eps) / std::sqrt(1.0L - b);
  return t > 0 ? mu + std::sqrt(b) * noise : mu;
}

inline Real cfg(Real cond, Real uncond, Real w) { return uncond + w * (cond - uncond); }

// Elementwise relative error; the floor only matters for outputs that are zero to about 8 digits.
inline double rel_err(Real got, Real want) {
  return static_cast<double>(std::fabs(got - want) / std::max<Real>(1e-8L, std::fabs(want)));
}

}  // namespace masa::oracle
