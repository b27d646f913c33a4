#include "masa/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

namespace masa {

std::string to_string(BetaKind kind) { return kind == BetaKind::linear ? "linear" : "scaled_linear"; }

BetaKind beta_kind_from_string(const std::string& s) {
  if (s == "linear") return BetaKind::linear;
  if (s == "scaled_linear") return BetaKind::scaled_linear;
  throw ConfigError("unknown beta schedule kind '" + s + "'");
}

int Timestep::index() const {
  MASA_EXPECTS(!is_boundary(), "boundary timestep has no table index");
  return index_;
}

NoiseSchedule NoiseSchedule::make(int num_timesteps, double beta_start, double beta_end, BetaKind kind) {
  if (num_timesteps < 1) throw ConfigError("schedule needs at least one timestep");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.params_ = {num_timesteps, beta_start, beta_end, kind};
  const auto n = static_cast<std::size_t>(num_timesteps);
  s.betas_.resize(n);
  s.alphas_.resize(n);
  s.alpha_bars_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    if (kind == BetaKind::linear) {
      s.betas_[i] = beta_start + frac * (beta_end - beta_start);
    } else {
      const double a = std::sqrt(beta_start);
      const double b = std::sqrt(beta_end);
      const double r = a + frac * (b - a);
      s.betas_[i] = r * r;
    }
  }
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    s.alphas_[i] = 1.0 - s.betas_[i];
    prod *= s.alphas_[i];
    s.alpha_bars_[i] = prod;
  }
  return s;
}

void NoiseSchedule::check_index(int t) const {
  if (t < 0 || t >= num_timesteps()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_timesteps()) +
                        ")");
  }
}

double NoiseSchedule::alpha_bar(Timestep t) const {
  if (t.is_boundary()) return 1.0;
  check_index(t.index());
  return alpha_bars_[static_cast<std::size_t>(t.index())];
}

std::vector<int> sampling_timesteps(int num_timesteps, int steps) {
  if (steps < 0 || steps > num_timesteps) {
    throw ConfigError("sampling steps must lie in [0, T]");
  }
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(steps));
  for (int k = steps - 1; k >= 0; --k) {
    ts.push_back(static_cast<int>((static_cast<long long>(k) * num_timesteps) / steps));
  }
  return ts;
}

namespace {

// out = a * x + b * y elementwise
template <typename T>
Tensor<T> affine2(const Tensor<T>& x, double a, const Tensor<T>& y, double b) {
  Tensor<T> out(x.shape());
  const auto ta = static_cast<T>(a);
  const auto tb = static_cast<T>(b);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = ta * x[i] + tb * y[i];
  return out;
}

// Shared DDIM move: re-noise the predicted x0 to a new alpha_bar. With a clip
// bound, x0 is clamped to [-clip, clip] and the noise is re-derived from the
// clamped x0 so the move stays on the DDIM path through x_t.
template <typename T>
Tensor<T> ddim_move(const Tensor<T>& x_t, const Tensor<T>& eps, double ab_from, double ab_to,
                    std::optional<double> clip = std::nullopt) {
  Tensor<T> out(x_t.shape());
  const auto s_from = static_cast<T>(std::sqrt(1.0 - ab_from));
  const auto inv_from = static_cast<T>(1.0 / std::sqrt(ab_from));
  const auto a_to = static_cast<T>(std::sqrt(ab_to));
  const auto s_to = static_cast<T>(std::sqrt(1.0 - ab_to));
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    T x0 = (x_t[i] - s_from * eps[i]) * inv_from;
    T e = eps[i];
    if (clip) {
      x0 = std::clamp(x0, static_cast<T>(-*clip), static_cast<T>(*clip));
      e = (x_t[i] - x0 / inv_from) / s_from;
    }
    out[i] = a_to * x0 + s_to * e;
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  expect_same_shape(x0, eps, "q_sample");
  sched.check_index(t);
  const double ab = sched.alpha_bars()[static_cast<std::size_t>(t)];
  return affine2(x0, std::sqrt(ab), eps, std::sqrt(1.0 - ab));
}

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Timestep t, const NoiseSchedule& sched) {
  expect_same_shape(x_t, eps_pred, "predict_x0");
  const double ab = sched.alpha_bar(t);
  return affine2(x_t, 1.0 / std::sqrt(ab), eps_pred, -std::sqrt(1.0 - ab) / std::sqrt(ab));
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Timestep t, Timestep t_prev,
                    const NoiseSchedule& sched) {
  expect_same_shape(x_t, eps_pred, "ddim_step");
  if (!(t_prev < t)) throw ContractError("ddim_step requires t_prev < t");
  return ddim_move(x_t, eps_pred, sched.alpha_bar(t), sched.alpha_bar(t_prev));
}

template <typename T>
Tensor<T> ddim_step_clipped(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Timestep t, Timestep t_prev,
                            const NoiseSchedule& sched, double clip) {
  expect_same_shape(x_t, eps_pred, "ddim_step_clipped");
  if (!(t_prev < t)) throw ContractError("ddim_step_clipped requires t_prev < t");
  if (!(clip > 0)) throw ContractError("ddim_step_clipped requires a positive bound");
  return ddim_move(x_t, eps_pred, sched.alpha_bar(t), sched.alpha_bar(t_prev), clip);
}

template <typename T>
Tensor<T> ddim_invert_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Timestep t, Timestep t_next,
                           const NoiseSchedule& sched) {
  expect_same_shape(x_t, eps_pred, "ddim_invert_step");
  if (!(t < t_next)) throw ContractError("ddim_invert_step requires t_next > t");
  return ddim_move(x_t, eps_pred, sched.alpha_bar(t), sched.alpha_bar(t_next));
}

template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, int t, const NoiseSchedule& sched,
                    const Tensor<T>& noise) {
  expect_same_shape(x_t, eps_pred, "ddpm_step");
  sched.check_index(t);
  const auto i = static_cast<std::size_t>(t);
  const double alpha = sched.alphas()[i];
  const double beta = sched.betas()[i];
  const double ab = sched.alpha_bars()[i];
  const auto inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(alpha));
  const auto eps_coef = static_cast<T>((1.0 - alpha) / std::sqrt(1.0 - ab));
  Tensor<T> out(x_t.shape());
  for (std::size_t k = 0; k < x_t.size(); ++k) out[k] = inv_sqrt_alpha * (x_t[k] - eps_coef * eps_pred[k]);
  if (t > 0) {
    expect_same_shape(x_t, noise, "ddpm_step noise");
    const auto sigma = static_cast<T>(std::sqrt(beta));
    for (std::size_t k = 0; k < x_t.size(); ++k) out[k] += sigma * noise[k];
  }
  return out;
}

template <typename T>
double training_loss(const Tensor<T>& eps_true, const Tensor<T>& eps_pred) {
  expect_same_shape(eps_true, eps_pred, "training_loss");
  MASA_EXPECTS(!eps_true.empty(), "training_loss of empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < eps_true.size(); ++i) {
    const double d = static_cast<double>(eps_true[i]) - static_cast<double>(eps_pred[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(eps_true.size());
}

#define MASA_INSTANTIATE_SCHEDULE(T)                                                                   \
  template Tensor<T> q_sample(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);          \
  template Tensor<T> predict_x0(const Tensor<T>&, const Tensor<T>&, Timestep, const NoiseSchedule&);   \
  template Tensor<T> ddim_step(const Tensor<T>&, const Tensor<T>&, Timestep, Timestep,                 \
                               const NoiseSchedule&);                                                  \
  template Tensor<T> ddim_step_clipped(const Tensor<T>&, const Tensor<T>&, Timestep, Timestep,         \
                                       const NoiseSchedule&, double);                                  \
  template Tensor<T> ddim_invert_step(const Tensor<T>&, const Tensor<T>&, Timestep, Timestep,          \
                                      const NoiseSchedule&);                                           \
  template Tensor<T> ddpm_step(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&,          \
                               const Tensor<T>&);                                                      \
  template double training_loss(const Tensor<T>&, const Tensor<T>&);

MASA_INSTANTIATE_SCHEDULE(float)
MASA_INSTANTIATE_SCHEDULE(double)

#undef MASA_INSTANTIATE_SCHEDULE

}  // namespace masa
