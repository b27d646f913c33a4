#pragma once

#include <span>
#include <string>
#include <vector>

#include "masa/tensor.hpp"

namespace masa {

enum class BetaKind { linear, scaled_linear };

std::string to_string(BetaKind kind);
BetaKind beta_kind_from_string(const std::string& s);

// A timestep index into the schedule tables, or the clean-data boundary where
// alpha_bar is exactly 1. The boundary orders before every real index.
class Timestep {
 public:
  constexpr explicit Timestep(int index) : index_(index) {}
  static constexpr Timestep boundary() { return Timestep(kBoundaryIndex, 0); }

  [[nodiscard]] constexpr bool is_boundary() const { return index_ == kBoundaryIndex; }
  [[nodiscard]] int index() const;
  // Timestep fed to the network; the boundary is evaluated as timestep 0.
  [[nodiscard]] constexpr int network_index() const { return is_boundary() ? 0 : index_; }

  friend constexpr bool operator==(Timestep, Timestep) = default;
  friend constexpr bool operator<(Timestep a, Timestep b) { return a.index_ < b.index_; }

 private:
  static constexpr int kBoundaryIndex = -1;
  constexpr Timestep(int index, int) : index_(index) {}
  int index_;
};

// Final denoise target (alpha_bar = 1) for ddim_step.
inline constexpr Timestep kFinalTimestep = Timestep::boundary();
// Starting point of inversion from a clean image (alpha_bar = 1).
inline constexpr Timestep kInitialTimestep = Timestep::boundary();

struct ScheduleParams {
  int num_timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  BetaKind kind = BetaKind::linear;
  friend bool operator==(const ScheduleParams&, const ScheduleParams&) = default;
};

class NoiseSchedule {
 public:
  static NoiseSchedule make(int num_timesteps, double beta_start, double beta_end, BetaKind kind);
  static NoiseSchedule make(const ScheduleParams& p) {
    return make(p.num_timesteps, p.beta_start, p.beta_end, p.kind);
  }

  [[nodiscard]] int num_timesteps() const { return static_cast<int>(betas_.size()); }
  [[nodiscard]] std::span<const double> betas() const { return betas_; }
  [[nodiscard]] std::span<const double> alphas() const { return alphas_; }
  [[nodiscard]] std::span<const double> alpha_bars() const { return alpha_bars_; }
  [[nodiscard]] const ScheduleParams& params() const { return params_; }

  [[nodiscard]] double alpha_bar(Timestep t) const;
  void check_index(int t) const;

 private:
  ScheduleParams params_;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

// Descending sampling timesteps t_k = floor(k * T / steps), largest first.
std::vector<int> sampling_timesteps(int num_timesteps, int steps);

// sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched);

// (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)
template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Timestep t,
                     const NoiseSchedule& sched);

// Deterministic (eta = 0) DDIM update from t to t_prev < t.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Timestep t, Timestep t_prev,
                    const NoiseSchedule& sched);

// ddim_step with the predicted x0 clamped to [-clip, clip]; the noise term is
// re-derived from the clamped x0 before re-noising.
template <typename T>
Tensor<T> ddim_step_clipped(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Timestep t, Timestep t_prev,
                            const NoiseSchedule& sched, double clip);

// Mirror of ddim_step, moving from t to t_next > t.
template <typename T>
Tensor<T> ddim_invert_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Timestep t, Timestep t_next,
                           const NoiseSchedule& sched);

// Ancestral step mu + sqrt(beta_t) * noise; at t = 0 the noise term is dropped.
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, int t, const NoiseSchedule& sched,
                    const Tensor<T>& noise);

// Mean squared error over all elements.
template <typename T>
double training_loss(const Tensor<T>& eps_true, const Tensor<T>& eps_pred);

}  // namespace masa
