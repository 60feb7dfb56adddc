#pragma once

#include <functional>
#include <span>
#include <vector>

#include "vndiff/graph.hpp"
#include "vndiff/rng.hpp"

namespace vndiff {

// Variance schedule over steps t = 1..T. Accessors take the 1-based step
// index; alpha_bar(0) is defined as 1.
//
// A schedule may be a strided subset of a longer one. In that case the step
// index counts entries of the subset, the derived arrays are re-indexed from
// consecutive alpha_bar ratios, and timestep(t) returns the original step the
// noise model was trained on.
class NoiseSchedule {
 public:
  // beta_t = beta_start + (t - 1) (beta_end - beta_start) / (T - 1).
  static NoiseSchedule linear(int steps, double beta_start, double beta_end);
  // Builds a schedule from a strictly decreasing alpha_bar sequence.
  // `timesteps` are the model timesteps attached to each entry.
  static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar, std::vector<int> timesteps);

  // Keeps steps T, T - k, T - 2k, ... down to the smallest positive step.
  NoiseSchedule strided(int stride) const;

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_[idx(t)]; }
  double alpha(int t) const { return alpha_[idx(t)]; }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_[idx(t)]; }
  double sigma(int t) const { return sigma_[idx(t)]; }
  int timestep(int t) const { return timesteps_[idx(t)]; }

  std::span<const double> betas() const { return beta_; }
  std::span<const double> alphas() const { return alpha_; }
  std::span<const double> alpha_bars() const { return alpha_bar_; }
  std::span<const double> sigmas() const { return sigma_; }

 private:
  NoiseSchedule() = default;
  std::size_t idx(int t) const;
  void derive_from_alpha_bar();

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_;
  std::vector<int> timesteps_;
};

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename Real>
Tensor<Real> forward_sample(const Tensor<Real>& x0, int t, const Tensor<Real>& eps,
                            const NoiseSchedule& sched);

// One draw from N(sqrt(1 - beta_t) x_prev, beta_t I).
template <typename Real>
Tensor<Real> forward_step(const Tensor<Real>& x_prev, int t, const NoiseSchedule& sched, Rng& rng);

// (x_t - beta_t / sqrt(1 - abar_t) eps_pred) / sqrt(alpha_t) + sigma_t z.
// z must be all zeros at t = 1.
template <typename Real>
Tensor<Real> reverse_step(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t,
                          const NoiseSchedule& sched, const Tensor<Real>& z);
// Posterior mean only (z = 0).
template <typename Real>
Tensor<Real> reverse_step(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t,
                          const NoiseSchedule& sched);

// (x_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t).
template <typename Real>
Tensor<Real> predict_x0(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t,
                        const NoiseSchedule& sched);

template <typename Real>
Tensor<Real> gaussian_like(const Shape& shape, Rng& rng);

// A differentiable noise model evaluated on a graph. Conditioning inputs, if
// any, are bound inside the callable.
template <typename Real>
using ScoreFn = std::function<Var(Graph<Real>& g, Var x_t, int timestep)>;

// Epsilon-matching objective mean((net(x_t, t) - eps)^2) with
// x_t = forward_sample(x0, t, eps). Runs backward, leaving d(loss)/d(param)
// accumulated in every trainable parameter reachable from `net`.
template <typename Real>
double training_loss(const ScoreFn<Real>& net, const Tensor<Real>& x0, int t, const Tensor<Real>& eps,
                     const NoiseSchedule& sched);

// Gradient-free noise model used by the sampler.
using EpsModel = std::function<Tensor<float>(const Tensor<float>& x_t, int timestep)>;

// Optional hook that rewrites the predicted noise before each reverse step.
// Called with (eps, x_t, schedule step index).
using EpsCorrection = std::function<void(Tensor<float>& eps, const Tensor<float>& x_t, int t)>;

// Ancestral sampling: x_T ~ N(0, I), then reverse_step for t = T..1 with
// fresh z at every step except the last.
Tensor<float> sample(const EpsModel& model, const Shape& shape, const NoiseSchedule& sched, Rng& rng,
                     const EpsCorrection& correction = {});
// Same chain started from a caller-supplied x_T.
Tensor<float> sample_from(const EpsModel& model, Tensor<float> x, const NoiseSchedule& sched, Rng& rng,
                          const EpsCorrection& correction = {});

}  // namespace vndiff
