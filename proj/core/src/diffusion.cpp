#include "vndiff/diffusion.hpp"

#include <cmath>
#include <string>

#include "vndiff/error.hpp"

namespace vndiff {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ParameterError("noise schedule needs at least one step");
  if (!std::isfinite(beta_start) || !std::isfinite(beta_end) || beta_start <= 0.0 ||
      beta_end >= 1.0 || beta_start > beta_end) {
    throw ParameterError("noise schedule endpoints must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.beta_.resize(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    s.beta_[static_cast<std::size_t>(t - 1)] =
        steps == 1 ? beta_start : beta_start + (t - 1) * (beta_end - beta_start) / (steps - 1);
  }
  s.alpha_.resize(s.beta_.size());
  s.alpha_bar_.resize(s.beta_.size());
  s.sigma_.resize(s.beta_.size());
  s.timesteps_.resize(s.beta_.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < s.beta_.size(); ++i) {
    s.alpha_[i] = 1.0 - s.beta_[i];
    prod *= s.alpha_[i];
    s.alpha_bar_[i] = prod;
    s.sigma_[i] = std::sqrt(s.beta_[i]);
    s.timesteps_[i] = static_cast<int>(i) + 1;
  }
  return s;
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar, std::vector<int> timesteps) {
  if (alpha_bar.empty() || alpha_bar.size() != timesteps.size()) {
    throw ParameterError("from_alpha_bar: need matching non-empty alpha_bar and timesteps");
  }
  double prev = 1.0;
  for (double a : alpha_bar) {
    if (!(a > 0.0 && a < prev)) throw ParameterError("from_alpha_bar: alpha_bar must decrease strictly in (0, 1)");
    prev = a;
  }
  NoiseSchedule s;
  s.alpha_bar_ = std::move(alpha_bar);
  s.timesteps_ = std::move(timesteps);
  s.derive_from_alpha_bar();
  return s;
}

void NoiseSchedule::derive_from_alpha_bar() {
  const std::size_t n = alpha_bar_.size();
  alpha_.resize(n);
  beta_.resize(n);
  sigma_.resize(n);
  double prev = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    alpha_[i] = alpha_bar_[i] / prev;
    beta_[i] = 1.0 - alpha_[i];
    sigma_[i] = std::sqrt(beta_[i]);
    prev = alpha_bar_[i];
  }
}

NoiseSchedule NoiseSchedule::strided(int stride) const {
  if (stride < 1) throw ParameterError("schedule stride must be >= 1");
  if (stride == 1) return *this;
  std::vector<double> abar;
  std::vector<int> ts;
  for (int t = steps() % stride == 0 ? stride : steps() % stride; t <= steps(); t += stride) {
    abar.push_back(alpha_bar(t));
    ts.push_back(timestep(t));
  }
  return from_alpha_bar(std::move(abar), std::move(ts));
}

std::size_t NoiseSchedule::idx(int t) const {
  if (t < 1 || t > steps()) {
    throw ParameterError("step index " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

template <typename Real>
Tensor<Real> forward_sample(const Tensor<Real>& x0, int t, const Tensor<Real>& eps,
                            const NoiseSchedule& sched) {
  require_same_shape(x0.shape(), eps.shape(), "forward_sample");
  if (t < 1 || t > sched.steps()) throw ParameterError("forward_sample: step " + std::to_string(t) + " outside [1, T]");
  const Real a = static_cast<Real>(std::sqrt(sched.alpha_bar(t)));
  const Real b = static_cast<Real>(std::sqrt(1.0 - sched.alpha_bar(t)));
  Tensor<Real> out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

template <typename Real>
Tensor<Real> forward_step(const Tensor<Real>& x_prev, int t, const NoiseSchedule& sched, Rng& rng) {
  const Real keep = static_cast<Real>(std::sqrt(1.0 - sched.beta(t)));
  const Real noise = static_cast<Real>(std::sqrt(sched.beta(t)));
  Tensor<Real> out(x_prev.shape());
  for (std::size_t i = 0; i < x_prev.size(); ++i) {
    out[i] = keep * x_prev[i] + noise * static_cast<Real>(rng.normal());
  }
  return out;
}

template <typename Real>
Tensor<Real> reverse_step(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t,
                          const NoiseSchedule& sched) {
  require_same_shape(x_t.shape(), eps_pred.shape(), "reverse_step");
  const Real inv_sqrt_alpha = static_cast<Real>(1.0 / std::sqrt(sched.alpha(t)));
  const Real coef = static_cast<Real>(sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t)));
  Tensor<Real> out(x_t.shape());
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_pred[i]);
  return out;
}

template <typename Real>
Tensor<Real> reverse_step(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t,
                          const NoiseSchedule& sched, const Tensor<Real>& z) {
  require_same_shape(x_t.shape(), z.shape(), "reverse_step noise");
  if (t == 1) {
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] != Real(0)) throw ContractViolation("reverse_step: noise must be zero at the final step t = 1");
    }
  }
  Tensor<Real> out = reverse_step(x_t, eps_pred, t, sched);
  const Real s = static_cast<Real>(sched.sigma(t));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * z[i];
  return out;
}

template <typename Real>
Tensor<Real> predict_x0(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t,
                        const NoiseSchedule& sched) {
  require_same_shape(x_t.shape(), eps_pred.shape(), "predict_x0");
  const double abar = sched.alpha_bar(t);
  if (!(abar > 0.0)) throw NumericError("predict_x0: alpha_bar is zero at step " + std::to_string(t));
  const Real inv = static_cast<Real>(1.0 / std::sqrt(abar));
  const Real b = static_cast<Real>(std::sqrt(1.0 - abar));
  Tensor<Real> out(x_t.shape());
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = (x_t[i] - b * eps_pred[i]) * inv;
  return out;
}

template <typename Real>
Tensor<Real> gaussian_like(const Shape& shape, Rng& rng) {
  Tensor<Real> out(shape);
  for (auto& v : out.values()) v = static_cast<Real>(rng.normal());
  return out;
}

template <typename Real>
double training_loss(const ScoreFn<Real>& net, const Tensor<Real>& x0, int t, const Tensor<Real>& eps,
                     const NoiseSchedule& sched) {
  Graph<Real> g;
  Var x_t = g.constant(forward_sample(x0, t, eps, sched));
  Var pred = net(g, x_t, sched.timestep(t));
  Var loss = g.mse(pred, eps);
  g.backward(loss);
  return static_cast<double>(g.value(loss)[0]);
}

Tensor<float> sample(const EpsModel& model, const Shape& shape, const NoiseSchedule& sched, Rng& rng,
                     const EpsCorrection& correction) {
  return sample_from(model, gaussian_like<float>(shape, rng), sched, rng, correction);
}

Tensor<float> sample_from(const EpsModel& model, Tensor<float> x, const NoiseSchedule& sched, Rng& rng,
                          const EpsCorrection& correction) {
  const Shape shape = x.shape();
  for (int t = sched.steps(); t >= 1; --t) {
    Tensor<float> eps = model(x, sched.timestep(t));
    require_same_shape(eps.shape(), shape, "sample: noise model output");
    if (correction) correction(eps, x, t);
    if (t > 1) {
      x = reverse_step(x, eps, t, sched, gaussian_like<float>(shape, rng));
    } else {
      x = reverse_step(x, eps, t, sched);
    }
  }
  return x;
}

#define VNDIFF_INSTANTIATE(Real)                                                                    \
  template Tensor<Real> forward_sample(const Tensor<Real>&, int, const Tensor<Real>&,                \
                                       const NoiseSchedule&);                                        \
  template Tensor<Real> forward_step(const Tensor<Real>&, int, const NoiseSchedule&, Rng&);          \
  template Tensor<Real> reverse_step(const Tensor<Real>&, const Tensor<Real>&, int,                  \
                                     const NoiseSchedule&, const Tensor<Real>&);                     \
  template Tensor<Real> reverse_step(const Tensor<Real>&, const Tensor<Real>&, int,                  \
                                     const NoiseSchedule&);                                          \
  template Tensor<Real> predict_x0(const Tensor<Real>&, const Tensor<Real>&, int,                    \
                                   const NoiseSchedule&);                                            \
  template Tensor<Real> gaussian_like<Real>(const Shape&, Rng&);                                     \
  template double training_loss(const ScoreFn<Real>&, const Tensor<Real>&, int, const Tensor<Real>&, \
                                const NoiseSchedule&);

VNDIFF_INSTANTIATE(float)
VNDIFF_INSTANTIATE(double)
#undef VNDIFF_INSTANTIATE

}  // namespace vndiff
