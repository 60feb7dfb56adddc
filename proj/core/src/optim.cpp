#include "vndiff/optim.hpp"

#include <cmath>

namespace vndiff {

void Adam::step(const NamedParameters& params) {
  ++steps_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  const float b1 = static_cast<float>(options_.beta1);
  const float b2 = static_cast<float>(options_.beta2);
  for (const auto& [name, p] : params) {
    if (!p->requires_grad || p->grad.empty()) continue;
    auto [mit, fresh_m] = first_.try_emplace(name, p->value.shape());
    auto [vit, fresh_v] = second_.try_emplace(name, p->value.shape());
    Tensor<float>& m = mit->second;
    Tensor<float>& v = vit->second;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const float g = p->grad[i];
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p->value[i] -= static_cast<float>(options_.lr * mhat / (std::sqrt(vhat) + options_.eps));
    }
  }
}

void Adam::restore(State s) {
  steps_ = s.steps;
  first_ = std::move(s.first);
  second_ = std::move(s.second);
}

void scale_gradients(const NamedParameters& params, float s) {
  for (const auto& [_, p] : params) {
    if (!p->grad.empty()) p->grad *= s;
  }
}

void zero_gradients(const NamedParameters& params) {
  for (const auto& [_, p] : params) p->zero_grad();
}

}  // namespace vndiff
