#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vndiff/graph.hpp"

namespace vndiff {

using NamedParameters = std::vector<std::pair<std::string, Parameter<float>*>>;

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Parameters with requires_grad == false, or without an
// accumulated gradient, are never touched. Moments are keyed by name so the
// state can be checkpointed.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  void step(const NamedParameters& params);

  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  std::int64_t steps_taken() const { return steps_; }

  struct State {
    std::int64_t steps = 0;
    std::map<std::string, Tensor<float>> first, second;
  };
  State state() const { return {steps_, first_, second_}; }
  void restore(State s);

 private:
  AdamOptions options_;
  std::int64_t steps_ = 0;
  std::map<std::string, Tensor<float>> first_;
  std::map<std::string, Tensor<float>> second_;
};

// Multiplies every accumulated gradient by `s`.
void scale_gradients(const NamedParameters& params, float s);
void zero_gradients(const NamedParameters& params);

}  // namespace vndiff
