#pragma once

#include <cstddef>
#include <vector>

#include "exitnet/layers.hpp"
#include "exitnet/tensor.hpp"

namespace exitnet {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;  // decoupled: applied to the weights, not the gradient
};

class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig cfg = {});

  // applies one update from the accumulated gradients; a non-finite gradient
  // aborts with the parameter's path before any weight is touched
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  ParamList params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Per-step schedule: linear ramp to peak over the first warmup_steps, then a
// cosine glide from peak down to floor across the remaining steps.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak,
             double floor_lr);

}  // namespace exitnet
