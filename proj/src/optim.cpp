#include "exitnet/optim.hpp"

#include <cmath>

#include "exitnet/error.hpp"

namespace exitnet {

AdamW::AdamW(ParamList params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (params_.empty()) throw ContractError("AdamW: no parameters");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [path, t] : params_) {
    if (!t.requires_grad()) throw ContractError("AdamW: '" + path + "' does not require grad");
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  for (const auto& [path, t] : params_) {
    const auto& g = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NumericalError("gradient for '" + path + "' is not finite");
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p].second;
    const auto& g = t.grad();
    double* w = t.data();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double gi = i < g.size() ? g[i] : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      w[i] -= lr * (update + cfg_.weight_decay * w[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [path, t] : params_) t.zero_grad();
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak,
             double floor_lr) {
  if (total_steps == 0) throw ContractError("lr_at: zero total steps");
  if (step >= total_steps) throw ContractError("lr_at: step past the end of the schedule");
  if (warmup_steps >= total_steps) throw ContractError("lr_at: warmup swallows the schedule");
  if (peak < 0.0 || floor_lr < 0.0 || floor_lr > peak)
    throw ContractError("lr_at: need 0 <= floor <= peak");

  if (step < warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  double progress = static_cast<double>(step - warmup_steps) /
                    static_cast<double>(total_steps - warmup_steps);
  return floor_lr + 0.5 * (peak - floor_lr) * (1.0 + std::cos(progress * 3.14159265358979323846));
}

}  // namespace exitnet
