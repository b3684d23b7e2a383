#pragma once

#include <array>
#include <cstdint>

#include "exitnet/config.hpp"

namespace exitnet {

// Closed-form per-sample (batch of one) forward cost, priced with the same
// formulas the tensor kernels charge at runtime, so the totals agree with the
// instrumented counter exactly, not approximately.
//
// cumulative[k] is everything charged by the time exit k+1 can fire under the
// staged schedule: exit 1 needs latent stages 1..3 and feature stages 1..2;
// each later exit adds the stages and pooling it is the first to touch.
struct FlopsProfile {
  std::array<std::uint64_t, 4> latent_stage{};   // x2z + self-attention + mixer
  std::array<std::uint64_t, 4> feature_stage{};  // conv stage + z2x
  std::array<std::uint64_t, 4> exit_head{};      // first-use pooling, logit link, head
  std::array<std::uint64_t, 4> cumulative{};
  std::uint64_t full = 0;  // == cumulative[3]
};

FlopsProfile flops_profile(const ModelConfig& c);

}  // namespace exitnet
