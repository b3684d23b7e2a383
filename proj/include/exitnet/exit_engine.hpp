#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <vector>

#include "exitnet/data.hpp"
#include "exitnet/flops.hpp"
#include "exitnet/model.hpp"

namespace exitnet {

// Per-exit confidence gates. A sample stops at the first enabled exit whose
// confidence reaches the gate. thresholds[3] must be 0 so the final exit
// always fires; gates above 1 are legal and make an exit unreachable.
struct ExitPolicy {
  std::array<double, 4> thresholds{1.01, 1.01, 1.01, 0.0};

  void validate() const;
};

// One gated inference. exit_taken is 1-based, matching trace files and the
// curve output. confidences holds (exit index, value) only for exits whose
// gate was actually consulted; exits disabled in the model config never
// appear even though their logits may have been computed for the chain.
struct ExitTrace {
  int exit_taken = 0;
  std::vector<std::pair<int, double>> confidences;
  std::uint64_t flops_used = 0;
  std::size_t prediction = 0;
};

struct EvalSummary {
  double accuracy = 0.0;
  double mean_flops = 0.0;
  std::array<std::int64_t, 4> exit_histogram{};
};

// Max softmax probability of one logits row.
double confidence(const Tensor& logits);

// Confidence of every row of a [B, K] logits tensor. Row b equals
// confidence() of that sample's own forward pass bitwise.
std::vector<double> row_confidences(const Tensor& logits);

ExitTrace infer(const Model& m, const Tensor& image, const ExitPolicy& policy,
                const FlopsProfile& prof);

// Runs infer over the whole set. When trace_out is given, writes one
// tab-separated line per sample: sample, exit, conf_1..conf_4, flops, with
// confidence cells left empty for exits that were never consulted.
EvalSummary batch_evaluate(const Model& m, const Dataset& data,
                           const ExitPolicy& policy, const FlopsProfile& prof,
                           std::ostream* trace_out = nullptr);

}  // namespace exitnet
