#include "exitnet/exit_engine.hpp"

#include <cmath>
#include <iomanip>
#include <string>

#include "exitnet/error.hpp"
#include "exitnet/loss.hpp"

namespace exitnet {

void ExitPolicy::validate() const {
  for (std::size_t k = 0; k < 4; ++k) {
    if (!std::isfinite(thresholds[k]) || thresholds[k] < 0.0) {
      throw ContractError("exit policy: threshold " + std::to_string(k + 1) +
                          " must be finite and non-negative");
    }
  }
  if (thresholds[3] != 0.0) {
    throw ContractError("exit policy: the final threshold must be zero");
  }
}

namespace {

double max_softmax(const double* x, std::size_t k) {
  double m = x[0];
  for (std::size_t j = 0; j < k; ++j) {
    if (!std::isfinite(x[j])) throw NumericalError("confidence: non-finite logits");
    m = std::max(m, x[j]);
  }
  double denom = 0.0;
  for (std::size_t j = 0; j < k; ++j) denom += std::exp(x[j] - m);
  return 1.0 / denom;
}

}  // namespace

double confidence(const Tensor& logits) {
  if (logits.numel() == 0) throw ContractError("confidence: empty logits");
  return max_softmax(logits.data(), logits.numel());
}

std::vector<double> row_confidences(const Tensor& logits) {
  if (logits.shape().size() != 2) {
    throw ShapeError("row_confidences: expected [batch, classes], got " +
                     shape_str(logits.shape()));
  }
  std::size_t b = logits.shape()[0], k = logits.shape()[1];
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i] = max_softmax(logits.data() + i * k, k);
  }
  return out;
}

ExitTrace infer(const Model& m, const Tensor& image, const ExitPolicy& policy,
                const FlopsProfile& prof) {
  policy.validate();
  StagedForward sf(m, image);
  const auto& exits = m.config().exits;
  ExitTrace trace;
  for (std::size_t k = 0; k < 4; ++k) {
    bool last = (k == 3);
    if (!last && !exits[k]) continue;
    const Tensor& lg = sf.logits(k);
    double c = confidence(lg);
    trace.confidences.emplace_back(static_cast<int>(k) + 1, c);
    if (last || c >= policy.thresholds[k]) {
      trace.exit_taken = static_cast<int>(k) + 1;
      trace.flops_used = prof.cumulative[k];
      trace.prediction = predictions(lg)[0];
      return trace;
    }
  }
  throw ContractError("infer: no exit fired");  // unreachable, final gate is 0
}

EvalSummary batch_evaluate(const Model& m, const Dataset& data,
                           const ExitPolicy& policy, const FlopsProfile& prof,
                           std::ostream* trace_out) {
  if (data.size() == 0) throw ContractError("batch_evaluate: empty dataset");
  policy.validate();

  if (trace_out) {
    *trace_out << "sample\texit\tconf_1\tconf_2\tconf_3\tconf_4\tflops\n";
  }

  EvalSummary s;
  std::size_t correct = 0;
  double flops_sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ExitTrace t = infer(m, data.image(i), policy, prof);
    if (t.prediction == data.labels[i]) ++correct;
    flops_sum += static_cast<double>(t.flops_used);
    s.exit_histogram[static_cast<std::size_t>(t.exit_taken) - 1] += 1;
    if (trace_out) {
      std::array<double, 4> conf{};
      std::array<bool, 4> seen{};
      for (const auto& [idx, c] : t.confidences) {
        conf[static_cast<std::size_t>(idx) - 1] = c;
        seen[static_cast<std::size_t>(idx) - 1] = true;
      }
      *trace_out << i << '\t' << t.exit_taken;
      for (std::size_t k = 0; k < 4; ++k) {
        *trace_out << '\t';
        if (seen[k]) *trace_out << std::setprecision(17) << conf[k];
      }
      *trace_out << '\t' << t.flops_used << '\n';
    }
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  s.mean_flops = flops_sum / static_cast<double>(data.size());
  return s;
}

}  // namespace exitnet
