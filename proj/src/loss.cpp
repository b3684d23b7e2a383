#include "exitnet/loss.hpp"

#include <algorithm>
#include <cmath>

#include "exitnet/error.hpp"

namespace exitnet {
namespace {

void check_logits(const Tensor& t, const std::vector<std::size_t>& labels, const char* who) {
  const auto& s = t.shape();
  if (s.size() != 2) throw ShapeError(std::string(who) + ": expected [B,K] logits");
  if (labels.size() != s[0])
    throw ContractError(std::string(who) + ": " + std::to_string(labels.size()) +
                        " labels for a batch of " + std::to_string(s[0]));
  for (std::size_t l : labels)
    if (l >= s[1])
      throw ContractError(std::string(who) + ": label " + std::to_string(l) +
                          " out of range for " + std::to_string(s[1]) + " classes");
}

// row-wise softmax probabilities and log-sum-exp, max-subtracted
void row_softmax(const double* x, std::size_t k, double* p, double& lse) {
  double m = x[0];
  for (std::size_t j = 1; j < k; ++j) m = std::max(m, x[j]);
  if (!std::isfinite(m)) throw NumericalError("loss: non-finite logits");
  double sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    p[j] = std::exp(x[j] - m);
    sum += p[j];
  }
  for (std::size_t j = 0; j < k; ++j) p[j] /= sum;
  lse = m + std::log(sum);
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels,
                     double label_smoothing) {
  check_logits(logits, labels, "cross_entropy");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    throw ContractError("cross_entropy: label smoothing must lie in [0,1)");
  const std::size_t B = logits.shape()[0], K = logits.shape()[1];
  const double off = label_smoothing / static_cast<double>(K);
  const double on = 1.0 - label_smoothing + off;

  // loss_row = lse - sum_j t_j x_j since the targets sum to one
  std::vector<double> probs(B * K);
  double total = 0.0;
  const double* x = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    double lse;
    row_softmax(x + b * K, K, probs.data() + b * K, lse);
    double dot = 0.0;
    for (std::size_t j = 0; j < K; ++j)
      dot += (j == labels[b] ? on : off) * x[b * K + j];
    total += lse - dot;
  }
  total /= static_cast<double>(B);
  flopcount::charge(4 * B * K);  // priced at four flops per logit

  std::vector<std::size_t> lab = labels;
  return detail::make_op({1}, {total}, {logits},
                         [B, K, on, off, probs = std::move(probs),
                          lab = std::move(lab)](detail::Node& self) {
                           auto& nl = *self.parents[0];
                           if (!nl.requires_grad) return;
                           nl.ensure_grad();
                           const double g = self.grad[0] / static_cast<double>(B);
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t j = 0; j < K; ++j)
                               nl.grad[b * K + j] +=
                                   g * (probs[b * K + j] - (j == lab[b] ? on : off));
                         });
}

Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.shape().size() != 2)
    throw ShapeError("kl_divergence: student " + shape_str(student_logits.shape()) +
                     " and teacher " + shape_str(teacher_logits.shape()) +
                     " must be matching [B,K] logits");
  const std::size_t B = student_logits.shape()[0], K = student_logits.shape()[1];

  std::vector<double> ps(B * K), pt(B * K);
  double total = 0.0;
  const double* xs = student_logits.data();
  const double* xt = teacher_logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    double lse_s, lse_t;
    row_softmax(xs + b * K, K, ps.data() + b * K, lse_s);
    row_softmax(xt + b * K, K, pt.data() + b * K, lse_t);
    // sum_j pt (log pt - log ps) with both logs taken as logit - lse
    for (std::size_t j = 0; j < K; ++j)
      total += pt[b * K + j] * ((xt[b * K + j] - lse_t) - (xs[b * K + j] - lse_s));
  }
  total /= static_cast<double>(B);
  flopcount::charge(6 * B * K);  // priced at three flops per logit per side

  // only the student is a graph parent; the teacher stays a constant
  return detail::make_op({1}, {total}, {student_logits},
                         [B, K, ps = std::move(ps), pt = std::move(pt)](detail::Node& self) {
                           auto& ns = *self.parents[0];
                           if (!ns.requires_grad) return;
                           ns.ensure_grad();
                           const double g = self.grad[0] / static_cast<double>(B);
                           for (std::size_t i = 0; i < B * K; ++i)
                             ns.grad[i] += g * (ps[i] - pt[i]);
                         });
}

LossTerms training_loss(const ForwardOutputs& out, const std::vector<std::size_t>& labels,
                        double alpha, double label_smoothing) {
  if (alpha < 0.0 || alpha > 1.0) throw ContractError("training_loss: alpha must lie in [0,1]");
  if (!out.logits[3]) throw ContractError("training_loss: the final exit is required");

  LossTerms t;
  const Tensor& teacher = *out.logits[3];
  t.ce[3] = cross_entropy(teacher, labels, label_smoothing);
  Tensor total = *t.ce[3];
  for (std::size_t k = 0; k < 3; ++k) {
    if (!out.logits[k]) continue;
    t.ce[k] = cross_entropy(*out.logits[k], labels, label_smoothing);
    t.kl[k] = kl_divergence(*out.logits[k], teacher);
    total = add(total, add(scale(*t.ce[k], alpha), scale(*t.kl[k], 1.0 - alpha)));
  }
  t.total = total;
  return t;
}

std::vector<std::size_t> predictions(const Tensor& logits) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw ShapeError("predictions: expected [B,K] logits");
  std::vector<std::size_t> out(s[0]);
  const double* x = logits.data();
  for (std::size_t b = 0; b < s[0]; ++b) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < s[1]; ++j)
      if (x[b * s[1] + j] > x[b * s[1] + best]) best = j;
    out[b] = best;
  }
  return out;
}

double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  check_logits(logits, labels, "accuracy");
  std::vector<std::size_t> pred = predictions(logits);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) hits += pred[b] == labels[b];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace exitnet
