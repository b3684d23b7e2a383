#pragma once

#include <array>
#include <optional>
#include <vector>

#include "exitnet/model.hpp"
#include "exitnet/tensor.hpp"

namespace exitnet {

// Mean cross entropy over the batch from raw logits [B,K], computed against
// max-subtracted log-sum-exp so huge logits stay finite. With smoothing e the
// target row is (1-e) on the label plus e/K everywhere.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels,
                     double label_smoothing = 0.0);

// Mean KL(teacher || student) over the batch, both sides given as raw logits.
// The teacher is treated as a constant: the graph records only the student
// edge, so no gradient can ever reach the teacher through this term.
Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits);

struct LossTerms {
  Tensor total;
  std::array<std::optional<Tensor>, 4> ce;  // one per enabled exit
  std::array<std::optional<Tensor>, 3> kl;  // one per enabled non-final exit
};

// Joint objective. The final exit trains on the labels alone; every other
// enabled exit k adds alpha * CE_k + (1 - alpha) * KL(final || exit k), with
// the final exit's logits entering those KL terms as constants.
LossTerms training_loss(const ForwardOutputs& out, const std::vector<std::size_t>& labels,
                        double alpha, double label_smoothing);

// Row-wise argmax (ties resolve to the lowest index) and mean top-1 agreement.
std::vector<std::size_t> predictions(const Tensor& logits);
double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels);

}  // namespace exitnet
