#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "exitnet/data.hpp"
#include "exitnet/model.hpp"

namespace exitnet {

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double alpha = 0.5;            // balance between hard labels and distillation
  double label_smoothing = 0.1;  // hard-label terms only
  double peak_lr = 1e-3;
  double floor_lr = 0.0;
  std::size_t warmup_epochs = 2;
  std::uint64_t seed = 0;
};

struct EpochRow {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  std::array<double, 4> exit_accuracy{};  // on the eval split, every exit
};

// Accuracy of each exit head over a dataset, computed in batches. Reports all
// four exits whether or not they are enabled for gating; a head outside the
// training objective simply scores what its untrained logits earn.
std::array<double, 4> eval_exit_accuracies(const Model& m, const Dataset& data);

// Self-distilled training: every enabled early exit learns from the labels
// and from the final exit's soft predictions, the final exit from the labels
// alone. AdamW with a linear-warmup cosine schedule, one seeded shuffle
// stream across epochs. Returns one row per epoch.
std::vector<EpochRow> train(Model& m, const Dataset& train_set, const Dataset& eval_set,
                            const TrainOptions& opt);

// Tab-separated history: epoch, loss, acc_1..acc_4.
void write_history(std::ostream& out, const std::vector<EpochRow>& rows);

}  // namespace exitnet
