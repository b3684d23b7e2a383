#include "exitnet/train.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>

#include "exitnet/error.hpp"
#include "exitnet/loss.hpp"
#include "exitnet/optim.hpp"
#include "exitnet/rng.hpp"

namespace exitnet {

std::array<double, 4> eval_exit_accuracies(const Model& m, const Dataset& data) {
  if (data.size() == 0) throw ContractError("eval: empty dataset");
  std::array<std::size_t, 4> correct{};
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::size_t stop = std::min(start + chunk, data.size());
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    StagedForward sf(m, data.batch(idx));
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<std::size_t> pred = predictions(sf.logits(k));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (pred[i] == data.labels[idx[i]]) ++correct[k];
      }
    }
  }
  std::array<double, 4> acc{};
  for (std::size_t k = 0; k < 4; ++k) {
    acc[k] = static_cast<double>(correct[k]) / static_cast<double>(data.size());
  }
  return acc;
}

std::vector<EpochRow> train(Model& m, const Dataset& train_set, const Dataset& eval_set,
                            const TrainOptions& opt) {
  if (train_set.size() == 0) throw ContractError("train: empty training set");
  if (eval_set.size() == 0) throw ContractError("train: empty eval set");
  if (opt.epochs == 0) throw ContractError("train: need at least one epoch");
  if (opt.batch_size == 0) throw ContractError("train: zero batch size");
  if (train_set.num_classes != m.config().num_classes) {
    throw ContractError("train: dataset has " + std::to_string(train_set.num_classes) +
                        " classes but the model expects " +
                        std::to_string(m.config().num_classes));
  }

  const std::size_t n = train_set.size();
  const std::size_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_steps = opt.epochs * steps_per_epoch;
  const std::size_t warmup_steps = opt.warmup_epochs * steps_per_epoch;

  AdamW optimizer(m.parameters());
  Rng shuffle_rng(derive_seed(opt.seed, "shuffle"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochRow> history;
  history.reserve(opt.epochs);
  std::size_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;

    for (std::size_t start = 0; start < n; start += opt.batch_size) {
      std::size_t stop = std::min(start + opt.batch_size, n);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::vector<std::size_t> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = train_set.labels[idx[i]];

      ForwardOutputs out = full_forward(m, train_set.batch(idx));
      LossTerms terms = training_loss(out, labels, opt.alpha, opt.label_smoothing);
      loss_sum += terms.total.data()[0];

      optimizer.zero_grad();
      terms.total.backward();
      optimizer.step(
          lr_at(global_step, total_steps, warmup_steps, opt.peak_lr, opt.floor_lr));
      ++global_step;
    }

    EpochRow row;
    row.epoch = epoch;
    row.mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
    row.exit_accuracy = eval_exit_accuracies(m, eval_set);
    history.push_back(row);
  }
  return history;
}

void write_history(std::ostream& out, const std::vector<EpochRow>& rows) {
  out << "epoch\tloss\tacc_1\tacc_2\tacc_3\tacc_4\n";
  out << std::setprecision(17);
  for (const EpochRow& r : rows) {
    out << r.epoch << '\t' << r.mean_loss;
    for (double a : r.exit_accuracy) out << '\t' << a;
    out << '\n';
  }
}

}  // namespace exitnet
