#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <sstream>

#include "exitnet/error.hpp"
#include "exitnet/loss.hpp"
#include "exitnet/optim.hpp"
#include "exitnet/train.hpp"

using namespace exitnet;

namespace {

Dataset small_set(const ModelConfig& c, std::size_t per_class, std::uint64_t seed) {
  Dataset d = make_synthetic(c.num_classes, per_class, c.in_channels, c.image_h,
                             c.image_w, seed);
  standardize(d);
  return d;
}

std::vector<double> snapshot(const Model& m) {
  std::vector<double> v;
  for (const auto& [path, t] : m.parameters()) {
    v.insert(v.end(), t.data(), t.data() + t.numel());
  }
  return v;
}

}  // namespace

TEST_CASE("a zero learning rate leaves every parameter untouched") {
  ModelConfig c = ModelConfig::preset("tiny");
  Model m(c, 90);
  std::vector<double> before = snapshot(m);

  Dataset d = small_set(c, 4, 50);
  TrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 8;
  opt.peak_lr = 0.0;
  opt.warmup_epochs = 0;
  std::vector<EpochRow> rows = train(m, d, d, opt);

  REQUIRE(rows.size() == 1);
  CHECK(snapshot(m) == before);
}

TEST_CASE("one optimizer step lowers the training loss on most seeds") {
  ModelConfig c = ModelConfig::preset("tiny");
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model m(c, 91 + seed);
    Dataset d = small_set(c, 4, 60 + seed);
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    Tensor batch = d.batch(idx);

    LossTerms first = training_loss(full_forward(m, batch), d.labels, 0.5, 0.1);
    AdamW optimizer(m.parameters());
    first.total.backward();
    optimizer.step(1e-2);

    LossTerms second = training_loss(full_forward(m, batch), d.labels, 0.5, 0.1);
    if (second.total.data()[0] < first.total.data()[0]) ++improved;
  }
  CHECK(improved >= 4);
}

TEST_CASE("training is deterministic under a fixed seed") {
  ModelConfig c = ModelConfig::preset("tiny");
  Dataset train_set = small_set(c, 8, 51);
  Dataset eval_set = small_set(c, 4, 52);

  TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 16;
  opt.peak_lr = 1e-3;
  opt.warmup_epochs = 1;
  opt.seed = 12;

  Model a(c, 93);
  Model b(c, 93);
  std::vector<EpochRow> ra = train(a, train_set, eval_set, opt);
  std::vector<EpochRow> rb = train(b, train_set, eval_set, opt);

  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].epoch == i + 1);
    CHECK(ra[i].mean_loss == rb[i].mean_loss);
    CHECK(ra[i].exit_accuracy == rb[i].exit_accuracy);
  }
  CHECK(snapshot(a) == snapshot(b));
}

TEST_CASE("a different shuffle seed changes the trajectory") {
  ModelConfig c = ModelConfig::preset("tiny");
  Dataset train_set = small_set(c, 8, 51);
  Dataset eval_set = small_set(c, 4, 52);

  TrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 16;
  opt.warmup_epochs = 0;
  opt.seed = 12;
  TrainOptions other = opt;
  other.seed = 13;

  Model a(c, 93);
  Model b(c, 93);
  double la = train(a, train_set, eval_set, opt)[0].mean_loss;
  double lb = train(b, train_set, eval_set, other)[0].mean_loss;
  CHECK(la != lb);
}

TEST_CASE("history rows are complete and sane") {
  ModelConfig c = ModelConfig::preset("tiny");
  Dataset train_set = small_set(c, 6, 53);
  Dataset eval_set = small_set(c, 3, 54);

  TrainOptions opt;
  opt.epochs = 3;
  opt.batch_size = 8;
  opt.warmup_epochs = 1;
  Model m(c, 94);
  std::vector<EpochRow> rows = train(m, train_set, eval_set, opt);
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].epoch == i + 1);
    CHECK(std::isfinite(rows[i].mean_loss));
    CHECK(rows[i].mean_loss > 0.0);
    for (double a : rows[i].exit_accuracy) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
    }
  }
}

TEST_CASE("an exit outside the objective still gets its accuracy reported") {
  ModelConfig c = ModelConfig::preset("tiny");
  c.exits = {false, false, false, true};
  Model m(c, 95);
  Dataset train_set = small_set(c, 6, 55);
  Dataset eval_set = small_set(c, 3, 56);

  TrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 8;
  opt.warmup_epochs = 0;
  std::vector<EpochRow> rows = train(m, train_set, eval_set, opt);
  REQUIRE(rows.size() == 1);
  // four columns regardless of which exits take part in training
  for (double a : rows[0].exit_accuracy) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("training rejects inconsistent inputs") {
  ModelConfig c = ModelConfig::preset("tiny");
  Model m(c, 96);
  Dataset d = small_set(c, 3, 57);
  Dataset empty;

  TrainOptions opt;
  opt.epochs = 1;
  CHECK_THROWS_AS(train(m, empty, d, opt), ContractError);
  CHECK_THROWS_AS(train(m, d, empty, opt), ContractError);

  TrainOptions zero_epochs = opt;
  zero_epochs.epochs = 0;
  CHECK_THROWS_AS(train(m, d, d, zero_epochs), ContractError);

  TrainOptions zero_batch = opt;
  zero_batch.batch_size = 0;
  CHECK_THROWS_AS(train(m, d, d, zero_batch), ContractError);

  Dataset mismatched = make_synthetic(3, 2, c.in_channels, c.image_h, c.image_w, 58);
  CHECK_THROWS_AS(train(m, mismatched, mismatched, opt), ContractError);
}

TEST_CASE("per-exit eval accuracies match a hand count") {
  ModelConfig c = ModelConfig::preset("tiny");
  Model m(c, 97);
  Dataset d = small_set(c, 3, 59);

  std::array<double, 4> acc = eval_exit_accuracies(m, d);
  for (std::size_t k = 0; k < 4; ++k) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      StagedForward sf(m, d.image(i));
      if (predictions(sf.logits(k))[0] == d.labels[i]) ++correct;
    }
    CHECK(acc[k] == static_cast<double>(correct) / static_cast<double>(d.size()));
  }
}

TEST_CASE("history files carry one row per epoch") {
  EpochRow r1{1, 2.0797765432109876, {0.25, 0.5, 0.125, 0.75}};
  EpochRow r2{2, 1.5, {0.5, 0.5, 0.25, 1.0}};

  std::ostringstream out;
  write_history(out, {r1, r2});

  std::istringstream in(out.str());
  std::string header, line1, line2;
  REQUIRE(std::getline(in, header));
  CHECK(header == "epoch\tloss\tacc_1\tacc_2\tacc_3\tacc_4");
  REQUIRE(std::getline(in, line1));
  REQUIRE(std::getline(in, line2));

  std::istringstream cells(line1);
  double v[6];
  for (double& x : v) REQUIRE((cells >> x));
  CHECK(v[0] == 1.0);
  CHECK(v[1] == r1.mean_loss);
  CHECK(v[2] == 0.25);
  CHECK(v[5] == 0.75);
}

TEST_CASE("a short run on the shape task actually learns") {
  ModelConfig c = ModelConfig::preset("tiny");
  Model m(c, 98);
  Dataset train_set = small_set(c, 20, 61);  // 80 samples
  Dataset eval_set = small_set(c, 10, 62);

  TrainOptions opt;
  opt.epochs = 8;
  opt.batch_size = 16;
  opt.peak_lr = 3e-3;
  opt.warmup_epochs = 1;
  std::vector<EpochRow> rows = train(m, train_set, eval_set, opt);

  // four classes, so chance is 0.25; the final exit must clearly beat it
  CHECK(rows.back().exit_accuracy[3] > 0.5);
  CHECK(rows.back().mean_loss < rows.front().mean_loss);
}
