#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "exitnet/error.hpp"
#include "exitnet/optim.hpp"

using namespace exitnet;

TEST_CASE("adamw walks a quadratic bowl to its minimum") {
  Tensor p = Tensor::from_data({1}, {-4.0}, true);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt({{"p", p}}, cfg);
  for (int i = 0; i < 1000; ++i) {
    opt.zero_grad();
    Tensor diff = add_scalar(p, -3.0);
    sum_all(mul(diff, diff)).backward();
    opt.step(0.05);
  }
  CHECK(std::fabs(p.data()[0] - 3.0) < 1e-3);
  CHECK(opt.steps() == 1000);
}

TEST_CASE("constant unit gradients move weights by the learning rate") {
  // with g in {+1,-1} each step, bias correction cancels exactly and the
  // update magnitude is lr / (1 + eps)
  Tensor p = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor dir = Tensor::from_data({2}, {1.0, -1.0});
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt({{"p", p}}, cfg);
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    sum_all(mul(p, dir)).backward();
    opt.step(0.1);
  }
  double per_step = 0.1 / (1.0 + 1e-8);
  CHECK(std::fabs(p.data()[0] - (1.0 - 3 * per_step)) < 1e-12);
  CHECK(std::fabs(p.data()[1] - (2.0 + 3 * per_step)) < 1e-12);
}

TEST_CASE("weight decay is decoupled from the gradient") {
  // zero gradient: the adaptive term vanishes and only the decay acts
  Tensor p = Tensor::from_data({2}, {8.0, -2.0}, true);
  AdamW opt({{"p", p}});
  opt.zero_grad();
  opt.step(0.1);
  opt.step(0.1);
  double shrink = (1.0 - 0.1 * 0.05) * (1.0 - 0.1 * 0.05);
  CHECK(std::fabs(p.data()[0] - 8.0 * shrink) < 1e-14);
  CHECK(std::fabs(p.data()[1] + 2.0 * shrink) < 1e-14);
}

TEST_CASE("a non-finite gradient aborts the step and names the parameter") {
  Tensor p = Tensor::from_data({2}, {1.0, 1.0}, true);
  AdamW opt({{"mixer.bias", p}});
  opt.zero_grad();
  p.grad()[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(opt.step(0.1), "gradient for 'mixer.bias' is not finite", NumericalError);
  CHECK(p.data()[0] == 1.0);  // nothing was touched
}

TEST_CASE("optimizer construction validates its inputs") {
  CHECK_THROWS_AS(AdamW({}), ContractError);
  Tensor frozen = Tensor::from_data({1}, {0.0});
  CHECK_THROWS_AS(AdamW({{"frozen", frozen}}), ContractError);
}

TEST_CASE("learning rate schedule ramps then glides") {
  // ramp: starts from zero, hits peak exactly when warmup ends
  CHECK(lr_at(0, 100, 10, 1.0, 0.0) == 0.0);
  CHECK(lr_at(5, 100, 10, 1.0, 0.0) == doctest::Approx(0.5));
  CHECK(lr_at(9, 100, 10, 1.0, 0.0) == doctest::Approx(0.9));
  CHECK(lr_at(10, 100, 10, 1.0, 0.0) == doctest::Approx(1.0));
  // cosine: halfway point sits at the mean of peak and floor
  CHECK(lr_at(55, 100, 10, 1.0, 0.1) == doctest::Approx(0.55));
  // monotone decrease after warmup, never below the floor
  double prev = lr_at(10, 100, 10, 1.0, 0.1);
  for (std::size_t s = 11; s < 100; ++s) {
    double cur = lr_at(s, 100, 10, 1.0, 0.1);
    CHECK(cur <= prev);
    CHECK(cur >= 0.1);
    prev = cur;
  }

  // a frozen schedule is legal: peak 0 keeps every step at 0
  CHECK(lr_at(50, 100, 10, 0.0, 0.0) == 0.0);

  CHECK_THROWS_AS(lr_at(0, 0, 0, 1.0, 0.0), ContractError);
  CHECK_THROWS_AS(lr_at(100, 100, 10, 1.0, 0.0), ContractError);
  CHECK_THROWS_AS(lr_at(0, 100, 100, 1.0, 0.0), ContractError);
  CHECK_THROWS_AS(lr_at(0, 100, 10, 1.0, 2.0), ContractError);
  CHECK_THROWS_AS(lr_at(0, 100, 10, -1.0, 0.0), ContractError);
}
