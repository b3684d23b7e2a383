#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "exitnet/error.hpp"
#include "exitnet/layers.hpp"
#include "exitnet/rng.hpp"
#include "exitnet/tensor.hpp"

using namespace exitnet;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, bool rg = true) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.normal();
  return Tensor::from_data(std::move(shape), std::move(d), rg);
}

// Plain-loop attention used as the reference implementation.
std::vector<double> attention_ref(const std::vector<double>& q, const std::vector<double>& k,
                                  const std::vector<double>& v, std::size_t B, std::size_t Lq,
                                  std::size_t Lk, std::size_t D, std::size_t heads,
                                  const std::vector<double>* rpb) {
  std::size_t dh = D / heads;
  double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(B * Lq * D, 0.0);
  std::vector<double> scores(Lk);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < Lq; ++i) {
        for (std::size_t t = 0; t < Lk; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < dh; ++j)
            acc += q[(b * Lq + i) * D + h * dh + j] * k[(b * Lk + t) * D + h * dh + j];
          scores[t] = acc * sc + (rpb ? (*rpb)[t] : 0.0);
        }
        double m = scores[0];
        for (std::size_t t = 1; t < Lk; ++t) m = std::max(m, scores[t]);
        double s = 0.0;
        for (std::size_t t = 0; t < Lk; ++t) {
          scores[t] = std::exp(scores[t] - m);
          s += scores[t];
        }
        for (std::size_t t = 0; t < Lk; ++t) scores[t] /= s;
        for (std::size_t t = 0; t < Lk; ++t)
          for (std::size_t j = 0; j < dh; ++j)
            out[(b * Lq + i) * D + h * dh + j] += scores[t] * v[(b * Lk + t) * D + h * dh + j];
      }
  return out;
}

std::vector<double> values(const Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.numel());
}

// Finite differences need gradients well away from zero; the 0.02-std init sits
// close to the uniform-attention saddle where q/k grads drown in rounding noise.
void rerandomize(ParamList& ps, Rng& rng) {
  for (auto& [n, t] : ps)
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-0.5, 0.5);
}

double fd_check_all(const std::function<Tensor()>& f, const ParamList& ps) {
  double worst = 0.0;
  for (const auto& [name, t] : ps) worst = std::max(worst, gradient_check(f, {t}, 1e-4));
  return worst;
}

}  // namespace

TEST_CASE("scaled_attention matches the reference for one and many heads") {
  Rng rng(101);
  for (std::size_t heads : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
    std::size_t B = 2, Lq = 3, Lk = 5, D = 8;
    auto q = random_tensor({B, Lq, D}, rng, false);
    auto k = random_tensor({B, Lk, D}, rng, false);
    auto v = random_tensor({B, Lk, D}, rng, false);
    auto out = scaled_attention(q, k, v, heads);
    auto ref = attention_ref(values(q), values(k), values(v), B, Lq, Lk, D, heads, nullptr);
    REQUIRE(out.shape() == std::vector<std::size_t>{B, Lq, D});
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(out.at(i) == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("scaled_attention adds the per-key bias to every query row") {
  Rng rng(102);
  std::size_t B = 1, Lq = 4, Lk = 4, D = 6;
  auto q = random_tensor({B, Lq, D}, rng, false);
  auto k = random_tensor({B, Lk, D}, rng, false);
  auto v = random_tensor({B, Lk, D}, rng, false);
  std::vector<double> bias = {0.5, -1.0, 2.0, 0.0};
  auto rpb = Tensor::from_data({1, Lk}, bias);
  auto out = scaled_attention(q, k, v, 1, &rpb);
  auto ref = attention_ref(values(q), values(k), values(v), B, Lq, Lk, D, 1, &bias);
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(out.at(i) == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("scaled_attention validates head and shape consistency") {
  Rng rng(103);
  auto q = random_tensor({1, 2, 6}, rng, false);
  auto k = random_tensor({1, 3, 6}, rng, false);
  CHECK_THROWS_AS(scaled_attention(q, k, k, 4), ShapeError);
  CHECK_THROWS_AS(scaled_attention(q, k, k, 0), ShapeError);
  auto kbad = random_tensor({1, 3, 4}, rng, false);
  CHECK_THROWS_AS(scaled_attention(q, kbad, kbad, 2), ShapeError);
}

TEST_CASE("scaled_attention gradients pass finite differences") {
  Rng rng(104);
  auto q = random_tensor({1, 2, 4}, rng);
  auto k = random_tensor({1, 3, 4}, rng);
  auto v = random_tensor({1, 3, 4}, rng);
  auto rpb = random_tensor({1, 3}, rng);
  auto dens = random_tensor({1, 2, 4}, rng, false);
  auto f = [&] {
    Tensor* r = &rpb;
    return sum_all(mul(scaled_attention(q, k, v, 2, r), dens));
  };
  CHECK(gradient_check(f, {q, k, v, rpb}, 1e-5) < 1e-6);
}

TEST_CASE("transformer block keeps token shape and differentiates cleanly") {
  TransformerBlock blk(7, "blk", 6, 2, 2);
  Rng rng(105);
  auto z = random_tensor({2, 4, 6}, rng);
  auto out = blk.forward(z);
  REQUIRE(out.shape() == std::vector<std::size_t>{2, 4, 6});

  ParamList ps;
  blk.collect(ps);
  // 2 layer norms x2, 5 biased linears x2, bias-free wk x1
  CHECK(ps.size() == 15);

  rerandomize(ps, rng);
  auto dens = random_tensor({2, 4, 6}, rng, false);
  auto f = [&] { return sum_all(mul(blk.forward(z), dens)); };
  CHECK(fd_check_all(f, ps) < 1e-6);
  CHECK(gradient_check(f, {z}, 1e-4) < 1e-6);

  CHECK_THROWS_AS(TransformerBlock(7, "bad", 6, 4, 2), ShapeError);
}

TEST_CASE("feature-to-latent attention is an exact identity on zero features") {
  CrossAttentionX2Z x2z(9, "x2z", 3, 8, 2);
  Rng rng(106);
  auto z = random_tensor({2, 4, 8}, rng, false);
  auto x = Tensor::zeros({2, 3, 6, 6});
  auto out = x2z.forward(z, x);
  REQUIRE(out.shape() == z.shape());
  // fresh layers have zero biases, so zero features contribute exactly nothing
  for (std::size_t i = 0; i < z.numel(); ++i) CHECK(out.at(i) == z.at(i));
}

TEST_CASE("feature-to-latent attention responds to features and differentiates") {
  CrossAttentionX2Z x2z(9, "x2z", 3, 8, 2);
  Rng rng(107);
  auto z = random_tensor({1, 4, 8}, rng);
  auto x = random_tensor({1, 3, 6, 6}, rng);
  auto out = x2z.forward(z, x);
  double delta = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) delta += std::fabs(out.at(i) - z.at(i));
  CHECK(delta > 1e-6);

  ParamList ps;
  x2z.collect(ps);
  rerandomize(ps, rng);
  auto dens = random_tensor({1, 4, 8}, rng, false);
  auto f = [&] { return sum_all(mul(x2z.forward(z, x), dens)); };
  CHECK(fd_check_all(f, ps) < 1e-6);
  CHECK(gradient_check(f, {z, x}, 1e-4) < 1e-6);
}

TEST_CASE("latent-to-feature attention is an exact identity on zero latents") {
  CrossAttentionZ2X z2x(11, "z2x", 4);
  Rng rng(108);
  auto x = random_tensor({2, 4, 3, 3}, rng, false);
  auto z = Tensor::zeros({2, 5, 4});
  auto out = z2x.forward(x, z);
  REQUIRE(out.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.at(i) == x.at(i));
}

TEST_CASE("latent-to-feature attention updates features and differentiates") {
  CrossAttentionZ2X z2x(11, "z2x", 4);
  Rng rng(109);
  auto x = random_tensor({1, 4, 3, 3}, rng);
  auto z = random_tensor({1, 5, 4}, rng);
  auto out = z2x.forward(x, z);
  REQUIRE(out.shape() == x.shape());

  ParamList ps;
  z2x.collect(ps);
  rerandomize(ps, rng);
  auto dens = random_tensor({1, 4, 3, 3}, rng, false);
  auto f = [&] { return sum_all(mul(z2x.forward(x, z), dens)); };
  CHECK(fd_check_all(f, ps) < 1e-6);
  CHECK(gradient_check(f, {x, z}, 1e-4) < 1e-6);

  auto zbad = random_tensor({1, 5, 3}, rng, false);
  CHECK_THROWS_AS(z2x.forward(x.detach(), zbad), ShapeError);
}

TEST_CASE("token mixer resamples tokens then channels, in that order") {
  TokenMixer mix(13, "mix", 4, 2, 3, 5);
  Rng rng(110);
  auto z = random_tensor({2, 4, 3}, rng, false);
  auto out = mix.forward(z);
  REQUIRE(out.shape() == std::vector<std::size_t>{2, 2, 5});

  // reference: tokens first, channels second
  const auto& wt = mix.token_map.w;
  const auto& bt = mix.token_map.b;
  const auto& wc = mix.channel_map.w;
  const auto& bc = mix.channel_map.b;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t lo = 0; lo < 2; ++lo)
      for (std::size_t co = 0; co < 5; ++co) {
        double acc = bc.at(co);
        for (std::size_t ci = 0; ci < 3; ++ci) {
          double tok = bt.at(lo);
          for (std::size_t li = 0; li < 4; ++li)
            tok += wt.at(lo * 4 + li) * z.at((b * 4 + li) * 3 + ci);
          acc += wc.at(co * 3 + ci) * tok;
        }
        CHECK(out.at((b * 2 + lo) * 5 + co) == doctest::Approx(acc).epsilon(1e-12));
      }

  std::vector<Tensor> params = {wt, bt, wc, bc};
  for (auto& t : params) CHECK(t.requires_grad());
  auto zz = random_tensor({1, 4, 3}, rng);
  auto dens = random_tensor({1, 2, 5}, rng, false);
  auto f = [&] { return sum_all(mul(mix.forward(zz), dens)); };
  params.push_back(zz);
  CHECK(gradient_check(f, params, 1e-5) < 1e-6);
}

TEST_CASE("conv stage halves resolution and keeps residual blocks differentiable") {
  ConvStage stage(17, "stage", 2, 4, 2);
  Rng rng(111);
  auto x = random_tensor({1, 2, 8, 8}, rng);
  auto y = stage.forward(x);
  REQUIRE(y.shape() == std::vector<std::size_t>{1, 4, 4, 4});

  ParamList ps;
  stage.collect(ps);
  CHECK(ps.size() == 2 + 2 * 4);  // down + 2 blocks x (dw, pw)

  std::vector<Tensor> params = {x};
  for (auto& [n, t] : ps) params.push_back(t);
  auto dens = random_tensor({1, 4, 4, 4}, rng, false);
  auto f = [&] { return sum_all(mul(stage.forward(x), dens)); };
  CHECK(gradient_check(f, params, 1e-5) < 1e-6);
}

TEST_CASE("pooling helpers reduce the intended axes") {
  auto z = Tensor::from_data({1, 2, 3}, {1, 2, 3, 5, 6, 7});
  auto pz = pool_tokens(z);
  REQUIRE(pz.shape() == std::vector<std::size_t>{1, 3});
  CHECK(values(pz) == std::vector<double>{3, 4, 5});

  auto x = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  auto gx = global_avg_pool(x);
  REQUIRE(gx.shape() == std::vector<std::size_t>{1, 2});
  CHECK(values(gx) == std::vector<double>{2.5, 25});
}

TEST_CASE("parameter initialization is seed and path determined") {
  LinearLayer a(5, "layer", 8, 8), b(5, "layer", 8, 8), c(6, "layer", 8, 8), d(5, "other", 8, 8);
  CHECK(values(a.w) == values(b.w));
  CHECK(values(a.w) != values(c.w));
  CHECK(values(a.w) != values(d.w));
  CHECK(values(a.b) == std::vector<double>(8, 0.0));

  for (std::size_t i = 0; i < a.w.numel(); ++i) CHECK(std::fabs(a.w.at(i)) <= 0.04);

  Conv2dLayer cv(5, "conv", 8, 4, 3, 1, 1, 1);
  double var = 0.0;
  for (std::size_t i = 0; i < cv.w.numel(); ++i) var += cv.w.at(i) * cv.w.at(i);
  var /= static_cast<double>(cv.w.numel());
  // fan_in = 8*3*3 = 72, expected variance 2/72
  CHECK(var == doctest::Approx(2.0 / 72.0).epsilon(0.5));

  LayerNormLayer ln("ln", 4);
  CHECK(values(ln.gamma) == std::vector<double>(4, 1.0));
  CHECK(values(ln.beta) == std::vector<double>(4, 0.0));
}

TEST_CASE("collected parameter names are unique and prefixed") {
  TransformerBlock blk(7, "stage2.sa0", 8, 2, 2);
  CrossAttentionX2Z x2z(7, "stage2.x2z", 4, 8, 2);
  ParamList ps;
  blk.collect(ps);
  x2z.collect(ps);
  std::set<std::string> names;
  for (auto& [n, t] : ps) {
    CHECK(n.rfind("stage2.", 0) == 0);
    names.insert(n);
  }
  CHECK(names.size() == ps.size());
  // key projections carry no trainable bias
  CHECK(names.count("stage2.sa0.wk.weight") == 1);
  CHECK(names.count("stage2.sa0.wk.bias") == 0);
  CHECK(names.count("stage2.x2z.wk.bias") == 0);
  CHECK(names.count("stage2.x2z.wv.bias") == 1);
}
