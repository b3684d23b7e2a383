#include "exitnet/layers.hpp"

#include <cmath>

#include "exitnet/error.hpp"
#include "exitnet/rng.hpp"

namespace exitnet {

Tensor trunc_normal_param(std::uint64_t seed, const std::string& path,
                          std::vector<std::size_t> shape, double stddev) {
  Rng rng = param_rng(seed, path);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.truncated_normal(stddev);
  return Tensor::from_data(std::move(shape), std::move(d), true);
}

Tensor kaiming_conv_param(std::uint64_t seed, const std::string& path,
                          std::vector<std::size_t> shape) {
  if (shape.size() != 4) throw ShapeError("kaiming_conv_param: expected rank 4 weight");
  double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  double stddev = std::sqrt(2.0 / fan_in);
  Rng rng = param_rng(seed, path);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(d), true);
}

Tensor zeros_param(std::vector<std::size_t> shape) { return Tensor::zeros(std::move(shape), true); }

Tensor ones_param(std::vector<std::size_t> shape) {
  return Tensor::full(std::move(shape), 1.0, true);
}

Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const Tensor* rpb) {
  const auto& qs = q.shape();
  const auto& ks = k.shape();
  if (qs.size() != 3 || ks.size() != 3 || v.shape() != ks)
    throw ShapeError("scaled_attention: expected [B,L,D] inputs, got " + shape_str(qs) + ", " +
                     shape_str(ks) + ", " + shape_str(v.shape()));
  std::size_t B = qs[0], Lq = qs[1], D = qs[2], Lk = ks[1];
  if (ks[0] != B || ks[2] != D)
    throw ShapeError("scaled_attention: q " + shape_str(qs) + " and k " + shape_str(ks) +
                     " disagree");
  if (heads == 0 || D % heads != 0)
    throw ShapeError("scaled_attention: heads " + std::to_string(heads) +
                     " must divide width " + std::to_string(D));
  std::size_t dh = D / heads;

  auto split = [&](const Tensor& t, std::size_t L) {
    return permute(reshape(t, {B, L, heads, dh}), {0, 2, 1, 3});
  };
  Tensor qh = split(q, Lq);
  Tensor kh = split(k, Lk);
  Tensor vh = split(v, Lk);

  Tensor scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (rpb) scores = add(scores, *rpb);
  Tensor attn = softmax(scores, -1);
  Tensor ctx = matmul(attn, vh);
  return reshape(permute(ctx, {0, 2, 1, 3}), {B, Lq, D});
}

// ---- LinearLayer -----------------------------------------------------------

LinearLayer::LinearLayer(std::uint64_t seed, std::string p, std::size_t in, std::size_t out,
                         bool with_bias)
    : path(std::move(p)),
      w(trunc_normal_param(seed, path + ".weight", {out, in}, 0.02)),
      b(with_bias ? zeros_param({out}) : Tensor::zeros({out})),
      has_bias(with_bias) {}

Tensor LinearLayer::forward(const Tensor& x) const { return linear(x, w, b); }

void LinearLayer::collect(ParamList& out) const {
  out.emplace_back(path + ".weight", w);
  if (has_bias) out.emplace_back(path + ".bias", b);
}

// ---- LayerNormLayer --------------------------------------------------------

LayerNormLayer::LayerNormLayer(std::string p, std::size_t dim)
    : path(std::move(p)), gamma(ones_param({dim})), beta(zeros_param({dim})) {}

Tensor LayerNormLayer::forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNormLayer::collect(ParamList& out) const {
  out.emplace_back(path + ".gamma", gamma);
  out.emplace_back(path + ".beta", beta);
}

// ---- Conv2dLayer -----------------------------------------------------------

Conv2dLayer::Conv2dLayer(std::uint64_t seed, std::string p, std::size_t cin, std::size_t cout,
                         std::size_t k, std::size_t stride_, std::size_t padding_,
                         std::size_t groups_)
    : path(std::move(p)),
      w(kaiming_conv_param(seed, path + ".weight", {cout, cin / groups_, k, k})),
      b(zeros_param({cout})),
      stride(stride_),
      padding(padding_),
      groups(groups_) {
  if (cin % groups_ != 0)
    throw ShapeError("Conv2dLayer: groups must divide input channels");
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return conv2d(x, w, b, stride, padding, groups);
}

void Conv2dLayer::collect(ParamList& out) const {
  out.emplace_back(path + ".weight", w);
  out.emplace_back(path + ".bias", b);
}

// ---- TransformerBlock ------------------------------------------------------

TransformerBlock::TransformerBlock(std::uint64_t seed, std::string p, std::size_t dim,
                                   std::size_t heads_, std::size_t mlp_ratio)
    : path(std::move(p)),
      heads(heads_),
      ln1(path + ".ln1", dim),
      ln2(path + ".ln2", dim),
      wq(seed, path + ".wq", dim, dim),
      wk(seed, path + ".wk", dim, dim, false),
      wv(seed, path + ".wv", dim, dim),
      wo(seed, path + ".wo", dim, dim),
      fc1(seed, path + ".fc1", dim, dim * mlp_ratio),
      fc2(seed, path + ".fc2", dim * mlp_ratio, dim) {
  if (heads_ == 0 || dim % heads_ != 0)
    throw ShapeError("TransformerBlock: heads " + std::to_string(heads_) +
                     " must divide width " + std::to_string(dim));
}

Tensor TransformerBlock::forward(const Tensor& z) const {
  Tensor a = ln1.forward(z);
  Tensor ctx = scaled_attention(wq.forward(a), wk.forward(a), wv.forward(a), heads);
  Tensor z1 = add(z, wo.forward(ctx));
  Tensor m = ln2.forward(z1);
  return add(z1, fc2.forward(gelu(fc1.forward(m))));
}

void TransformerBlock::collect(ParamList& out) const {
  ln1.collect(out);
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
  ln2.collect(out);
  fc1.collect(out);
  fc2.collect(out);
}

// ---- CrossAttentionX2Z -----------------------------------------------------

CrossAttentionX2Z::CrossAttentionX2Z(std::uint64_t seed, std::string p, std::size_t feat_channels,
                                     std::size_t dim, std::size_t pool_)
    : path(std::move(p)),
      pool(pool_),
      dwc(seed, path + ".dwc", feat_channels, feat_channels, 3, 1, 1, feat_channels),
      wq(seed, path + ".wq", dim, dim),
      wk(seed, path + ".wk", feat_channels, dim, false),
      wv(seed, path + ".wv", feat_channels, dim),
      wo(seed, path + ".wo", dim, dim),
      rpb(zeros_param({1, pool_ * pool_})) {}

Tensor CrossAttentionX2Z::forward(const Tensor& z, const Tensor& x) const {
  const auto& xs = x.shape();
  std::size_t B = xs[0], F = xs[1];
  Tensor t = adaptive_avg_pool2d(dwc.forward(x), pool);
  Tensor tok = permute(reshape(t, {B, F, pool * pool}), {0, 2, 1});
  Tensor ctx = scaled_attention(wq.forward(z), wk.forward(tok), wv.forward(tok), 1, &rpb);
  return add(z, wo.forward(ctx));
}

void CrossAttentionX2Z::collect(ParamList& out) const {
  dwc.collect(out);
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
  out.emplace_back(path + ".rpb", rpb);
}

// ---- CrossAttentionZ2X -----------------------------------------------------

CrossAttentionZ2X::CrossAttentionZ2X(std::uint64_t seed, std::string p, std::size_t channels)
    : path(std::move(p)),
      wq(seed, path + ".wq", channels, channels),
      wk(seed, path + ".wk", channels, channels, false),
      wv(seed, path + ".wv", channels, channels),
      wo(seed, path + ".wo", channels, channels) {}

Tensor CrossAttentionZ2X::forward(const Tensor& x, const Tensor& z) const {
  const auto& xs = x.shape();
  std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (z.shape().size() != 3 || z.shape()[2] != C)
    throw ShapeError("CrossAttentionZ2X: latent width " + shape_str(z.shape()) +
                     " must match feature channels " + std::to_string(C));
  Tensor tok = permute(reshape(x, {B, C, H * W}), {0, 2, 1});
  Tensor ctx = scaled_attention(wq.forward(tok), wk.forward(z), wv.forward(z), 1);
  Tensor upd = permute(wo.forward(ctx), {0, 2, 1});
  return add(x, reshape(upd, {B, C, H, W}));
}

void CrossAttentionZ2X::collect(ParamList& out) const {
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
}

// ---- TokenMixer ------------------------------------------------------------

TokenMixer::TokenMixer(std::uint64_t seed, std::string p, std::size_t l_in, std::size_t l_out,
                       std::size_t d_in, std::size_t d_out)
    : path(std::move(p)),
      token_map(seed, path + ".token_map", l_in, l_out),
      channel_map(seed, path + ".channel_map", d_in, d_out) {}

Tensor TokenMixer::forward(const Tensor& z) const {
  Tensor t = permute(z, {0, 2, 1});
  t = token_map.forward(t);
  t = permute(t, {0, 2, 1});
  return channel_map.forward(t);
}

void TokenMixer::collect(ParamList& out) const {
  token_map.collect(out);
  channel_map.collect(out);
}

// ---- ConvStage -------------------------------------------------------------

ConvStage::ConvStage(std::uint64_t seed, std::string p, std::size_t cin, std::size_t cout,
                     std::size_t num_blocks)
    : path(std::move(p)), down(seed, path + ".down", cin, cout, 3, 2, 1, 1) {
  blocks.reserve(num_blocks);
  for (std::size_t i = 0; i < num_blocks; ++i) {
    std::string bp = path + ".block" + std::to_string(i + 1);
    blocks.push_back(Block{Conv2dLayer(seed, bp + ".dw", cout, cout, 3, 1, 1, cout),
                           Conv2dLayer(seed, bp + ".pw", cout, cout, 1, 1, 0, 1)});
  }
}

Tensor ConvStage::forward(const Tensor& x) const {
  Tensor y = gelu(down.forward(x));
  for (const auto& blk : blocks) {
    Tensor t = gelu(blk.dw.forward(y));
    t = gelu(blk.pw.forward(t));
    y = add(y, t);
  }
  return y;
}

void ConvStage::collect(ParamList& out) const {
  down.collect(out);
  for (const auto& blk : blocks) {
    blk.dw.collect(out);
    blk.pw.collect(out);
  }
}

// ---- pooling helpers -------------------------------------------------------

Tensor pool_tokens(const Tensor& z) {
  if (z.shape().size() != 3) throw ShapeError("pool_tokens: expected [B,L,D]");
  return mean_axis(z, 1);
}

Tensor global_avg_pool(const Tensor& x) {
  const auto& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("global_avg_pool: expected [B,C,H,W]");
  return mean_axis(reshape(x, {xs[0], xs[1], xs[2] * xs[3]}), 2);
}

}  // namespace exitnet
