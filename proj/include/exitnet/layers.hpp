#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "exitnet/tensor.hpp"

namespace exitnet {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

// Initializers. Every parameter draws from its own stream keyed by (seed, path),
// so the values do not depend on construction order.
Tensor trunc_normal_param(std::uint64_t seed, const std::string& path,
                          std::vector<std::size_t> shape, double stddev);
Tensor kaiming_conv_param(std::uint64_t seed, const std::string& path,
                          std::vector<std::size_t> shape);
Tensor zeros_param(std::vector<std::size_t> shape);
Tensor ones_param(std::vector<std::size_t> shape);

// q [B,Lq,D] against k,v [B,Lk,D]; scores scaled by 1/sqrt(D/heads).
// rpb, when given, is [1,Lk] and is added to every score row.
Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const Tensor* rpb = nullptr);

// Key projections are built without a bias: softmax subtracts any per-query
// constant, so a K bias can never influence an output and would only pollute
// finite-difference gradient audits with an exactly-zero-gradient parameter.
struct LinearLayer {
  std::string path;
  Tensor w, b;
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(std::uint64_t seed, std::string path, std::size_t in, std::size_t out,
              bool with_bias = true);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out) const;
};

struct LayerNormLayer {
  std::string path;
  Tensor gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(std::string path, std::size_t dim);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out) const;
};

struct Conv2dLayer {
  std::string path;
  Tensor w, b;
  std::size_t stride = 1, padding = 0, groups = 1;

  Conv2dLayer() = default;
  Conv2dLayer(std::uint64_t seed, std::string path, std::size_t cin, std::size_t cout,
              std::size_t k, std::size_t stride, std::size_t padding, std::size_t groups);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out) const;
};

// Pre-norm transformer encoder block on [B,L,D] tokens.
struct TransformerBlock {
  std::string path;
  std::size_t heads = 1;
  LayerNormLayer ln1, ln2;
  LinearLayer wq, wk, wv, wo, fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(std::uint64_t seed, std::string path, std::size_t dim, std::size_t heads,
                   std::size_t mlp_ratio);
  Tensor forward(const Tensor& z) const;
  void collect(ParamList& out) const;
};

// Feature-to-latent cross attention. The feature map is smoothed by a depthwise
// conv, pooled to pool x pool tokens, projected to the latent width, and the
// latent tokens attend into it. A learned bias is added per feature token.
struct CrossAttentionX2Z {
  std::string path;
  std::size_t pool = 1;
  Conv2dLayer dwc;
  LinearLayer wq, wk, wv, wo;
  Tensor rpb;

  CrossAttentionX2Z() = default;
  CrossAttentionX2Z(std::uint64_t seed, std::string path, std::size_t feat_channels,
                    std::size_t dim, std::size_t pool);
  Tensor forward(const Tensor& z, const Tensor& x) const;
  void collect(ParamList& out) const;
};

// Latent-to-feature cross attention. Every spatial position of x, viewed as a
// token of width C, attends into the latent tokens (which must also be width C).
struct CrossAttentionZ2X {
  std::string path;
  LinearLayer wq, wk, wv, wo;

  CrossAttentionZ2X() = default;
  CrossAttentionZ2X(std::uint64_t seed, std::string path, std::size_t channels);
  Tensor forward(const Tensor& x, const Tensor& z) const;
  void collect(ParamList& out) const;
};

// Linear resampling of the latent: token count L_in -> L_out applied per
// channel, then channel width D_in -> D_out applied per token.
struct TokenMixer {
  std::string path;
  LinearLayer token_map, channel_map;

  TokenMixer() = default;
  TokenMixer(std::uint64_t seed, std::string path, std::size_t l_in, std::size_t l_out,
             std::size_t d_in, std::size_t d_out);
  Tensor forward(const Tensor& z) const;
  void collect(ParamList& out) const;
};

// One stage of the feature branch: strided 3x3 downsample, then residual
// depthwise-separable blocks. Every conv is followed by a GELU.
struct ConvStage {
  struct Block {
    Conv2dLayer dw, pw;
  };
  std::string path;
  Conv2dLayer down;
  std::vector<Block> blocks;

  ConvStage() = default;
  ConvStage(std::uint64_t seed, std::string path, std::size_t cin, std::size_t cout,
            std::size_t num_blocks);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out) const;
};

// Mean over the token axis of [B,L,D] -> [B,D].
Tensor pool_tokens(const Tensor& z);
// Global average pool of [B,C,H,W] -> [B,C].
Tensor global_avg_pool(const Tensor& x);

}  // namespace exitnet
