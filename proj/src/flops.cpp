#include "exitnet/flops.hpp"

namespace exitnet {
namespace {

using u64 = std::uint64_t;

// one helper per runtime op, same price as the corresponding kernel
u64 linear_f(u64 rows, u64 in, u64 out) { return 2 * rows * in * out + rows * out; }
u64 matmul_f(u64 batch, u64 m, u64 k, u64 n) { return 2 * batch * m * k * n; }
u64 conv_f(u64 cin_per_group, u64 k, u64 out_numel) {
  return 2 * cin_per_group * k * k * out_numel + out_numel;
}
u64 norm_f(u64 rows, u64 width) { return 6 * rows * width + 3 * rows; }

// score matmul, scale, optional shared bias, softmax, context matmul
u64 attention_f(u64 heads, u64 lq, u64 lk, u64 width, bool bias) {
  u64 dh = width / heads;
  u64 cells = heads * lq * lk;
  return matmul_f(heads, lq, dh, lk) + cells + (bias ? cells : 0) + 2 * cells +
         matmul_f(heads, lq, lk, dh);
}

}  // namespace

FlopsProfile flops_profile(const ModelConfig& c) {
  FlopsProfile p;
  const u64 K = c.num_classes;
  const u64 P = c.pool_size;

  for (std::size_t i = 0; i < 4; ++i) {
    const u64 D = c.latent_width_in(i);
    const u64 L = c.latent_tokens_in(i);
    const u64 F = c.feature_channels_in(i);
    const u64 H = i == 0 ? c.image_h : c.feature_hw(i - 1, c.image_h);
    const u64 W = i == 0 ? c.image_w : c.feature_hw(i - 1, c.image_w);
    const u64 C = c.stages[i].feature_channels;
    const u64 T = c.token_schedule[i];
    const u64 heads = c.stages[i].sa_heads;
    const u64 r = c.stages[i].widening;
    const u64 N = c.feature_hw(i, c.image_h) * c.feature_hw(i, c.image_w);

    // feature-to-latent attention: depthwise smoothing, pool (charged on its
    // input), k/v from the P*P tokens, q/o on the latent, residual add
    u64 lat = conv_f(1, 3, F * H * W) + F * H * W;
    lat += linear_f(L, D, D) + 2 * linear_f(P * P, F, D);
    lat += attention_f(1, L, P * P, D, true);
    lat += linear_f(L, D, D) + L * D;
    // self-attention blocks: norm, q/k/v, attention, o, add, norm, mlp, add
    lat += c.stages[i].sa_blocks *
           (norm_f(L, D) + 3 * linear_f(L, D, D) + attention_f(heads, L, L, D, false) +
            linear_f(L, D, D) + L * D + norm_f(L, D) + linear_f(L, D, r * D) + L * r * D +
            linear_f(L, r * D, D) + L * D);
    // mixer: token resample (rows are channels), channel resample (rows are tokens)
    lat += linear_f(D, L, T) + linear_f(T, D, c.channel_schedule[i]);
    p.latent_stage[i] = lat;

    // conv stage: strided downsample + gelu, then dw/pw blocks with residual
    u64 fea = conv_f(F, 3, C * N) + C * N;
    fea += c.stages[i].conv_blocks *
           (conv_f(1, 3, C * N) + C * N + conv_f(C, 1, C * N) + C * N + C * N);
    // latent-to-feature attention: every position queries the T latent tokens
    fea += linear_f(N, C, C) + 2 * linear_f(T, C, C);
    fea += attention_f(1, N, T, C, false);
    fea += linear_f(N, C, C) + C * N;
    p.feature_stage[i] = fea;
  }

  const u64 c3 = c.channel_schedule[2], c4 = c.channel_schedule[3];
  const u64 t3 = c.token_schedule[2], t4 = c.token_schedule[3];
  const u64 n4 = c.feature_hw(3, c.image_h) * c.feature_hw(3, c.image_w);
  p.exit_head[0] = t3 * c3 + linear_f(1, c3, K);
  p.exit_head[1] = t4 * c4 + linear_f(1, K, K) + linear_f(1, c4 + K, K);
  p.exit_head[2] = c4 * n4 + linear_f(1, K, K) + linear_f(1, c4 + K, K);
  p.exit_head[3] = linear_f(1, K, K) + linear_f(1, 2 * c4 + K, K);

  p.cumulative[0] = p.latent_stage[0] + p.latent_stage[1] + p.latent_stage[2] +
                    p.feature_stage[0] + p.feature_stage[1] + p.exit_head[0];
  p.cumulative[1] = p.cumulative[0] + p.feature_stage[2] + p.latent_stage[3] + p.exit_head[1];
  p.cumulative[2] = p.cumulative[1] + p.feature_stage[3] + p.exit_head[2];
  p.cumulative[3] = p.cumulative[2] + p.exit_head[3];
  p.full = p.cumulative[3];
  return p;
}

}  // namespace exitnet
