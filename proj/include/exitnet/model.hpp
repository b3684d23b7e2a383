#pragma once

#include <array>
#include <optional>
#include <string>

#include "exitnet/checkpoint.hpp"
#include "exitnet/config.hpp"
#include "exitnet/layers.hpp"
#include "exitnet/tensor.hpp"

namespace exitnet {

struct ForwardOutputs {
  std::array<std::optional<Tensor>, 4> logits;  // only enabled exits are filled
  Tensor pooled_latent;                         // mean over stage-4 latent tokens
  Tensor pooled_feature;                        // global average of the stage-4 feature map
};

// Dual-branch classifier: a convolutional feature branch and a latent
// classification branch exchange information through cross attention once per
// stage. Exits 1/2 read the latent after stages 3/4, exit 3 reads the final
// feature map, exit 4 reads both; each exit head also receives the previous
// exit's logits through a linear knowledge-transfer link.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamList parameters() const;
  std::size_t parameter_count() const;
  void load(const Checkpoint& ck);

  Tensor initial_latent(std::size_t batch) const;
  // z_i = mixer_i(sa_i(x2z_i(z_{i-1}, x_{i-1}))); reads only the previous
  // stage's outputs of both branches.
  Tensor classification_stage(std::size_t i, const Tensor& z_prev, const Tensor& x_prev) const;
  // x_i = z2x_i(conv_i(x_{i-1}), z_i); reads the previous feature map and the
  // same stage's latent.
  Tensor feature_stage(std::size_t i, const Tensor& x_prev, const Tensor& z_cur) const;

  Tensor z0;
  std::array<CrossAttentionX2Z, 4> x2z;
  std::array<std::vector<TransformerBlock>, 4> sa;
  std::array<TokenMixer, 4> mixers;
  std::array<ConvStage, 4> conv;
  std::array<CrossAttentionZ2X, 4> z2x;
  std::array<LinearLayer, 4> heads;
  std::array<LinearLayer, 3> fkt;

 private:
  ModelConfig cfg_;
};

// Single driver for both monolithic and incremental execution; the early-exit
// engine steps it lazily, full_forward drains it. Both paths therefore run the
// identical op sequence and produce bit-identical logits.
class StagedForward {
 public:
  StagedForward(const Model& m, Tensor image);

  // exit index k in 0..3; computes exactly the prefix of the schedule needed
  const Tensor& logits(std::size_t k);
  // branch outputs by stage, index 0 = the inputs themselves
  const Tensor& latent(std::size_t i);
  const Tensor& feature(std::size_t i);
  ForwardOutputs outputs();

 private:
  void ensure_latent(std::size_t i);
  void ensure_feature(std::size_t i);
  const Tensor& pooled_latent4();
  const Tensor& pooled_feature4();

  const Model& model_;
  std::array<std::optional<Tensor>, 5> z_, x_;
  std::array<std::optional<Tensor>, 4> logits_;
  std::optional<Tensor> pool_z4_, gap_x4_;
};

ForwardOutputs full_forward(const Model& m, const Tensor& image);

}  // namespace exitnet
