#include "exitnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "exitnet/error.hpp"

namespace exitnet {
namespace {

std::string stage_path(std::size_t i) { return "stage" + std::to_string(i + 1); }

void check_finite(const Tensor& t, const std::string& what) {
  const double* p = t.data();
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(p[i])) throw NumericalError(what + ": non-finite activation");
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const ModelConfig& c = cfg_;
  const std::size_t K = c.num_classes;

  z0 = trunc_normal_param(seed, "z0", {c.latent_tokens, c.latent_width_in(0)}, 0.02);

  for (std::size_t i = 0; i < 4; ++i) {
    const std::string sp = stage_path(i);
    const std::size_t d_in = c.latent_width_in(i);
    x2z[i] = CrossAttentionX2Z(seed, sp + ".x2z", c.feature_channels_in(i), d_in, c.pool_size);
    for (std::size_t j = 0; j < c.stages[i].sa_blocks; ++j)
      sa[i].emplace_back(seed, sp + ".sa" + std::to_string(j + 1), d_in, c.stages[i].sa_heads,
                         c.stages[i].widening);
    mixers[i] = TokenMixer(seed, sp + ".mixer", c.latent_tokens_in(i), c.token_schedule[i], d_in,
                           c.channel_schedule[i]);
    conv[i] = ConvStage(seed, sp + ".conv", c.feature_channels_in(i), c.stages[i].feature_channels,
                        c.stages[i].conv_blocks);
    z2x[i] = CrossAttentionZ2X(seed, sp + ".z2x", c.stages[i].feature_channels);
  }

  // Head input widths: exit 1 sees the pooled stage-3 latent; exits 2 and 3 see
  // the pooled stage-4 latent resp. feature map; exit 4 sees both. Exits 2..4
  // are additionally fed the previous exit's logits via a K -> K link.
  const std::size_t c4 = c.channel_schedule[3];
  heads[0] = LinearLayer(seed, "head1", c.channel_schedule[2], K);
  heads[1] = LinearLayer(seed, "head2", c4 + K, K);
  heads[2] = LinearLayer(seed, "head3", c4 + K, K);
  heads[3] = LinearLayer(seed, "head4", 2 * c4 + K, K);
  fkt[0] = LinearLayer(seed, "fkt12", K, K);
  fkt[1] = LinearLayer(seed, "fkt23", K, K);
  fkt[2] = LinearLayer(seed, "fkt34", K, K);
}

ParamList Model::parameters() const {
  ParamList ps;
  ps.emplace_back("z0", z0);
  for (std::size_t i = 0; i < 4; ++i) {
    x2z[i].collect(ps);
    for (const auto& blk : sa[i]) blk.collect(ps);
    mixers[i].collect(ps);
    conv[i].collect(ps);
    z2x[i].collect(ps);
  }
  for (const auto& h : heads) h.collect(ps);
  for (const auto& f : fkt) f.collect(ps);
  return ps;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [path, t] : parameters()) n += t.numel();
  return n;
}

void Model::load(const Checkpoint& ck) {
  if (ck.config_hash != cfg_.hash())
    throw FormatError("checkpoint was written for a different model configuration");
  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [path, t] : parameters()) by_name.emplace(path, t);

  std::unordered_set<std::string> seen;
  for (const auto& [path, stored] : ck.params) {
    auto it = by_name.find(path);
    if (it == by_name.end())
      throw FormatError("checkpoint contains unknown parameter '" + path + "'");
    Tensor& dst = it->second;
    if (stored.shape() != dst.shape())
      throw FormatError("parameter '" + path + "': checkpoint shape " + shape_str(stored.shape()) +
                        " does not match model shape " + shape_str(dst.shape()));
    std::copy(stored.data(), stored.data() + stored.numel(), dst.data());
    seen.insert(path);
  }
  for (const auto& [path, t] : by_name)
    if (!seen.count(path)) throw FormatError("checkpoint is missing parameter '" + path + "'");
}

Tensor Model::initial_latent(std::size_t batch) const { return repeat_front(z0, batch); }

Tensor Model::classification_stage(std::size_t i, const Tensor& z_prev, const Tensor& x_prev) const {
  if (i >= 4) throw ContractError("classification_stage: stage index out of range");
  Tensor z = x2z[i].forward(z_prev, x_prev);
  for (const auto& blk : sa[i]) z = blk.forward(z);
  z = mixers[i].forward(z);
  check_finite(z, stage_path(i) + ".latent");
  return z;
}

Tensor Model::feature_stage(std::size_t i, const Tensor& x_prev, const Tensor& z_cur) const {
  if (i >= 4) throw ContractError("feature_stage: stage index out of range");
  Tensor x = conv[i].forward(x_prev);
  x = z2x[i].forward(x, z_cur);
  check_finite(x, stage_path(i) + ".feature");
  return x;
}

StagedForward::StagedForward(const Model& m, Tensor image) : model_(m) {
  const ModelConfig& c = m.config();
  const auto& s = image.shape();
  if (s.size() != 4 || s[1] != c.in_channels || s[2] != c.image_h || s[3] != c.image_w)
    throw ShapeError("forward expects images of shape [B," + std::to_string(c.in_channels) + "," +
                     std::to_string(c.image_h) + "," + std::to_string(c.image_w) + "], got " +
                     shape_str(s));
  z_[0] = m.initial_latent(s[0]);
  x_[0] = std::move(image);
}

void StagedForward::ensure_latent(std::size_t i) {
  if (z_[i]) return;
  ensure_latent(i - 1);
  ensure_feature(i - 1);
  z_[i] = model_.classification_stage(i - 1, *z_[i - 1], *x_[i - 1]);
}

void StagedForward::ensure_feature(std::size_t i) {
  if (x_[i]) return;
  ensure_feature(i - 1);
  ensure_latent(i);
  x_[i] = model_.feature_stage(i - 1, *x_[i - 1], *z_[i]);
}

const Tensor& StagedForward::latent(std::size_t i) {
  if (i > 4) throw ContractError("latent: stage index out of range");
  ensure_latent(i);
  return *z_[i];
}

const Tensor& StagedForward::feature(std::size_t i) {
  if (i > 4) throw ContractError("feature: stage index out of range");
  ensure_feature(i);
  return *x_[i];
}

const Tensor& StagedForward::pooled_latent4() {
  if (!pool_z4_) pool_z4_ = pool_tokens(latent(4));
  return *pool_z4_;
}

const Tensor& StagedForward::pooled_feature4() {
  if (!gap_x4_) gap_x4_ = global_avg_pool(feature(4));
  return *gap_x4_;
}

const Tensor& StagedForward::logits(std::size_t k) {
  if (k >= 4) throw ContractError("logits: exit index out of range");
  if (logits_[k]) return *logits_[k];
  const Model& m = model_;
  switch (k) {
    case 0:
      logits_[0] = m.heads[0].forward(pool_tokens(latent(3)));
      break;
    case 1:
      logits_[1] = m.heads[1].forward(concat({pooled_latent4(), m.fkt[0].forward(logits(0))}, 1));
      break;
    case 2:
      logits_[2] = m.heads[2].forward(concat({pooled_feature4(), m.fkt[1].forward(logits(1))}, 1));
      break;
    case 3:
      logits_[3] = m.heads[3].forward(
          concat({pooled_feature4(), pooled_latent4(), m.fkt[2].forward(logits(2))}, 1));
      break;
  }
  check_finite(*logits_[k], "exit" + std::to_string(k + 1) + ".logits");
  return *logits_[k];
}

ForwardOutputs StagedForward::outputs() {
  logits(3);  // the final exit is always enabled and forces the full chain
  ForwardOutputs out;
  for (std::size_t k = 0; k < 4; ++k)
    if (model_.config().exits[k]) out.logits[k] = logits_[k];
  out.pooled_latent = *pool_z4_;
  out.pooled_feature = *gap_x4_;
  return out;
}

ForwardOutputs full_forward(const Model& m, const Tensor& image) {
  StagedForward sf(m, image);
  return sf.outputs();
}

}  // namespace exitnet
