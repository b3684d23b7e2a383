#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace exitnet {

struct StageSpec {
  std::size_t feature_channels = 0;
  std::size_t conv_blocks = 0;
  std::size_t sa_blocks = 1;
  std::size_t sa_heads = 1;  // defaults to 2^(stage-1) when built from presets/json
  std::size_t widening = 2;
};

// Static description of the dual-branch classifier. The latent channel width
// per stage is tied to the feature channel width (cross attentions stay
// square); the token schedule may only shrink.
struct ModelConfig {
  std::size_t num_classes = 0;
  std::size_t in_channels = 0, image_h = 0, image_w = 0;
  std::array<StageSpec, 4> stages{};
  std::size_t latent_tokens = 0;                   // token count of the initial latent
  std::array<std::size_t, 4> token_schedule{};     // tokens after each stage
  std::array<std::size_t, 4> channel_schedule{};   // latent width after each stage
  std::array<bool, 4> exits{true, true, true, true};
  std::size_t pool_size = 7;

  // Latent width entering stage i (0-indexed): the previous stage's output
  // width; the initial latent already uses stage 1's channel count.
  std::size_t latent_width_in(std::size_t i) const {
    return i == 0 ? stages[0].feature_channels : channel_schedule[i - 1];
  }
  std::size_t latent_tokens_in(std::size_t i) const {
    return i == 0 ? latent_tokens : token_schedule[i - 1];
  }
  std::size_t feature_channels_in(std::size_t i) const {
    return i == 0 ? in_channels : stages[i - 1].feature_channels;
  }
  // Spatial size of the feature map after stage i (0-indexed), per axis.
  std::size_t feature_hw(std::size_t i, std::size_t axis0) const {
    std::size_t v = axis0;
    for (std::size_t s = 0; s <= i; ++s) v = (v + 1) / 2;
    return v;
  }

  void validate() const;  // throws ConfigError naming the offending field
  std::uint64_t hash() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

}  // namespace exitnet
