#include "exitnet/config.hpp"

#include "exitnet/error.hpp"
#include "exitnet/rng.hpp"

namespace exitnet {

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError(field + ": " + why);
  };
  if (num_classes < 2) fail("num_classes", "need at least 2 classes");
  if (in_channels == 0) fail("image.channels", "must be positive");
  if (image_h == 0 || image_w == 0) fail("image.height/width", "must be positive");
  if (latent_tokens == 0) fail("latent.tokens", "must be positive");
  if (pool_size == 0) fail("pool_size", "must be positive");

  for (std::size_t i = 0; i < 4; ++i) {
    std::string si = "stages[" + std::to_string(i) + "]";
    if (stages[i].feature_channels == 0) fail(si + ".feature_channels", "must be positive");
    if (stages[i].sa_blocks == 0) fail(si + ".sa_blocks", "must be positive");
    if (stages[i].widening == 0) fail(si + ".widening", "must be positive");
    if (channel_schedule[i] != stages[i].feature_channels)
      fail("latent.channel_schedule[" + std::to_string(i) + "]",
           "latent width must track feature channels (" +
               std::to_string(stages[i].feature_channels) + "), got " +
               std::to_string(channel_schedule[i]));
    if (token_schedule[i] == 0) fail("latent.token_schedule[" + std::to_string(i) + "]",
                                     "must be positive");
    std::size_t prev_tokens = latent_tokens_in(i);
    if (token_schedule[i] > prev_tokens)
      fail("latent.token_schedule[" + std::to_string(i) + "]",
           "token schedule must be non-increasing (" + std::to_string(prev_tokens) + " -> " +
               std::to_string(token_schedule[i]) + ")");
    std::size_t prev_width = latent_width_in(i);
    if (i > 0 && channel_schedule[i] < channel_schedule[i - 1])
      fail("latent.channel_schedule[" + std::to_string(i) + "]",
           "channel schedule must be non-decreasing");
    if (stages[i].sa_heads == 0 || prev_width % stages[i].sa_heads != 0)
      fail(si + ".sa_heads", "heads " + std::to_string(stages[i].sa_heads) +
                                 " must divide the incoming latent width " +
                                 std::to_string(prev_width));
  }
  // every stage pools the incoming feature map down to pool_size x pool_size
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t h = i == 0 ? image_h : feature_hw(i - 1, image_h);
    std::size_t w = i == 0 ? image_w : feature_hw(i - 1, image_w);
    if (h < pool_size || w < pool_size)
      fail("pool_size", "stage " + std::to_string(i + 1) + " sees a " + std::to_string(h) + "x" +
                            std::to_string(w) + " feature map, smaller than pool size " +
                            std::to_string(pool_size));
  }
  if (!exits[3]) fail("exits[3]", "the final exit cannot be disabled");
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(to_json().dump()); }

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["num_classes"] = num_classes;
  j["image"] = {{"channels", in_channels}, {"height", image_h}, {"width", image_w}};
  j["stages"] = nlohmann::json::array();
  for (const auto& s : stages)
    j["stages"].push_back({{"feature_channels", s.feature_channels},
                           {"conv_blocks", s.conv_blocks},
                           {"sa_blocks", s.sa_blocks},
                           {"sa_heads", s.sa_heads},
                           {"widening", s.widening}});
  j["latent"] = {{"tokens", latent_tokens},
                 {"token_schedule", token_schedule},
                 {"channel_schedule", channel_schedule}};
  j["exits"] = exits;
  j["pool_size"] = pool_size;
  return j;
}

namespace {

template <class T>
T get_field(const nlohmann::json& j, const std::string& name) {
  if (!j.contains(name)) throw ConfigError(name + ": missing");
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(name + ": wrong type");
  }
}

template <class T>
T get_field_or(const nlohmann::json& j, const std::string& name, T fallback) {
  if (!j.contains(name)) return fallback;
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(name + ": wrong type");
  }
}

}  // namespace

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_classes = get_field<std::size_t>(j, "num_classes");
  auto image = get_field<nlohmann::json>(j, "image");
  c.in_channels = get_field<std::size_t>(image, "channels");
  c.image_h = get_field<std::size_t>(image, "height");
  c.image_w = get_field<std::size_t>(image, "width");

  auto stages = get_field<nlohmann::json>(j, "stages");
  if (!stages.is_array() || stages.size() != 4)
    throw ConfigError("stages: expected exactly 4 entries");
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& sj = stages[i];
    StageSpec s;
    s.feature_channels = get_field<std::size_t>(sj, "feature_channels");
    s.conv_blocks = get_field_or<std::size_t>(sj, "conv_blocks", 1);
    s.sa_blocks = get_field_or<std::size_t>(sj, "sa_blocks", 1);
    s.sa_heads = get_field_or<std::size_t>(sj, "sa_heads", std::size_t{1} << i);
    s.widening = get_field_or<std::size_t>(sj, "widening", 2);
    c.stages[i] = s;
  }

  auto latent = get_field<nlohmann::json>(j, "latent");
  c.latent_tokens = get_field<std::size_t>(latent, "tokens");
  auto tok = get_field<std::vector<std::size_t>>(latent, "token_schedule");
  if (tok.size() != 4) throw ConfigError("latent.token_schedule: expected 4 entries");
  std::copy(tok.begin(), tok.end(), c.token_schedule.begin());
  if (latent.contains("channel_schedule")) {
    auto ch = get_field<std::vector<std::size_t>>(latent, "channel_schedule");
    if (ch.size() != 4) throw ConfigError("latent.channel_schedule: expected 4 entries");
    std::copy(ch.begin(), ch.end(), c.channel_schedule.begin());
  } else {
    for (std::size_t i = 0; i < 4; ++i) c.channel_schedule[i] = c.stages[i].feature_channels;
  }

  auto exits = get_field_or<std::vector<bool>>(j, "exits", {true, true, true, true});
  if (exits.size() != 4) throw ConfigError("exits: expected 4 entries");
  std::copy(exits.begin(), exits.end(), c.exits.begin());
  c.pool_size = get_field_or<std::size_t>(j, "pool_size", 7);

  c.validate();
  return c;
}

namespace {

ModelConfig make_preset(std::size_t classes, std::size_t in_ch, std::size_t hw,
                        std::array<std::size_t, 4> C, std::array<std::size_t, 4> conv_blocks,
                        std::array<std::size_t, 4> sa_blocks, std::size_t widening,
                        std::size_t L0, std::array<std::size_t, 4> tokens,
                        std::size_t pool_size) {
  ModelConfig c;
  c.num_classes = classes;
  c.in_channels = in_ch;
  c.image_h = c.image_w = hw;
  for (std::size_t i = 0; i < 4; ++i) {
    c.stages[i] = StageSpec{C[i], conv_blocks[i], sa_blocks[i], std::size_t{1} << i, widening};
    c.channel_schedule[i] = C[i];
  }
  c.latent_tokens = L0;
  c.token_schedule = tokens;
  c.pool_size = pool_size;
  return c;
}

}  // namespace

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "tiny") {
    c = make_preset(4, 1, 16, {4, 8, 16, 32}, {1, 1, 1, 1}, {1, 1, 1, 1}, 2, 8, {8, 4, 2, 2}, 2);
  } else if (name == "toy") {
    c = make_preset(8, 1, 32, {8, 16, 32, 64}, {1, 1, 1, 1}, {1, 1, 1, 1}, 2, 16, {16, 8, 4, 4},
                    4);
  } else if (name == "resnet-model-1-style") {
    c = make_preset(1000, 3, 224, {24, 48, 96, 192}, {3, 4, 6, 3}, {3, 3, 9, 3}, 4, 128,
                    {128, 64, 32, 32}, 7);
  } else if (name == "regnet-model-1-style") {
    c = make_preset(1000, 3, 224, {16, 36, 72, 144}, {1, 3, 6, 6}, {6, 6, 9, 9}, 4, 128,
                    {128, 64, 32, 32}, 7);
  } else if (name == "mobilenet-model-1-style") {
    c = make_preset(1000, 3, 224, {16, 32, 88, 120}, {2, 3, 6, 3}, {3, 3, 9, 9}, 4, 128,
                    {128, 64, 32, 32}, 7);
  } else {
    throw ConfigError("preset: unknown name '" + name + "'");
  }
  c.validate();
  return c;
}

std::vector<std::string> ModelConfig::preset_names() {
  return {"tiny", "toy", "resnet-model-1-style", "regnet-model-1-style",
          "mobilenet-model-1-style"};
}

}  // namespace exitnet
