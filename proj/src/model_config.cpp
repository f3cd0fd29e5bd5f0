#include "semivt/model_config.hpp"

#include <string>

namespace semivt {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (frame_size < 1 || channels < 1 || patch_size < 1) fail("frame_size, channels and patch_size must be positive");
  if (frame_size % patch_size != 0) fail("frame_size must be divisible by patch_size");
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) fail("embed_dim must be a positive multiple of heads");
  if (depth < 0) fail("depth must be non-negative");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (window_len < 1) fail("window_len must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (tcn_head && (tcn_stages < 1 || tcn_levels < 1 || tcn_channels < 1)) {
    fail("tcn head needs positive stages, levels and channels");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"frame_size", c.frame_size},   {"channels", c.channels},
                     {"patch_size", c.patch_size},   {"embed_dim", c.embed_dim},
                     {"depth", c.depth},             {"heads", c.heads},
                     {"mlp_ratio", c.mlp_ratio},     {"window_len", c.window_len},
                     {"num_classes", c.num_classes}, {"tcn_head", c.tcn_head},
                     {"tcn_stages", c.tcn_stages},   {"tcn_levels", c.tcn_levels},
                     {"tcn_channels", c.tcn_channels}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.frame_size = j.value("frame_size", d.frame_size);
  c.channels = j.value("channels", d.channels);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.window_len = j.value("window_len", d.window_len);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.tcn_head = j.value("tcn_head", d.tcn_head);
  c.tcn_stages = j.value("tcn_stages", d.tcn_stages);
  c.tcn_levels = j.value("tcn_levels", d.tcn_levels);
  c.tcn_channels = j.value("tcn_channels", d.tcn_channels);
}

}  // namespace semivt
