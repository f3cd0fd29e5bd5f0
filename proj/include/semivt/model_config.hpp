#pragma once

#include "semivt/common.hpp"

#include <json.hpp>

namespace semivt {

/// Architecture of the video encoder, the linear phase classifier and the
/// optional causal TCN head.
struct ModelConfig {
  int frame_size = 32;
  int channels = 1;
  int patch_size = 8;
  int embed_dim = 64;
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int window_len = 16;
  int num_classes = 5;

  bool tcn_head = false;
  int tcn_stages = 2;
  int tcn_levels = 5;
  int tcn_channels = 32;

  /// Throws ConfigError when the fields are inconsistent.
  void validate() const;

  int patches_per_side() const { return frame_size / patch_size; }
  int patches_per_frame() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int head_dim() const { return embed_dim / heads; }
  /// Rows of the token matrix: one class-token copy plus the patches, per frame.
  int num_tokens() const { return window_len * (patches_per_frame() + 1); }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace semivt
