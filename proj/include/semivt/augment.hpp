#pragma once

#include "semivt/common.hpp"
#include "semivt/frames.hpp"
#include "semivt/rng.hpp"

#include <json.hpp>

#include <span>
#include <string>
#include <vector>

namespace semivt {

enum class PixelOp { kIdentity, kRotate, kTranslateX, kTranslateY, kShear, kBrightness, kContrast, kCutout };

std::string to_string(PixelOp op);
PixelOp pixel_op_from_string(const std::string& name);

struct OpSpec {
  PixelOp op = PixelOp::kIdentity;
  double magnitude = 0.0;  // 0..10

  bool operator==(const OpSpec&) const = default;
};

enum class PolicyKind { kWeak, kStrong };

/// Pixel-level augmentation. A weak policy applies a random crop followed by
/// the first `num_ops` listed ops in order, each with a magnitude drawn
/// uniformly from [0, magnitude]. A strong policy samples `num_ops` ops with
/// replacement (RandAugment style) with magnitude ~ N(magnitude, magnitude_std)
/// clipped to [0, 10]. Either way the draws are made once per window and
/// shared by all of its frames.
struct AugmentPolicy {
  PolicyKind kind = PolicyKind::kWeak;
  std::vector<OpSpec> pixel_ops;
  int num_ops = 0;
  double magnitude_std = 0.0;
  double crop_fraction = 1.0;

  void validate() const;

  /// Normalisation only.
  static AugmentPolicy none();
  /// Random crop (87.5%) and a small random rotation.
  static AugmentPolicy weak();
  /// Five ops at magnitude 9 with jitter 0.8 over the full op set.
  static AugmentPolicy strong();

  bool operator==(const AugmentPolicy&) const = default;
};

void to_json(nlohmann::json& j, const AugmentPolicy& p);
void from_json(const nlohmann::json& j, AugmentPolicy& p);

/// Per-channel dataset statistics used to standardise frames.
struct Normalization {
  std::vector<float> mean{0.0f};
  std::vector<float> stddev{1.0f};

  bool operator==(const Normalization&) const = default;
};

void to_json(nlohmann::json& j, const Normalization& n);
void from_json(const nlohmann::json& j, Normalization& n);

/// Query frame t and its T-1 predecessors; positions before the video start
/// repeat frame 0.
FrameWindow weak_view(std::span<const Frame> video, Index t, int window_len);

/// Query frame t last, preceded by T-1 frames drawn from [0, t-1] (without
/// replacement when t >= T-1, with replacement otherwise), sorted ascending.
FrameWindow strong_view(std::span<const Frame> video, Index t, int window_len, RngStream& rng);

/// Frame indices selected by strong_view, query last.
std::vector<Index> strong_view_indices(Index t, int window_len, RngStream& rng);

/// Applies `policy` to every frame of `window`, clamps to [0, 1] and
/// standardises with `norm`. Cutout is applied after standardisation and
/// writes zeros.
FrameWindow apply_pixel_policy(const FrameWindow& window, const AugmentPolicy& policy, const Normalization& norm,
                               RngStream& rng);

}  // namespace semivt
