#pragma once

// Synthetic surgical-workflow videos: a semi-Markov phase chain rendered as
// textured frames. One pair of phases shares its appearance and differs only
// in the direction of a slow brightness ramp, so telling them apart needs
// temporal context.

#include "semivt/augment.hpp"
#include "semivt/common.hpp"
#include "semivt/rng.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace semivt {

enum class Pattern { kHorizontalStripes, kVerticalStripes, kChecker, kRings, kDiagonal, kBlob };

struct RenderSpec {
  Pattern pattern = Pattern::kHorizontalStripes;
  double intensity = 0.5;
  double frequency = 2.0;  // cycles per frame side

  bool operator==(const RenderSpec&) const = default;
};

struct WorkflowModel {
  int num_phases = 5;
  Matrix<double> transitions;      // row-stochastic, zero diagonal
  std::vector<double> dwell_mean;  // frames per visit
  int dwell_shape = 6;             // negative-binomial dispersion
  std::vector<RenderSpec> render;
  std::vector<double> ramp;  // signed brightness change across one visit
  std::vector<std::pair<int, int>> ambiguous_pairs;
  double pattern_amplitude = 0.25;
  double noise_sigma = 0.05;
  double brightness_jitter = 0.12;  // per-video offset, uniform +-
  double contrast_jitter = 0.3;     // per-video gain 1 +- this
  int initial_phase = 0;
  int frame_size = 32;
  int channels = 1;

  void validate() const;

  /// Forward chain with occasional revisits; phases 1 and C-2 (or 0 and C-1
  /// for C < 4) form the ambiguous pair.
  static WorkflowModel standard(int num_phases = 5, int frame_size = 32);
};

void to_json(nlohmann::json& j, const WorkflowModel& m);
void from_json(const nlohmann::json& j, WorkflowModel& m);

struct LabeledVideo {
  std::string id;
  std::vector<Frame> frames;
  std::vector<int> labels;
  double fps = 1.0;

  Index size() const { return static_cast<Index>(frames.size()); }
};

/// Visit length >= 1 with mean dwell_mean[phase].
int sample_dwell(const WorkflowModel& model, int phase, RngStream& rng);

/// Samples a phase sequence of `length` frames and renders it.
LabeledVideo generate_video(const WorkflowModel& model, Index length, RngStream& rng, std::string id = {});

/// Per-channel mean and (population) standard deviation over all frames.
Normalization dataset_statistics(const std::vector<LabeledVideo>& videos);

void save_video(const LabeledVideo& video, const std::filesystem::path& dir);
LabeledVideo load_video(const std::filesystem::path& dir);

struct BenchmarkConfig {
  std::uint64_t seed = 0;
  int train_videos = 24;
  int val_videos = 6;
  int test_videos = 10;
  double labeled_fraction = 0.1;
  int min_length = 150;
  int max_length = 250;
  int num_phases = 5;
  int frame_size = 32;

  void validate() const;
};

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names{"train_labeled", "train_unlabeled", "val", "test"};
  return names;
}

/// Generates the benchmark tree under `root` and returns its manifest.
nlohmann::json make_benchmark(const BenchmarkConfig& cfg, const std::filesystem::path& root);

/// FNV-1a of the canonical manifest text.
std::string manifest_hash(const nlohmann::json& manifest);

nlohmann::json load_manifest(const std::filesystem::path& root);

/// Videos of one split in manifest order; empty when the split is absent.
std::vector<LabeledVideo> load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace semivt
