#pragma once

#include "semivt/augment.hpp"
#include "semivt/model.hpp"
#include "semivt/synthdata.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace semivt {

struct PredictionTrack {
  std::string video_id;
  std::vector<int> predicted;
  std::vector<float> confidence;

  Index size() const { return static_cast<Index>(predicted.size()); }
};

/// Causal sliding-window inference: the prediction at t sees frames 0..t only.
/// With `use_tcn`, the TCN head refines the running sequence of embeddings.
PredictionTrack online_predict(const Architecture& arch, const ParameterSet<float>& params,
                               std::span<const Frame> frames, const Normalization& norm, bool use_tcn,
                               std::string video_id = {});

struct PhaseMetrics {
  bool present = false;  // in ground truth or prediction
  double precision = 0, recall = 0, jaccard = 0, f1 = 0;
};

struct VideoMetrics {
  std::string video_id;
  double accuracy = 0;
  // Means over the phases present in the video.
  double precision = 0, recall = 0, jaccard = 0, f1 = 0;
  std::vector<PhaseMetrics> phases;
};

struct MeanStd {
  double mean = 0;
  double std = 0;  // population standard deviation across videos
};

struct MetricsReport {
  int num_classes = 0;
  std::vector<VideoMetrics> videos;
  MeanStd accuracy, precision, recall, jaccard, f1;
  /// Mean F1 of each phase over the videos where it is present; NaN-free:
  /// phases never present get 0 and phase_videos 0.
  std::vector<double> phase_f1;
  std::vector<int> phase_videos;
  std::string absent_phase_rule = "exclude_absent_in_gt_and_prediction";
  std::string zero_division = "zero";
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

/// Per-video confusion-matrix metrics and their mean/std across videos.
MetricsReport compute_metrics(const std::vector<PredictionTrack>& tracks, const std::vector<std::vector<int>>& truth,
                              int num_classes);

/// CSV `frame,gt_phase,pred_phase`; with a non-empty `image`, also a binary
/// PPM ribbon (ground truth band above prediction band, `scale` px per frame).
void export_ribbon(const PredictionTrack& track, const std::vector<int>& truth, const std::filesystem::path& csv,
                   const std::filesystem::path& image = {}, int scale = 2);

struct RibbonRows {
  std::vector<int> truth;
  std::vector<int> predicted;
};
RibbonRows read_ribbon(const std::filesystem::path& csv);

}  // namespace semivt
