#pragma once

#include "semivt/augment.hpp"
#include "semivt/checkpoint.hpp"
#include "semivt/model.hpp"
#include "semivt/prototypes.hpp"
#include "semivt/step.hpp"
#include "semivt/synthdata.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace semivt {

/// Ablation rows: each mode adds one component to the previous.
enum class Mode { kSup, kTcr, kClp, kTcn };

std::string to_string(Mode m);
/// Accepts SUP|TCR|CLP|TCN as well as the long names ("SUP+TCR", ...).
Mode mode_from_string(const std::string& s);
ActiveTerms terms_for(Mode m, bool warmup);

struct TrainConfig {
  int warmup_epochs = 3;
  int semi_epochs = 12;
  int batch_size = 16;
  double base_lr = 0.005;
  std::vector<int> lr_halving_epochs{8, 12};
  double momentum = 0.9;
  double weight_decay = 0.001;
  double delta = 0.8;
  double alpha = 0.9;
  double eta = 0.9;
  double margin = 0.3;
  int k_neg = 3;
  Mode mode = Mode::kClp;
  std::uint64_t seed = 0;
  bool tri_u_student_features = false;
  AugmentPolicy weak = AugmentPolicy::weak();
  AugmentPolicy strong = AugmentPolicy::strong();

  void validate() const;
  int total_epochs() const { return warmup_epochs + semi_epochs; }
  /// base_lr halved once per listed epoch <= `epoch` (epochs count from 1).
  double lr_at(int epoch) const;

  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const LossBreakdown& l);

/// v <- momentum * v + (g + weight_decay * theta); theta <- theta - lr * v.
template <typename Scalar>
void sgd_step(ParameterSet<Scalar>& params, const ParameterSet<Scalar>& grads, ParameterSet<Scalar>& velocity,
              double lr, double momentum, double weight_decay) {
  if (!params.same_shapes(grads) || !params.same_shapes(velocity)) throw ConfigError("sgd_step: shape mismatch");
  if (auto bad = grads.first_non_finite()) throw NumericalError("non-finite gradient in tensor " + *bad);
  const auto mu = static_cast<Scalar>(momentum), wd = static_cast<Scalar>(weight_decay), eta = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = mu * velocity[i] + (grads[i] + wd * params[i]);
    params[i] -= eta * velocity[i];
  }
}

struct TrainingData {
  std::vector<LabeledVideo> labeled;
  std::vector<LabeledVideo> unlabeled;
  Normalization norm;
  int num_classes = 0;

  /// Loads train_labeled/train_unlabeled and the manifest statistics.
  static TrainingData load(const std::filesystem::path& dataset_root);
  void validate() const;
};

struct TrainState {
  ParameterSet<float> student;
  ParameterSet<float> teacher;
  ParameterSet<float> velocity;
  PrototypeBank<float> bank;
  int epoch = 0;               // completed epochs
  std::uint64_t step = 0;      // completed optimisation steps
  std::uint64_t labeled_cursor = 0;
  bool teacher_ready = false;  // warm-up finished, teacher and bank set up
};

struct StepRecord {
  int epoch = 0;
  std::uint64_t step = 0;
  LossBreakdown losses;
  std::size_t gated = 0;
  std::size_t unlabeled = 0;
  double lr = 0;

  double gate_rate() const { return unlabeled ? static_cast<double>(gated) / unlabeled : 0.0; }
};

void to_json(nlohmann::json& j, const StepRecord& r);

class Trainer {
 public:
  Trainer(const ModelConfig& model, const TrainConfig& train, const TrainingData& data);

  const Architecture& arch() const { return arch_; }
  const TrainConfig& config() const { return cfg_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  bool finished() const { return state_.epoch >= cfg_.total_epochs(); }

  /// Trains epoch state().epoch + 1.
  void run_epoch(const std::function<void(const StepRecord&)>& on_step = {});

  /// Teacher copy and prototype initialisation that close the warm-up.
  void finish_warmup();

  Archive to_archive() const;
  /// ConfigError when the archive was written for another model or run config.
  void restore(const Archive& archive);

  int steps_per_epoch(int epoch) const;

 private:
  struct LabeledRef {
    std::size_t video;
    Index frame;
  };
  LabeledRef labeled_at(std::uint64_t position);
  StepRecord train_step(int epoch, std::span<const LabeledRef> unlabeled);
  std::vector<LabeledRef> unlabeled_order(int epoch) const;

  Architecture arch_;
  TrainConfig cfg_;
  const TrainingData& data_;
  std::vector<LabeledRef> labeled_frames_;
  std::vector<LabeledRef> unlabeled_frames_;
  std::uint64_t cached_cycle_ = ~0ull;
  std::vector<std::size_t> cycle_perm_;
  TrainState state_;
};

struct RunOptions {
  std::filesystem::path run_dir;
  bool resume = false;
  /// Stop after this epoch (simulates an interrupted run); 0 runs to the end.
  int stop_after_epoch = 0;
  /// Extra fields recorded in config.json.
  nlohmann::json run_info = nlohmann::json::object();
  std::function<void(const StepRecord&)> on_step;
};

/// Full run: config.json, metrics.jsonl, checkpoints/epoch_N.ckpt and
/// final/teacher.ckpt under run_dir. With `resume`, continues from the newest
/// epoch checkpoint.
TrainState train_run(const ModelConfig& model, const TrainConfig& train, const TrainingData& data,
                     const RunOptions& options);

/// Model config and teacher parameters of a checkpoint (the deliverable model).
struct LoadedModel {
  ModelConfig config;
  ParameterSet<float> params;
  Normalization norm;
};
LoadedModel load_model(const std::filesystem::path& checkpoint, bool use_student = false);

}  // namespace semivt
