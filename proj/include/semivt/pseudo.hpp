#pragma once

#include "semivt/common.hpp"
#include "semivt/frames.hpp"
#include "semivt/model.hpp"
#include "semivt/parameters.hpp"

#include <optional>
#include <string>
#include <vector>

namespace semivt {

/// Confidence threshold on the teacher's max class probability.
struct GateConfig {
  double delta = 0.8;

  void validate() const {
    if (!(delta >= 0.0 && delta <= 1.0)) throw ConfigError("gate: delta must lie in [0, 1]");
  }
  static GateConfig cholec80() { return {0.8}; }
  static GateConfig ramie() { return {0.6}; }
};

template <typename Scalar>
struct PseudoLabel {
  Index class_index = 0;
  Scalar confidence = 0;
  FeatureEmbedding<Scalar> teacher_feature;
};

/// Teacher EMA rate.
struct EmaConfig {
  double alpha = 0.9;

  void validate() const {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("ema: alpha must lie in [0, 1)");
  }
};

/// Pseudo-label when max(p) >= delta; the argmax prefers the lowest index on ties.
template <typename Scalar>
std::optional<PseudoLabel<Scalar>> confidence_gate(const PhaseDistribution<Scalar>& teacher, const GateConfig& cfg,
                                                   FeatureEmbedding<Scalar> teacher_feature = {}) {
  const Index c = teacher.argmax();
  const Scalar conf = teacher.probs(c);
  if (static_cast<double>(conf) < cfg.delta) return std::nullopt;
  return PseudoLabel<Scalar>{c, conf, std::move(teacher_feature)};
}

/// (1/N_U) * sum over gated samples of -log p_student[pseudo class].
template <typename Scalar>
Scalar consistency_loss(const std::vector<PhaseDistribution<Scalar>>& student,
                        const std::vector<std::optional<PseudoLabel<Scalar>>>& pseudo, std::size_t batch_size) {
  if (student.size() != pseudo.size() || student.size() != batch_size) {
    throw InputError("consistency_loss: " + std::to_string(student.size()) + " student predictions, " +
                     std::to_string(pseudo.size()) + " pseudo-labels, batch size " + std::to_string(batch_size));
  }
  Scalar total = 0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    if (pseudo[i]) total += cross_entropy(student[i], pseudo[i]->class_index);
  }
  return batch_size == 0 ? Scalar(0) : total / Scalar(batch_size);
}

/// teacher <- alpha * teacher + (1 - alpha) * student, tensor by tensor.
template <typename Scalar>
void ema_update(ParameterSet<Scalar>& teacher, const ParameterSet<Scalar>& student, const EmaConfig& cfg) {
  cfg.validate();
  if (!teacher.same_shapes(student)) throw ConfigError("ema_update: teacher and student shapes differ");
  const Scalar a = static_cast<Scalar>(cfg.alpha);
  const Scalar b = static_cast<Scalar>(1.0 - cfg.alpha);
  for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = a * teacher[i] + b * student[i];
}

}  // namespace semivt
