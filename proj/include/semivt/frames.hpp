#pragma once

#include "semivt/common.hpp"

#include <span>
#include <vector>

namespace semivt {

/// T frames in chronological order, query frame last.
struct FrameWindow {
  std::vector<Frame> frames;
  Index query_index = 0;
};

/// Length-embed_dim class-token embedding.
template <typename Scalar>
struct FeatureEmbedding {
  Vector<Scalar> vector;
  bool normalized = false;
};

/// Probability vector over the phases.
template <typename Scalar>
struct PhaseDistribution {
  Vector<Scalar> probs;

  Index argmax() const {
    Index best = 0;
    for (Index i = 1; i < probs.size(); ++i) {
      if (probs(i) > probs(best)) best = i;
    }
    return best;
  }
  Scalar max() const { return probs.maxCoeff(); }
};

/// Unit-norm copy of `f`. A zero vector is returned unchanged.
template <typename Scalar>
FeatureEmbedding<Scalar> normalize(const FeatureEmbedding<Scalar>& f) {
  const Scalar n = f.vector.norm();
  if (n == Scalar(0)) return {f.vector, true};
  return {f.vector / n, true};
}

/// Back-propagates through v / |v|: returns (I - u u^T) g / |v|.
template <typename Scalar>
Vector<Scalar> normalize_backward(const Vector<Scalar>& raw, const Vector<Scalar>& grad_unit) {
  const Scalar n = raw.norm();
  if (n == Scalar(0)) return Vector<Scalar>::Zero(raw.size());
  const Vector<Scalar> u = raw / n;
  return (grad_unit - u * u.dot(grad_unit)) / n;
}

}  // namespace semivt
