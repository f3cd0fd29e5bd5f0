#pragma once

#include "semivt/common.hpp"
#include "semivt/frames.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace semivt {

/// Prototype initialisation found a class without labeled features.
class InitializationError : public Error {
 public:
  using Error::Error;
};

/// Per-class feature centroids anchoring the triplet loss.
template <typename Scalar>
struct PrototypeBank {
  Matrix<Scalar> vectors;  // num_classes x embed_dim
  double eta = 0.9;
  double margin = 0.3;
  int k_neg = 3;
  bool initialized = false;

  Index num_classes() const { return vectors.rows(); }

  void validate() const {
    if (!(eta >= 0.0 && eta < 1.0)) throw ConfigError("prototypes: eta must lie in [0, 1)");
    if (!(margin > 0.0)) throw ConfigError("prototypes: margin must be positive");
    if (k_neg < 1) throw ConfigError("prototypes: k_neg must be >= 1");
  }

  void require_initialized() const {
    if (!initialized) throw StateError("prototype bank is not initialized");
  }

  /// min(k_neg, C - 1).
  Index effective_k() const { return std::min<Index>(k_neg, num_classes() - 1); }
};

template <typename Scalar>
struct LabeledFeature {
  FeatureEmbedding<Scalar> feature;
  Index label = 0;
};

/// Row c = mean of the normalised class-c features.
template <typename Scalar>
PrototypeBank<Scalar> init_prototypes(const std::vector<LabeledFeature<Scalar>>& features, Index num_classes,
                                      double eta = 0.9, double margin = 0.3, int k_neg = 3) {
  if (features.empty()) throw InitializationError("prototype init: no labeled features");
  const Index d = features.front().feature.vector.size();
  PrototypeBank<Scalar> bank;
  bank.eta = eta;
  bank.margin = margin;
  bank.k_neg = k_neg;
  bank.validate();
  bank.vectors = Matrix<Scalar>::Zero(num_classes, d);
  std::vector<Index> counts(num_classes, 0);
  for (const auto& lf : features) {
    if (lf.label < 0 || lf.label >= num_classes) throw InputError("prototype init: label out of range");
    if (lf.feature.vector.size() != d) throw InputError("prototype init: feature lengths differ");
    bank.vectors.row(lf.label) += lf.feature.vector.transpose();
    ++counts[lf.label];
  }
  for (Index c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) throw InitializationError("prototype init: class " + std::to_string(c) + " has no labeled features");
    bank.vectors.row(c) /= Scalar(counts[c]);
  }
  bank.initialized = true;
  return bank;
}

/// The min(k, C-1) non-target classes closest to f, nearest first, lower
/// class index first on ties.
template <typename Scalar>
std::vector<Index> nearest_negatives(const FeatureEmbedding<Scalar>& f, Index y, const PrototypeBank<Scalar>& bank) {
  bank.require_initialized();
  std::vector<std::pair<Scalar, Index>> dist;
  for (Index c = 0; c < bank.num_classes(); ++c) {
    if (c != y) dist.emplace_back((bank.vectors.row(c).transpose() - f.vector).norm(), c);
  }
  std::sort(dist.begin(), dist.end());
  std::vector<Index> out;
  for (Index i = 0; i < bank.effective_k(); ++i) out.push_back(dist[i].second);
  return out;
}

template <typename Scalar>
struct TripletResult {
  Scalar loss = 0;
  Vector<Scalar> grad;  // d loss / d f
  Scalar positive_distance = 0;
  Scalar negative_distance = 0;
};

/// max(d(f, C_y) - d(f, mean of nearest negatives) + margin, 0) with its
/// gradient in f. Prototypes are constants.
template <typename Scalar>
TripletResult<Scalar> triplet_loss_with_grad(const FeatureEmbedding<Scalar>& f, Index y,
                                             const PrototypeBank<Scalar>& bank) {
  bank.require_initialized();
  if (y < 0 || y >= bank.num_classes()) throw InputError("triplet_loss: class out of range");
  const auto negs = nearest_negatives(f, y, bank);
  Vector<Scalar> neg = Vector<Scalar>::Zero(f.vector.size());
  for (Index c : negs) neg += bank.vectors.row(c).transpose();
  neg /= Scalar(negs.size());
  const Vector<Scalar> to_pos = f.vector - bank.vectors.row(y).transpose();
  const Vector<Scalar> to_neg = f.vector - neg;
  TripletResult<Scalar> r;
  r.positive_distance = to_pos.norm();
  r.negative_distance = to_neg.norm();
  const Scalar hinge = r.positive_distance - r.negative_distance + static_cast<Scalar>(bank.margin);
  r.grad = Vector<Scalar>::Zero(f.vector.size());
  if (hinge > Scalar(0)) {
    r.loss = hinge;
    if (r.positive_distance > Scalar(0)) r.grad += to_pos / r.positive_distance;
    if (r.negative_distance > Scalar(0)) r.grad -= to_neg / r.negative_distance;
  }
  return r;
}

template <typename Scalar>
Scalar triplet_loss(const FeatureEmbedding<Scalar>& f, Index y, const PrototypeBank<Scalar>& bank) {
  return triplet_loss_with_grad(f, y, bank).loss;
}

/// C_y <- eta * C_y + (1 - eta) * f.
template <typename Scalar>
void update_prototype(PrototypeBank<Scalar>& bank, Index y, const FeatureEmbedding<Scalar>& f) {
  bank.require_initialized();
  if (y < 0 || y >= bank.num_classes()) throw InputError("update_prototype: class out of range");
  if (f.vector.size() != bank.vectors.cols()) throw InputError("update_prototype: feature length mismatch");
  const Scalar eta = static_cast<Scalar>(bank.eta);
  bank.vectors.row(y) = eta * bank.vectors.row(y) + (Scalar(1) - eta) * f.vector.transpose();
}

/// FNV-1a over the prototype bytes and the initialised flag.
template <typename Scalar>
std::uint64_t state_hash(const PrototypeBank<Scalar>& bank) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  feed(bank.vectors.data(), sizeof(Scalar) * static_cast<std::size_t>(bank.vectors.size()));
  feed(&bank.initialized, sizeof(bool));
  return h;
}

}  // namespace semivt
