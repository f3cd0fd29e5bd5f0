#pragma once

// One optimisation step of the teacher-student objective on already
// augmented windows: losses, pseudo-labels, prototype updates and the student
// gradient. Templated on the scalar so the gradient can be checked in double.

#include "semivt/frames.hpp"
#include "semivt/model.hpp"
#include "semivt/prototypes.hpp"
#include "semivt/pseudo.hpp"
#include "semivt/tcn.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace semivt {

struct LossBreakdown {
  double l_sup = 0;
  double l_reg = 0;
  double l_tri_l = 0;
  double l_tri_u = 0;
  double l_total = 0;
};

struct ActiveTerms {
  bool sup = true;
  bool reg = false;
  bool tri_l = false;
  bool tri_u = false;

  bool any_unlabeled() const { return reg || tri_u; }
};

struct StepOptions {
  ActiveTerms terms;
  GateConfig gate;
  /// L_Tri-U on student strong-view features instead of teacher features.
  bool tri_u_student_features = false;
  bool update_bank = true;
  /// Labeled windows are consecutive frames of one video; adds the TCN loss
  /// when the model has a TCN head.
  bool labeled_clip = false;
};

struct StepInputs {
  std::vector<FrameWindow> labeled;
  std::vector<Index> labels;
  std::vector<FrameWindow> unlabeled_weak;
  /// Strong view of unlabeled sample i; only called for gated samples.
  std::function<FrameWindow(std::size_t)> unlabeled_strong;
};

template <typename Scalar>
struct StepOutput {
  LossBreakdown losses;
  ParameterSet<Scalar> grads;
  std::size_t gated = 0;
  std::size_t unlabeled = 0;
};

template <typename Scalar>
StepOutput<Scalar> compute_step(const Architecture& arch, const ParameterSet<Scalar>& student,
                                const ParameterSet<Scalar>* teacher, PrototypeBank<Scalar>* bank,
                                const StepInputs& in, const StepOptions& opt) {
  const ActiveTerms& on = opt.terms;
  if ((on.tri_l || on.tri_u) && !bank) throw StateError("triplet terms need a prototype bank");
  if (on.any_unlabeled() && !teacher && !in.unlabeled_weak.empty()) throw StateError("unlabeled terms need a teacher");
  if (in.labeled.size() != in.labels.size()) throw InputError("labeled windows and labels differ in count");

  StepOutput<Scalar> out;
  out.grads = student.zeros_like();
  LossBreakdown& L = out.losses;

  // Labeled pass. Forward everything first so the TCN can see the whole clip.
  const std::size_t n_l = in.labeled.size();
  if (n_l > 0 && (on.sup || on.tri_l)) {
    const Scalar inv = Scalar(1) / Scalar(n_l);
    std::vector<EncoderCache<Scalar>> caches(n_l);
    std::vector<FeatureEmbedding<Scalar>> feats(n_l);
    std::vector<Vector<Scalar>> dfeat(n_l);
    for (std::size_t i = 0; i < n_l; ++i) {
      feats[i] = encode(arch, in.labeled[i], student, &caches[i]);
      const Index y = in.labels[i];
      dfeat[i] = Vector<Scalar>::Zero(feats[i].vector.size());
      if (on.sup) {
        const auto p = classify(arch, feats[i], student);
        L.l_sup += static_cast<double>(cross_entropy(p, y) * inv);
        dfeat[i] += classify_backward(arch, feats[i].vector, student, cross_entropy_logit_grad(p, y, inv), out.grads);
      }
      if (on.tri_l) {
        const auto unit = normalize(feats[i]);
        const auto tri = triplet_loss_with_grad(unit, y, *bank);
        L.l_tri_l += static_cast<double>(tri.loss * inv);
        dfeat[i] += normalize_backward<Scalar>(feats[i].vector, tri.grad * inv);
        if (opt.update_bank) update_prototype(*bank, y, unit);
      }
    }
    if (on.sup && opt.labeled_clip && arch.config.tcn_head) {
      Matrix<Scalar> x(static_cast<Index>(n_l), arch.config.embed_dim);
      for (std::size_t i = 0; i < n_l; ++i) x.row(static_cast<Index>(i)) = feats[i].vector.transpose();
      TcnCache<Scalar> tc;
      const auto logits = tcn_forward(arch, x, student, &tc);
      std::vector<Matrix<Scalar>> dlogits;
      for (const auto& stage : logits) {
        Matrix<Scalar> d(stage.rows(), stage.cols());
        for (Index t = 0; t < stage.rows(); ++t) {
          const auto p = softmax<Scalar>(stage.row(t).transpose());
          L.l_sup += static_cast<double>(cross_entropy(p, in.labels[t]) * inv);
          d.row(t) = cross_entropy_logit_grad(p, in.labels[t], inv).transpose();
        }
        dlogits.push_back(std::move(d));
      }
      const Matrix<Scalar> dx = tcn_backward(arch, tc, student, dlogits, out.grads);
      for (std::size_t i = 0; i < n_l; ++i) dfeat[i] += dx.row(static_cast<Index>(i)).transpose();
    }
    for (std::size_t i = 0; i < n_l; ++i) encode_backward(arch, caches[i], student, dfeat[i], out.grads);
  }

  // Unlabeled pass: teacher weak view -> gate -> student strong view.
  const std::size_t n_u = in.unlabeled_weak.size();
  out.unlabeled = n_u;
  if (n_u > 0 && on.any_unlabeled()) {
    const Scalar inv = Scalar(1) / Scalar(n_u);
    for (std::size_t j = 0; j < n_u; ++j) {
      const auto ft = encode(arch, in.unlabeled_weak[j], *teacher);
      const auto pl = confidence_gate(classify(arch, ft, *teacher), opt.gate, normalize(ft));
      if (!pl) continue;
      ++out.gated;
      const Index y = pl->class_index;
      const bool need_student = on.reg || (on.tri_u && opt.tri_u_student_features);
      if (!need_student) {
        const auto tri = triplet_loss_with_grad(pl->teacher_feature, y, *bank);
        L.l_tri_u += static_cast<double>(tri.loss * inv);
        if (opt.update_bank) update_prototype(*bank, y, pl->teacher_feature);
        continue;
      }
      EncoderCache<Scalar> cache;
      const auto fs = encode(arch, in.unlabeled_strong(j), student, &cache);
      Vector<Scalar> dfeat = Vector<Scalar>::Zero(fs.vector.size());
      if (on.reg) {
        const auto p = classify(arch, fs, student);
        L.l_reg += static_cast<double>(cross_entropy(p, y) * inv);
        dfeat += classify_backward(arch, fs.vector, student, cross_entropy_logit_grad(p, y, inv), out.grads);
      }
      if (on.tri_u) {
        const auto unit = opt.tri_u_student_features ? normalize(fs) : pl->teacher_feature;
        const auto tri = triplet_loss_with_grad(unit, y, *bank);
        L.l_tri_u += static_cast<double>(tri.loss * inv);
        if (opt.tri_u_student_features) dfeat += normalize_backward<Scalar>(fs.vector, tri.grad * inv);
        if (opt.update_bank) update_prototype(*bank, y, unit);
      }
      encode_backward(arch, cache, student, dfeat, out.grads);
    }
  }

  L.l_total = L.l_sup + L.l_reg + L.l_tri_l + L.l_tri_u;
  return out;
}

}  // namespace semivt
