#pragma once

// Multi-stage causal TCN refinement head. Each stage maps its input to
// tcn_channels, applies tcn_levels residual layers of a two-tap causal
// convolution (taps t and t - 2^level), and projects to phase logits. Later
// stages consume the softmax of the previous stage. One stage therefore sees
// exactly 2^levels - 1 past positions.

#include "semivt/common.hpp"
#include "semivt/frames.hpp"
#include "semivt/layers.hpp"
#include "semivt/model.hpp"

#include <vector>

namespace semivt {

template <typename Scalar>
struct TcnLevelCache {
  Matrix<Scalar> input, pre, act;
};

template <typename Scalar>
struct TcnStageCache {
  Matrix<Scalar> input;
  Matrix<Scalar> probs_in;  // softmax of the previous stage; empty for stage 0
  std::vector<TcnLevelCache<Scalar>> levels;
  Matrix<Scalar> hidden;
};

template <typename Scalar>
struct TcnCache {
  std::vector<TcnStageCache<Scalar>> stages;
};

namespace detail {

/// Rows shifted down by `lag`: out[t] = x[t - lag], zero for t < lag.
template <typename Scalar>
Matrix<Scalar> delay_rows(const Matrix<Scalar>& x, Index lag) {
  Matrix<Scalar> out = Matrix<Scalar>::Zero(x.rows(), x.cols());
  if (lag < x.rows()) out.bottomRows(x.rows() - lag) = x.topRows(x.rows() - lag);
  return out;
}

/// Adjoint of delay_rows: out[t] = x[t + lag].
template <typename Scalar>
Matrix<Scalar> advance_rows(const Matrix<Scalar>& x, Index lag) {
  Matrix<Scalar> out = Matrix<Scalar>::Zero(x.rows(), x.cols());
  if (lag < x.rows()) out.topRows(x.rows() - lag) = x.bottomRows(x.rows() - lag);
  return out;
}

}  // namespace detail

/// Per-stage logits (sequence length x classes) for a chronological feature
/// matrix (one row per frame).
template <typename Scalar>
std::vector<Matrix<Scalar>> tcn_forward(const Architecture& arch, const Matrix<Scalar>& features,
                                        const ParameterSet<Scalar>& params, TcnCache<Scalar>* cache = nullptr) {
  if (!arch.config.tcn_head) throw ConfigError("model has no tcn head");
  if (features.rows() == 0) throw InputError("tcn_refine needs a non-empty feature sequence");
  if (features.cols() != arch.config.embed_dim) throw ConfigError("tcn input width does not match embed_dim");
  std::vector<Matrix<Scalar>> logits;
  if (cache) cache->stages.assign(arch.layout.tcn.size(), {});
  Matrix<Scalar> input = features;
  for (std::size_t s = 0; s < arch.layout.tcn.size(); ++s) {
    const TcnStageSlots& st = arch.layout.tcn[s];
    Matrix<Scalar> probs_in;
    if (s > 0) {
      probs_in = logits.back();
      layers::softmax_rows(probs_in);
      input = probs_in;
    }
    Matrix<Scalar> h = layers::affine(input, params[st.in_weight], params[st.in_bias]);
    std::vector<TcnLevelCache<Scalar>> level_caches;
    for (std::size_t l = 0; l < st.levels.size(); ++l) {
      const TcnLevelSlots& lv = st.levels[l];
      const Index lag = Index(1) << l;
      Matrix<Scalar> pre = h * params[lv.conv_now] + detail::delay_rows(h, lag) * params[lv.conv_past];
      pre.rowwise() += params[lv.conv_bias].row(0);
      Matrix<Scalar> act = pre.cwiseMax(Scalar(0));
      Matrix<Scalar> next = h + layers::affine(act, params[lv.mix_weight], params[lv.mix_bias]);
      if (cache) level_caches.push_back({std::move(h), std::move(pre), std::move(act)});
      h = std::move(next);
    }
    logits.push_back(layers::affine(h, params[st.out_weight], params[st.out_bias]));
    if (cache) {
      auto& sc = cache->stages[s];
      sc.input = s == 0 ? features : Matrix<Scalar>();
      sc.probs_in = std::move(probs_in);
      sc.levels = std::move(level_caches);
      sc.hidden = std::move(h);
    }
  }
  return logits;
}

/// Back-propagates per-stage logit gradients; returns d(loss)/d(features).
template <typename Scalar>
Matrix<Scalar> tcn_backward(const Architecture& arch, const TcnCache<Scalar>& cache, const ParameterSet<Scalar>& params,
                            std::vector<Matrix<Scalar>> dlogits, ParameterSet<Scalar>& grads) {
  Matrix<Scalar> dfeatures;
  for (std::size_t s = arch.layout.tcn.size(); s-- > 0;) {
    const TcnStageSlots& st = arch.layout.tcn[s];
    const TcnStageCache<Scalar>& sc = cache.stages[s];
    Matrix<Scalar> dh = layers::affine_backward(sc.hidden, params[st.out_weight], dlogits[s], grads[st.out_weight],
                                                grads[st.out_bias]);
    for (std::size_t l = st.levels.size(); l-- > 0;) {
      const TcnLevelSlots& lv = st.levels[l];
      const TcnLevelCache<Scalar>& lc = sc.levels[l];
      const Index lag = Index(1) << l;
      const Matrix<Scalar> dact =
          layers::affine_backward(lc.act, params[lv.mix_weight], dh, grads[lv.mix_weight], grads[lv.mix_bias]);
      const Matrix<Scalar> dpre = (dact.array() * (lc.pre.array() > Scalar(0)).template cast<Scalar>()).matrix();
      grads[lv.conv_now].noalias() += lc.input.transpose() * dpre;
      grads[lv.conv_past].noalias() += detail::delay_rows(lc.input, lag).transpose() * dpre;
      grads[lv.conv_bias].row(0) += dpre.colwise().sum();
      dh += dpre * params[lv.conv_now].transpose();
      dh += detail::advance_rows(Matrix<Scalar>(dpre * params[lv.conv_past].transpose()), lag);
    }
    const Matrix<Scalar>& input = s == 0 ? sc.input : sc.probs_in;
    const Matrix<Scalar> dinput =
        layers::affine_backward(input, params[st.in_weight], dh, grads[st.in_weight], grads[st.in_bias]);
    if (s == 0) {
      dfeatures = dinput;
    } else {
      const Matrix<Scalar>& p = sc.probs_in;
      const Vector<Scalar> inner = (dinput.array() * p.array()).rowwise().sum();
      dlogits[s - 1] += (p.array() * (dinput.array().colwise() - inner.array())).matrix();
    }
  }
  return dfeatures;
}

/// Refined phase distributions (final stage) for a chronological sequence of
/// raw embeddings from one video.
template <typename Scalar>
std::vector<PhaseDistribution<Scalar>> tcn_refine(const Architecture& arch,
                                                  const std::vector<FeatureEmbedding<Scalar>>& features,
                                                  const ParameterSet<Scalar>& params) {
  if (features.empty()) throw InputError("tcn_refine needs a non-empty feature sequence");
  Matrix<Scalar> x(static_cast<Index>(features.size()), arch.config.embed_dim);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].vector.size() != arch.config.embed_dim) throw ConfigError("tcn input width does not match embed_dim");
    x.row(static_cast<Index>(i)) = features[i].vector.transpose();
  }
  const auto logits = tcn_forward(arch, x, params);
  std::vector<PhaseDistribution<Scalar>> out;
  out.reserve(features.size());
  for (Index t = 0; t < x.rows(); ++t) out.push_back(softmax<Scalar>(logits.back().row(t).transpose()));
  return out;
}

}  // namespace semivt
