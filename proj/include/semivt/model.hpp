#pragma once

// Divided space-time attention video encoder, linear phase classifier.
//
// Token matrix layout: frame t owns rows [t*(P+1), (t+1)*(P+1)); the first
// row of each frame is that frame's copy of the class token, the remaining P
// rows are patch tokens in raster order. Temporal attention groups the rows
// sharing a position across frames (class copies included); spatial attention
// groups the rows of one frame.

#include "semivt/common.hpp"
#include "semivt/frames.hpp"
#include "semivt/layers.hpp"
#include "semivt/model_config.hpp"
#include "semivt/parameters.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace semivt {

/// Config plus derived tensor layout and attention groupings.
struct Architecture {
  ModelConfig config;
  ModelLayout layout;
  std::vector<layers::TokenGroup> temporal_groups;
  std::vector<layers::TokenGroup> spatial_groups;

  explicit Architecture(const ModelConfig& cfg) : config(cfg), layout(make_layout(cfg)) {
    const Index stride = cfg.patches_per_frame() + 1;
    for (Index j = 0; j < stride; ++j) temporal_groups.push_back({j, cfg.window_len, stride});
    for (Index t = 0; t < cfg.window_len; ++t) spatial_groups.push_back({t * stride, stride, 1});
  }

  template <typename Scalar>
  void check(const ParameterSet<Scalar>& params) const {
    if (params.size() != layout.specs.size()) {
      throw ConfigError("parameter set has " + std::to_string(params.size()) + " tensors, model expects " +
                        std::to_string(layout.specs.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& s = layout.specs[i];
      if (params.name(i) != s.name || params[i].rows() != s.rows || params[i].cols() != s.cols) {
        throw ConfigError("parameter tensor " + params.name(i) + " does not match model tensor " + s.name);
      }
    }
  }
};

/// Rearranges a window into (T * P) x patch_dim rows, channel-major within a patch.
template <typename Scalar>
Matrix<Scalar> patchify(const ModelConfig& cfg, const FrameWindow& w) {
  if (static_cast<int>(w.frames.size()) != cfg.window_len) {
    throw ConfigError("window has " + std::to_string(w.frames.size()) + " frames, model expects " +
                      std::to_string(cfg.window_len));
  }
  const int ps = cfg.patch_size, side = cfg.patches_per_side(), fs = cfg.frame_size;
  const int per_frame = cfg.patches_per_frame();
  Matrix<Scalar> out(static_cast<Index>(cfg.window_len) * per_frame, cfg.patch_dim());
  for (int t = 0; t < cfg.window_len; ++t) {
    const Frame& f = w.frames[t];
    if (f.rows() != cfg.channels || f.cols() != static_cast<Index>(fs) * fs) {
      throw ConfigError("frame " + std::to_string(t) + " has shape " + std::to_string(f.rows()) + "x" +
                        std::to_string(f.cols()) + ", model expects " + std::to_string(cfg.channels) + "x" +
                        std::to_string(fs * fs));
    }
    for (int py = 0; py < side; ++py) {
      for (int px = 0; px < side; ++px) {
        const Index row = static_cast<Index>(t) * per_frame + py * side + px;
        Index col = 0;
        for (int c = 0; c < cfg.channels; ++c) {
          for (int dy = 0; dy < ps; ++dy) {
            for (int dx = 0; dx < ps; ++dx) {
              out(row, col++) = static_cast<Scalar>(f(c, (py * ps + dy) * fs + px * ps + dx));
            }
          }
        }
      }
    }
  }
  return out;
}

/// Inverse of patchify for gradients: returns T frames of channels x (H*W).
template <typename Scalar>
std::vector<Matrix<Scalar>> unpatchify(const ModelConfig& cfg, const Matrix<Scalar>& patches) {
  const int ps = cfg.patch_size, side = cfg.patches_per_side(), fs = cfg.frame_size;
  const int per_frame = cfg.patches_per_frame();
  std::vector<Matrix<Scalar>> frames(cfg.window_len, Matrix<Scalar>::Zero(cfg.channels, fs * fs));
  for (int t = 0; t < cfg.window_len; ++t) {
    for (int py = 0; py < side; ++py) {
      for (int px = 0; px < side; ++px) {
        const Index row = static_cast<Index>(t) * per_frame + py * side + px;
        Index col = 0;
        for (int c = 0; c < cfg.channels; ++c) {
          for (int dy = 0; dy < ps; ++dy) {
            for (int dx = 0; dx < ps; ++dx) frames[t](c, (py * ps + dy) * fs + px * ps + dx) = patches(row, col++);
          }
        }
      }
    }
  }
  return frames;
}

template <typename Scalar>
struct BlockCache {
  layers::LayerNormCache<Scalar> ln_t, ln_s, ln_m;
  layers::AttentionCache<Scalar> attn_t, attn_s;
  Matrix<Scalar> mlp_in, mlp_pre, mlp_act;
};

/// Activations kept by encode() for encode_backward().
template <typename Scalar>
struct EncoderCache {
  Matrix<Scalar> patches;
  std::vector<BlockCache<Scalar>> blocks;
  layers::LayerNormCache<Scalar> final_ln;
};

/// Class-token embedding of `window` (unnormalised). Pass a cache to enable
/// encode_backward.
template <typename Scalar>
FeatureEmbedding<Scalar> encode(const Architecture& arch, const FrameWindow& window,
                                const ParameterSet<Scalar>& params, EncoderCache<Scalar>* cache = nullptr) {
  arch.check(params);
  const ModelConfig& cfg = arch.config;
  const ModelLayout& L = arch.layout;
  const Index per_frame = cfg.patches_per_frame();
  const Index stride = per_frame + 1;
  const Index d = cfg.embed_dim;

  Matrix<Scalar> patches = patchify<Scalar>(cfg, window);
  const Matrix<Scalar> embedded = layers::affine(patches, params[L.patch_weight], params[L.patch_bias]);
  const Matrix<Scalar>& pos_s = params[L.pos_spatial];
  const Matrix<Scalar>& pos_t = params[L.pos_temporal];

  Matrix<Scalar> x(cfg.num_tokens(), d);
  for (Index t = 0; t < cfg.window_len; ++t) {
    x.row(t * stride) = params[L.cls_token].row(0) + pos_s.row(0) + pos_t.row(t);
    x.middleRows(t * stride + 1, per_frame) = embedded.middleRows(t * per_frame, per_frame) + pos_s.bottomRows(per_frame);
    x.middleRows(t * stride + 1, per_frame).rowwise() += pos_t.row(t);
  }

  if (cache) cache->blocks.resize(L.blocks.size());
  for (std::size_t b = 0; b < L.blocks.size(); ++b) {
    const BlockSlots& s = L.blocks[b];
    BlockCache<Scalar>* bc = cache ? &cache->blocks[b] : nullptr;
    {
      const Matrix<Scalar> h = layers::layer_norm(x, params[s.ln_t_gamma], params[s.ln_t_beta], bc ? &bc->ln_t : nullptr);
      x += layers::grouped_attention(h, params[s.qkv_t_weight], params[s.qkv_t_bias], params[s.proj_t_weight],
                                     params[s.proj_t_bias], arch.temporal_groups, cfg.heads,
                                     bc ? &bc->attn_t : nullptr);
    }
    {
      const Matrix<Scalar> h = layers::layer_norm(x, params[s.ln_s_gamma], params[s.ln_s_beta], bc ? &bc->ln_s : nullptr);
      x += layers::grouped_attention(h, params[s.qkv_s_weight], params[s.qkv_s_bias], params[s.proj_s_weight],
                                     params[s.proj_s_bias], arch.spatial_groups, cfg.heads,
                                     bc ? &bc->attn_s : nullptr);
    }
    {
      Matrix<Scalar> h = layers::layer_norm(x, params[s.ln_m_gamma], params[s.ln_m_beta], bc ? &bc->ln_m : nullptr);
      Matrix<Scalar> pre = layers::affine(h, params[s.fc1_weight], params[s.fc1_bias]);
      Matrix<Scalar> act = layers::gelu(pre);
      x += layers::affine(act, params[s.fc2_weight], params[s.fc2_bias]);
      if (bc) {
        bc->mlp_in = std::move(h);
        bc->mlp_pre = std::move(pre);
        bc->mlp_act = std::move(act);
      }
    }
  }

  const Matrix<Scalar> cls = x(Eigen::seqN(0, cfg.window_len, stride), Eigen::all);
  const Matrix<Scalar> normed =
      layers::layer_norm(cls, params[L.norm_gamma], params[L.norm_beta], cache ? &cache->final_ln : nullptr);
  if (cache) cache->patches = std::move(patches);
  return {normed.colwise().mean().transpose(), false};
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(feature).
/// When `input_grad` is non-null it receives d(loss)/d(frames), one
/// channels x (H*W) matrix per window frame.
template <typename Scalar>
void encode_backward(const Architecture& arch, const EncoderCache<Scalar>& cache, const ParameterSet<Scalar>& params,
                     const Vector<Scalar>& dfeature, ParameterSet<Scalar>& grads,
                     std::vector<Matrix<Scalar>>* input_grad = nullptr) {
  const ModelConfig& cfg = arch.config;
  const ModelLayout& L = arch.layout;
  const Index per_frame = cfg.patches_per_frame();
  const Index stride = per_frame + 1;
  const Index T = cfg.window_len;

  Matrix<Scalar> dnormed(T, cfg.embed_dim);
  dnormed.rowwise() = dfeature.transpose() / Scalar(T);
  const Matrix<Scalar> dcls =
      layers::layer_norm_backward(cache.final_ln, params[L.norm_gamma], dnormed, grads[L.norm_gamma], grads[L.norm_beta]);
  Matrix<Scalar> dx = Matrix<Scalar>::Zero(cfg.num_tokens(), cfg.embed_dim);
  dx(Eigen::seqN(0, T, stride), Eigen::all) = dcls;

  for (std::size_t bi = L.blocks.size(); bi-- > 0;) {
    const BlockSlots& s = L.blocks[bi];
    const BlockCache<Scalar>& bc = cache.blocks[bi];
    {
      const Matrix<Scalar> dact = layers::affine_backward(bc.mlp_act, params[s.fc2_weight], dx, grads[s.fc2_weight],
                                                          grads[s.fc2_bias]);
      const Matrix<Scalar> dpre =
          (dact.array() * layers::gelu_grad(bc.mlp_pre).array()).matrix();
      const Matrix<Scalar> dh =
          layers::affine_backward(bc.mlp_in, params[s.fc1_weight], dpre, grads[s.fc1_weight], grads[s.fc1_bias]);
      dx += layers::layer_norm_backward(bc.ln_m, params[s.ln_m_gamma], dh, grads[s.ln_m_gamma], grads[s.ln_m_beta]);
    }
    {
      const Matrix<Scalar> dh = layers::grouped_attention_backward<Scalar>(
          bc.attn_s, params[s.qkv_s_weight], params[s.proj_s_weight], arch.spatial_groups, cfg.heads, dx,
          {grads[s.qkv_s_weight], grads[s.qkv_s_bias], grads[s.proj_s_weight], grads[s.proj_s_bias]});
      dx += layers::layer_norm_backward(bc.ln_s, params[s.ln_s_gamma], dh, grads[s.ln_s_gamma], grads[s.ln_s_beta]);
    }
    {
      const Matrix<Scalar> dh = layers::grouped_attention_backward<Scalar>(
          bc.attn_t, params[s.qkv_t_weight], params[s.proj_t_weight], arch.temporal_groups, cfg.heads, dx,
          {grads[s.qkv_t_weight], grads[s.qkv_t_bias], grads[s.proj_t_weight], grads[s.proj_t_bias]});
      dx += layers::layer_norm_backward(bc.ln_t, params[s.ln_t_gamma], dh, grads[s.ln_t_gamma], grads[s.ln_t_beta]);
    }
  }

  Matrix<Scalar> dembedded(T * per_frame, cfg.embed_dim);
  for (Index t = 0; t < T; ++t) {
    const auto frame_rows = dx.middleRows(t * stride, stride);
    grads[L.cls_token].row(0) += frame_rows.row(0);
    grads[L.pos_temporal].row(t) += frame_rows.colwise().sum();
    grads[L.pos_spatial] += frame_rows;
    dembedded.middleRows(t * per_frame, per_frame) = frame_rows.bottomRows(per_frame);
  }
  const Matrix<Scalar> dpatches = layers::affine_backward(cache.patches, params[L.patch_weight], dembedded,
                                                          grads[L.patch_weight], grads[L.patch_bias]);
  if (input_grad) *input_grad = unpatchify(cfg, dpatches);
}

/// Classifier logits for a raw class-token embedding.
template <typename Scalar>
Vector<Scalar> classifier_logits(const Architecture& arch, const Vector<Scalar>& f, const ParameterSet<Scalar>& params) {
  const auto& w = params[arch.layout.head_weight];
  if (f.size() != w.rows()) {
    throw ConfigError("feature has length " + std::to_string(f.size()) + ", classifier expects " +
                      std::to_string(w.rows()));
  }
  return w.transpose() * f + params[arch.layout.head_bias].row(0).transpose();
}

template <typename Scalar>
PhaseDistribution<Scalar> softmax(const Vector<Scalar>& logits) {
  if (!logits.allFinite()) throw NumericalError("non-finite logits");
  Vector<Scalar> p = (logits.array() - logits.maxCoeff()).exp();
  p /= p.sum();
  return {std::move(p)};
}

/// Linear layer followed by softmax.
template <typename Scalar>
PhaseDistribution<Scalar> classify(const Architecture& arch, const FeatureEmbedding<Scalar>& f,
                                   const ParameterSet<Scalar>& params) {
  return softmax(classifier_logits(arch, f.vector, params));
}

/// Back-propagates d(loss)/d(logits) through the classifier; returns d(loss)/d(feature).
template <typename Scalar>
Vector<Scalar> classify_backward(const Architecture& arch, const Vector<Scalar>& f, const ParameterSet<Scalar>& params,
                                 const Vector<Scalar>& dlogits, ParameterSet<Scalar>& grads) {
  grads[arch.layout.head_weight].noalias() += f * dlogits.transpose();
  grads[arch.layout.head_bias].row(0) += dlogits.transpose();
  return params[arch.layout.head_weight] * dlogits;
}

/// -log max(p[target], eps).
template <typename Scalar>
Scalar cross_entropy(const PhaseDistribution<Scalar>& p, Index target) {
  using std::log;
  using std::max;
  return -log(max(p.probs(target), Scalar(kLogEpsilon)));
}

/// d(weight * CE)/d(logits) for softmax outputs: weight * (p - onehot).
template <typename Scalar>
Vector<Scalar> cross_entropy_logit_grad(const PhaseDistribution<Scalar>& p, Index target, Scalar weight) {
  Vector<Scalar> g = p.probs * weight;
  g(target) -= weight;
  return g;
}

}  // namespace semivt
