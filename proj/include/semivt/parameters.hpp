#pragma once

#include "semivt/common.hpp"
#include "semivt/model_config.hpp"

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace semivt {

/// Flat, ordered collection of named 2-D tensors. Vectors are stored as 1 x n.
template <typename Scalar>
class ParameterSet {
 public:
  using Tensor = Matrix<Scalar>;

  std::size_t add(std::string name, Tensor value) {
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(value));
    return tensors_.size() - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    return std::nullopt;
  }

  Index num_scalars() const {
    Index n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Tensor::Zero(tensors_[i].rows(), tensors_[i].cols()));
    return out;
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<Other>());
    return out;
  }

  template <typename Other>
  bool same_shapes(const ParameterSet<Other>& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (other.name(i) != names_[i] || other[i].rows() != tensors_[i].rows() ||
          other[i].cols() != tensors_[i].cols()) {
        return false;
      }
    }
    return true;
  }

  /// Name of the first tensor holding a NaN or Inf, if any.
  std::optional<std::string> first_non_finite() const {
    for (std::size_t i = 0; i < size(); ++i) {
      if (!tensors_[i].allFinite()) return names_[i];
    }
    return std::nullopt;
  }

  void set_zero() {
    for (auto& t : tensors_) t.setZero();
  }

  ParameterSet& operator+=(const ParameterSet& rhs) {
    for (std::size_t i = 0; i < size(); ++i) tensors_[i] += rhs.tensors_[i];
    return *this;
  }

  bool operator==(const ParameterSet& rhs) const {
    if (!same_shapes(rhs)) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (tensors_[i] != rhs.tensors_[i]) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

enum class InitKind { kXavier, kZeros, kOnes, kSmallNormal };

struct TensorSpec {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  InitKind init = InitKind::kZeros;
};

struct BlockSlots {
  std::size_t ln_t_gamma, ln_t_beta, qkv_t_weight, qkv_t_bias, proj_t_weight, proj_t_bias;
  std::size_t ln_s_gamma, ln_s_beta, qkv_s_weight, qkv_s_bias, proj_s_weight, proj_s_bias;
  std::size_t ln_m_gamma, ln_m_beta, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

struct TcnLevelSlots {
  std::size_t conv_now, conv_past, conv_bias, mix_weight, mix_bias;
};

struct TcnStageSlots {
  std::size_t in_weight, in_bias;
  std::vector<TcnLevelSlots> levels;
  std::size_t out_weight, out_bias;
};

/// Position of every tensor of a model inside its ParameterSet.
struct ModelLayout {
  std::size_t patch_weight, patch_bias, cls_token, pos_spatial, pos_temporal;
  std::vector<BlockSlots> blocks;
  std::size_t norm_gamma, norm_beta, head_weight, head_bias;
  std::vector<TcnStageSlots> tcn;
  std::vector<TensorSpec> specs;
};

inline ModelLayout make_layout(const ModelConfig& cfg) {
  cfg.validate();
  ModelLayout lay;
  const Index d = cfg.embed_dim;
  auto add = [&lay](std::string name, Index rows, Index cols, InitKind init) {
    lay.specs.push_back({std::move(name), rows, cols, init});
    return lay.specs.size() - 1;
  };
  lay.patch_weight = add("encoder.patch_embed.weight", cfg.patch_dim(), d, InitKind::kXavier);
  lay.patch_bias = add("encoder.patch_embed.bias", 1, d, InitKind::kZeros);
  lay.cls_token = add("encoder.cls_token", 1, d, InitKind::kSmallNormal);
  lay.pos_spatial = add("encoder.pos_spatial", cfg.patches_per_frame() + 1, d, InitKind::kSmallNormal);
  lay.pos_temporal = add("encoder.pos_temporal", cfg.window_len, d, InitKind::kSmallNormal);
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string p = "encoder.block" + std::to_string(b) + ".";
    const Index hidden = d * cfg.mlp_ratio;
    BlockSlots s{};
    s.ln_t_gamma = add(p + "temporal_norm.gamma", 1, d, InitKind::kOnes);
    s.ln_t_beta = add(p + "temporal_norm.beta", 1, d, InitKind::kZeros);
    s.qkv_t_weight = add(p + "temporal_attn.qkv.weight", d, 3 * d, InitKind::kXavier);
    s.qkv_t_bias = add(p + "temporal_attn.qkv.bias", 1, 3 * d, InitKind::kZeros);
    s.proj_t_weight = add(p + "temporal_attn.proj.weight", d, d, InitKind::kXavier);
    s.proj_t_bias = add(p + "temporal_attn.proj.bias", 1, d, InitKind::kZeros);
    s.ln_s_gamma = add(p + "spatial_norm.gamma", 1, d, InitKind::kOnes);
    s.ln_s_beta = add(p + "spatial_norm.beta", 1, d, InitKind::kZeros);
    s.qkv_s_weight = add(p + "spatial_attn.qkv.weight", d, 3 * d, InitKind::kXavier);
    s.qkv_s_bias = add(p + "spatial_attn.qkv.bias", 1, 3 * d, InitKind::kZeros);
    s.proj_s_weight = add(p + "spatial_attn.proj.weight", d, d, InitKind::kXavier);
    s.proj_s_bias = add(p + "spatial_attn.proj.bias", 1, d, InitKind::kZeros);
    s.ln_m_gamma = add(p + "mlp_norm.gamma", 1, d, InitKind::kOnes);
    s.ln_m_beta = add(p + "mlp_norm.beta", 1, d, InitKind::kZeros);
    s.fc1_weight = add(p + "mlp.fc1.weight", d, hidden, InitKind::kXavier);
    s.fc1_bias = add(p + "mlp.fc1.bias", 1, hidden, InitKind::kZeros);
    s.fc2_weight = add(p + "mlp.fc2.weight", hidden, d, InitKind::kXavier);
    s.fc2_bias = add(p + "mlp.fc2.bias", 1, d, InitKind::kZeros);
    lay.blocks.push_back(s);
  }
  lay.norm_gamma = add("encoder.norm.gamma", 1, d, InitKind::kOnes);
  lay.norm_beta = add("encoder.norm.beta", 1, d, InitKind::kZeros);
  lay.head_weight = add("classifier.weight", d, cfg.num_classes, InitKind::kXavier);
  lay.head_bias = add("classifier.bias", 1, cfg.num_classes, InitKind::kZeros);
  if (cfg.tcn_head) {
    const Index f = cfg.tcn_channels;
    for (int st = 0; st < cfg.tcn_stages; ++st) {
      const std::string p = "tcn.stage" + std::to_string(st) + ".";
      const Index in_dim = st == 0 ? d : cfg.num_classes;
      TcnStageSlots s{};
      s.in_weight = add(p + "in.weight", in_dim, f, InitKind::kXavier);
      s.in_bias = add(p + "in.bias", 1, f, InitKind::kZeros);
      for (int l = 0; l < cfg.tcn_levels; ++l) {
        const std::string q = p + "level" + std::to_string(l) + ".";
        TcnLevelSlots ls{};
        ls.conv_now = add(q + "conv.now", f, f, InitKind::kXavier);
        ls.conv_past = add(q + "conv.past", f, f, InitKind::kXavier);
        ls.conv_bias = add(q + "conv.bias", 1, f, InitKind::kZeros);
        ls.mix_weight = add(q + "mix.weight", f, f, InitKind::kXavier);
        ls.mix_bias = add(q + "mix.bias", 1, f, InitKind::kZeros);
        s.levels.push_back(ls);
      }
      s.out_weight = add(p + "out.weight", f, cfg.num_classes, InitKind::kXavier);
      s.out_bias = add(p + "out.bias", 1, cfg.num_classes, InitKind::kZeros);
      lay.tcn.push_back(std::move(s));
    }
  }
  return lay;
}

/// All-zero parameters with the layout of `cfg`.
template <typename Scalar>
ParameterSet<Scalar> zero_parameters(const ModelConfig& cfg) {
  ParameterSet<Scalar> p;
  for (const auto& s : make_layout(cfg).specs) p.add(s.name, Matrix<Scalar>::Zero(s.rows, s.cols));
  return p;
}

/// Seeded initialisation. Values are drawn in double and rounded, so the float
/// and double sets for one seed agree to float precision.
template <typename Scalar>
ParameterSet<Scalar> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet<Scalar> p;
  for (const auto& s : make_layout(cfg).specs) {
    Matrix<double> v(s.rows, s.cols);
    switch (s.init) {
      case InitKind::kZeros:
        v.setZero();
        break;
      case InitKind::kOnes:
        v.setOnes();
        break;
      case InitKind::kXavier: {
        const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (Index i = 0; i < v.size(); ++i) v.data()[i] = u(rng);
        break;
      }
      case InitKind::kSmallNormal: {
        std::normal_distribution<double> n(0.0, 0.02);
        for (Index i = 0; i < v.size(); ++i) v.data()[i] = n(rng);
        break;
      }
    }
    p.add(s.name, v.cast<Scalar>());
  }
  return p;
}

}  // namespace semivt
