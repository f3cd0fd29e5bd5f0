#pragma once

#include "semivt/common.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <vector>

namespace semivt::layers {

/// Rows {start, start + stride, ...} of a token matrix that attend to each other.
struct TokenGroup {
  Index start = 0;
  Index count = 0;
  Index stride = 1;

  auto rows() const { return Eigen::seqN(start, count, stride); }
};

template <typename Scalar>
inline constexpr Scalar kNormEpsilon = Scalar(1e-5);

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> xhat;
  Vector<Scalar> inv_std;
};

/// Row-wise layer normalisation with affine gain and shift (both 1 x D).
template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const Matrix<Scalar>& gamma, const Matrix<Scalar>& beta,
                          LayerNormCache<Scalar>* cache) {
  const Index d = x.cols();
  Matrix<Scalar> xhat(x.rows(), d);
  Vector<Scalar> inv(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / Scalar(d);
    inv(r) = Scalar(1) / std::sqrt(var + kNormEpsilon<Scalar>);
    xhat.row(r) = centered * inv(r);
  }
  Matrix<Scalar> y = (xhat.array().rowwise() * gamma.row(0).array()).matrix();
  y.rowwise() += beta.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& c, const Matrix<Scalar>& gamma,
                                   const Matrix<Scalar>& dy, Matrix<Scalar>& dgamma, Matrix<Scalar>& dbeta) {
  const Scalar d = Scalar(dy.cols());
  dgamma.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  const Matrix<Scalar> dxhat = (dy.array().rowwise() * gamma.row(0).array()).matrix();
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const Scalar sum = dxhat.row(r).sum();
    const Scalar dot = dxhat.row(r).dot(c.xhat.row(r));
    dx.row(r) = (c.inv_std(r) / d) * (d * dxhat.row(r).array() - sum - c.xhat.row(r).array() * dot).matrix();
  }
  return dx;
}

/// Exact (erf-based) GELU applied elementwise.
template <typename Scalar>
Matrix<Scalar> gelu(const Matrix<Scalar>& x) {
  const Scalar r = Scalar(1) / std::sqrt(Scalar(2));
  return (Scalar(0.5) * x.array() * (Scalar(1) + (x.array() * r).erf())).matrix();
}

template <typename Scalar>
Matrix<Scalar> gelu_grad(const Matrix<Scalar>& x) {
  const Scalar r = Scalar(1) / std::sqrt(Scalar(2));
  const Scalar c = Scalar(1) / std::sqrt(Scalar(2) * Scalar(M_PI));
  const auto a = x.array();
  return (Scalar(0.5) * (Scalar(1) + (a * r).erf()) + a * c * (Scalar(-0.5) * a.square()).exp()).matrix();
}

/// In-place numerically stable softmax over each row.
template <typename Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& s) {
  for (Index r = 0; r < s.rows(); ++r) {
    const auto m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
}

/// x W + b with b broadcast over rows.
template <typename Scalar>
Matrix<Scalar> affine(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const Matrix<Scalar>& b) {
  Matrix<Scalar> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

/// Accumulates dW, db and returns dx for y = x W + b.
template <typename Scalar>
Matrix<Scalar> affine_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const Matrix<Scalar>& dy,
                               Matrix<Scalar>& dw, Matrix<Scalar>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

template <typename Scalar>
struct AttentionCache {
  Matrix<Scalar> input;
  Matrix<Scalar> qkv;
  std::vector<Matrix<Scalar>> probs;  // group-major, then head
  Matrix<Scalar> context;
};

/// Multi-head self-attention restricted to each TokenGroup. Rows not covered
/// by any group receive only the output-projection bias.
template <typename Scalar>
Matrix<Scalar> grouped_attention(const Matrix<Scalar>& x, const Matrix<Scalar>& w_qkv, const Matrix<Scalar>& b_qkv,
                                 const Matrix<Scalar>& w_proj, const Matrix<Scalar>& b_proj,
                                 const std::vector<TokenGroup>& groups, int heads, AttentionCache<Scalar>* cache) {
  const Index d = x.cols();
  const Index dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  Matrix<Scalar> qkv = affine(x, w_qkv, b_qkv);
  Matrix<Scalar> context = Matrix<Scalar>::Zero(x.rows(), d);
  std::vector<Matrix<Scalar>> probs;
  if (cache) probs.reserve(groups.size() * static_cast<std::size_t>(heads));
  for (const auto& g : groups) {
    for (int h = 0; h < heads; ++h) {
      const Matrix<Scalar> q = qkv(g.rows(), Eigen::seqN(h * dh, dh));
      const Matrix<Scalar> k = qkv(g.rows(), Eigen::seqN(d + h * dh, dh));
      const Matrix<Scalar> v = qkv(g.rows(), Eigen::seqN(2 * d + h * dh, dh));
      Matrix<Scalar> a = (q * k.transpose()) * scale;
      softmax_rows(a);
      context(g.rows(), Eigen::seqN(h * dh, dh)) = a * v;
      if (cache) probs.push_back(std::move(a));
    }
  }
  Matrix<Scalar> out = affine(context, w_proj, b_proj);
  if (cache) {
    cache->input = x;
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->context = std::move(context);
  }
  return out;
}

template <typename Scalar>
struct AttentionGrads {
  Matrix<Scalar>& w_qkv;
  Matrix<Scalar>& b_qkv;
  Matrix<Scalar>& w_proj;
  Matrix<Scalar>& b_proj;
};

template <typename Scalar>
Matrix<Scalar> grouped_attention_backward(const AttentionCache<Scalar>& c, const Matrix<Scalar>& w_qkv,
                                          const Matrix<Scalar>& w_proj, const std::vector<TokenGroup>& groups,
                                          int heads, const Matrix<Scalar>& dout, AttentionGrads<Scalar> g_out) {
  const Index d = c.input.cols();
  const Index dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  const Matrix<Scalar> dcontext = affine_backward(c.context, w_proj, dout, g_out.w_proj, g_out.b_proj);
  Matrix<Scalar> dqkv = Matrix<Scalar>::Zero(c.qkv.rows(), c.qkv.cols());
  std::size_t slot = 0;
  for (const auto& g : groups) {
    for (int h = 0; h < heads; ++h, ++slot) {
      const Matrix<Scalar>& a = c.probs[slot];
      const Matrix<Scalar> q = c.qkv(g.rows(), Eigen::seqN(h * dh, dh));
      const Matrix<Scalar> k = c.qkv(g.rows(), Eigen::seqN(d + h * dh, dh));
      const Matrix<Scalar> v = c.qkv(g.rows(), Eigen::seqN(2 * d + h * dh, dh));
      const Matrix<Scalar> dctx = dcontext(g.rows(), Eigen::seqN(h * dh, dh));
      const Matrix<Scalar> da = dctx * v.transpose();
      const Vector<Scalar> inner = (da.array() * a.array()).rowwise().sum();
      const Matrix<Scalar> ds = (a.array() * (da.array().colwise() - inner.array())).matrix() * scale;
      dqkv(g.rows(), Eigen::seqN(h * dh, dh)) += ds * k;
      dqkv(g.rows(), Eigen::seqN(d + h * dh, dh)) += ds.transpose() * q;
      dqkv(g.rows(), Eigen::seqN(2 * d + h * dh, dh)) += a.transpose() * dctx;
    }
  }
  return affine_backward(c.input, w_qkv, dqkv, g_out.w_qkv, g_out.b_qkv);
}

}  // namespace semivt::layers
