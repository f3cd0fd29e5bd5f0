#pragma once

// Loop-level forward pass of the encoder, written independently of the
// Eigen implementation.

#include "semivt/frames.hpp"
#include "semivt/model_config.hpp"
#include "semivt/parameters.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace semivt::testing {

using Rows = std::vector<std::vector<double>>;

inline const Matrix<double>& tensor(const ParameterSet<double>& p, const std::string& name) {
  auto i = p.find(name);
  if (!i) throw std::runtime_error("no tensor " + name);
  return p[*i];
}

inline Rows ref_layer_norm(const Rows& x, const Matrix<double>& g, const Matrix<double>& b) {
  Rows y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= row.size();
    for (double v : row) var += (v - mu) * (v - mu);
    var /= row.size();
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = (row[k] - mu) / std::sqrt(var + 1e-5) * g(0, k) + b(0, k);
  }
  return y;
}

inline Rows ref_affine(const Rows& x, const Matrix<double>& w, const Matrix<double>& b) {
  Rows y(x.size(), std::vector<double>(w.cols(), 0.0));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (Index o = 0; o < w.cols(); ++o) {
      double acc = b(0, o);
      for (Index i = 0; i < w.rows(); ++i) acc += x[r][i] * w(i, o);
      y[r][o] = acc;
    }
  }
  return y;
}

inline Rows ref_attention(const Rows& x, const ParameterSet<double>& p, const std::string& prefix,
                   const std::vector<std::vector<std::size_t>>& groups, int heads) {
  const std::size_t d = x[0].size(), dh = d / heads;
  const Rows qkv = ref_affine(x, tensor(p, prefix + ".qkv.weight"), tensor(p, prefix + ".qkv.bias"));
  Rows ctx(x.size(), std::vector<double>(d, 0.0));
  for (const auto& g : groups) {
    for (int h = 0; h < heads; ++h) {
      for (std::size_t qi : g) {
        std::vector<double> s;
        for (std::size_t ki : g) {
          double dot = 0;
          for (std::size_t k = 0; k < dh; ++k) dot += qkv[qi][h * dh + k] * qkv[ki][d + h * dh + k];
          s.push_back(dot / std::sqrt(double(dh)));
        }
        double mx = s[0], z = 0;
        for (double v : s) mx = std::max(mx, v);
        for (double& v : s) z += (v = std::exp(v - mx));
        for (std::size_t a = 0; a < g.size(); ++a) {
          for (std::size_t k = 0; k < dh; ++k) ctx[qi][h * dh + k] += s[a] / z * qkv[g[a]][2 * d + h * dh + k];
        }
      }
    }
  }
  return ref_affine(ctx, tensor(p, prefix + ".proj.weight"), tensor(p, prefix + ".proj.bias"));
}

inline std::vector<double> reference_encode(const ModelConfig& c, const FrameWindow& w, const ParameterSet<double>& p) {
  const int side = c.frame_size / c.patch_size, per = side * side, stride = per + 1;
  const auto& pe = tensor(p, "encoder.patch_embed.weight");
  const auto& pb = tensor(p, "encoder.patch_embed.bias");
  const auto& cls = tensor(p, "encoder.cls_token");
  const auto& ps = tensor(p, "encoder.pos_spatial");
  const auto& pt = tensor(p, "encoder.pos_temporal");
  Rows x(c.window_len * stride, std::vector<double>(c.embed_dim, 0.0));
  for (int t = 0; t < c.window_len; ++t) {
    for (int k = 0; k < c.embed_dim; ++k) x[t * stride][k] = cls(0, k) + ps(0, k) + pt(t, k);
    for (int py = 0; py < side; ++py) {
      for (int px = 0; px < side; ++px) {
        const int j = py * side + px;
        for (int k = 0; k < c.embed_dim; ++k) {
          double acc = pb(0, k);
          int col = 0;
          for (int ch = 0; ch < c.channels; ++ch)
            for (int dy = 0; dy < c.patch_size; ++dy)
              for (int dx = 0; dx < c.patch_size; ++dx)
                acc += w.frames[t](ch, (py * c.patch_size + dy) * c.frame_size + px * c.patch_size + dx) * pe(col++, k);
          x[t * stride + 1 + j][k] = acc + ps(1 + j, k) + pt(t, k);
        }
      }
    }
  }
  std::vector<std::vector<std::size_t>> temporal, spatial;
  for (int j = 0; j < stride; ++j) {
    temporal.emplace_back();
    for (int t = 0; t < c.window_len; ++t) temporal.back().push_back(t * stride + j);
  }
  for (int t = 0; t < c.window_len; ++t) {
    spatial.emplace_back();
    for (int j = 0; j < stride; ++j) spatial.back().push_back(t * stride + j);
  }
  auto add = [](Rows& a, const Rows& b) {
    for (std::size_t r = 0; r < a.size(); ++r)
      for (std::size_t k = 0; k < a[r].size(); ++k) a[r][k] += b[r][k];
  };
  for (int b = 0; b < c.depth; ++b) {
    const std::string pre = "encoder.block" + std::to_string(b) + ".";
    add(x, ref_attention(ref_layer_norm(x, tensor(p, pre + "temporal_norm.gamma"), tensor(p, pre + "temporal_norm.beta")),
                         p, pre + "temporal_attn", temporal, c.heads));
    add(x, ref_attention(ref_layer_norm(x, tensor(p, pre + "spatial_norm.gamma"), tensor(p, pre + "spatial_norm.beta")),
                         p, pre + "spatial_attn", spatial, c.heads));
    Rows h = ref_affine(ref_layer_norm(x, tensor(p, pre + "mlp_norm.gamma"), tensor(p, pre + "mlp_norm.beta")),
                        tensor(p, pre + "mlp.fc1.weight"), tensor(p, pre + "mlp.fc1.bias"));
    for (auto& row : h)
      for (double& v : row) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    add(x, ref_affine(h, tensor(p, pre + "mlp.fc2.weight"), tensor(p, pre + "mlp.fc2.bias")));
  }
  Rows cls_rows;
  for (int t = 0; t < c.window_len; ++t) cls_rows.push_back(x[t * stride]);
  cls_rows = ref_layer_norm(cls_rows, tensor(p, "encoder.norm.gamma"), tensor(p, "encoder.norm.beta"));
  std::vector<double> out(c.embed_dim, 0.0);
  for (const auto& row : cls_rows)
    for (int k = 0; k < c.embed_dim; ++k) out[k] += row[k] / c.window_len;
  return out;
}

}  // namespace semivt::testing
