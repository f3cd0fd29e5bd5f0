#include "semivt/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>

namespace semivt {

namespace {

constexpr std::array<std::pair<PixelOp, const char*>, 8> kOpNames{{
    {PixelOp::kIdentity, "identity"},
    {PixelOp::kRotate, "rotate"},
    {PixelOp::kTranslateX, "translate_x"},
    {PixelOp::kTranslateY, "translate_y"},
    {PixelOp::kShear, "shear"},
    {PixelOp::kBrightness, "brightness"},
    {PixelOp::kContrast, "contrast"},
    {PixelOp::kCutout, "cutout"},
}};

constexpr float kFill = 0.5f;
constexpr double kMaxRotateDeg = 30.0;
constexpr double kMaxTranslate = 0.45;  // fraction of the side
constexpr double kMaxShear = 0.3;
constexpr double kMaxEnhance = 0.9;
constexpr double kMaxCutout = 0.5;  // fraction of the side

int side_of(const Frame& f) {
  const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(f.cols()))));
  if (static_cast<Index>(s) * s != f.cols()) throw InputError("frames must be square");
  return s;
}

/// Resolved op: what gets applied to every frame of the window.
struct Draw {
  PixelOp op;
  double amount;  // signed, in op units
  int cut_x = 0, cut_y = 0, cut_side = 0;
};

struct Crop {
  double size = 0, x0 = 0, y0 = 0;
};

/// Bilinear taps for every output pixel; index -1 reads the fill value.
struct SampleTable {
  std::vector<std::array<int, 4>> index;
  std::vector<std::array<double, 4>> weight;
};

template <typename Map>
SampleTable make_table(int side, Map source) {
  SampleTable t;
  t.index.resize(static_cast<std::size_t>(side) * side);
  t.weight.resize(t.index.size());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const auto [sx, sy] = source(x, y);
      const double fx = std::floor(sx), fy = std::floor(sy);
      const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
      const double ax = sx - fx, ay = sy - fy;
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      const std::size_t p = static_cast<std::size_t>(y) * side + x;
      for (int k = 0; k < 4; ++k) {
        const bool inside = xs[k] >= 0 && ys[k] >= 0 && xs[k] < side && ys[k] < side;
        t.index[p][k] = inside ? ys[k] * side + xs[k] : -1;
        t.weight[p][k] = ws[k];
      }
    }
  return t;
}

Frame apply_table(const Frame& in, const SampleTable& t) {
  Frame out(in.rows(), in.cols());
  for (Index ch = 0; ch < in.rows(); ++ch) {
    const float* src = in.row(ch).data();
    for (std::size_t p = 0; p < t.index.size(); ++p) {
      double v = 0.0;
      for (int k = 0; k < 4; ++k) {
        if (t.weight[p][k] == 0.0) continue;
        const int i = t.index[p][k];
        v += t.weight[p][k] * (i < 0 ? kFill : src[i]);
      }
      out(ch, static_cast<Index>(p)) = static_cast<float>(v);
    }
  }
  return out;
}

/// out(p) = in(M (p - c) + c + offset), bilinear.
SampleTable warp_table(int side, const std::array<double, 4>& m, double off_x, double off_y) {
  const double c = (side - 1) / 2.0;
  return make_table(side, [&](int x, int y) {
    const double dx = x - c, dy = y - c;
    return std::pair{m[0] * dx + m[1] * dy + c + off_x, m[2] * dx + m[3] * dy + c + off_y};
  });
}

SampleTable crop_table(int side, const Crop& crop) {
  const double scale = side > 1 ? (crop.size - 1) / (side - 1) : 0.0;
  return make_table(side, [&](int x, int y) { return std::pair{crop.x0 + x * scale, crop.y0 + y * scale}; });
}

/// Sampling table of a geometric op; nullopt for photometric ones.
std::optional<SampleTable> geometry_of(const Draw& d, int side) {
  switch (d.op) {
    case PixelOp::kRotate: {
      const double a = d.amount * M_PI / 180.0;
      return warp_table(side, {std::cos(a), std::sin(a), -std::sin(a), std::cos(a)}, 0.0, 0.0);
    }
    case PixelOp::kTranslateX:
      return warp_table(side, {1, 0, 0, 1}, -d.amount * side, 0.0);
    case PixelOp::kTranslateY:
      return warp_table(side, {1, 0, 0, 1}, 0.0, -d.amount * side);
    case PixelOp::kShear:
      return warp_table(side, {1, d.amount, 0, 1}, 0.0, 0.0);
    default:
      return std::nullopt;
  }
}

Frame apply_photometric(const Frame& in, const Draw& d) {
  switch (d.op) {
    case PixelOp::kBrightness:
      return in * static_cast<float>(1.0 + d.amount);
    case PixelOp::kContrast: {
      Frame out = in;
      for (Index c = 0; c < in.rows(); ++c) {
        const float mu = in.row(c).mean();
        out.row(c) = ((in.row(c).array() - mu) * static_cast<float>(1.0 + d.amount) + mu).matrix();
      }
      return out;
    }
    default:
      return in;
  }
}

Draw resolve(PixelOp op, double magnitude, int side, RngStream& rng) {
  const double frac = std::clamp(magnitude, 0.0, 10.0) / 10.0;
  const double sign = rng.coin() ? 1.0 : -1.0;
  Draw d{op, 0.0};
  switch (op) {
    case PixelOp::kIdentity:
      break;
    case PixelOp::kRotate:
      d.amount = sign * frac * kMaxRotateDeg;
      break;
    case PixelOp::kTranslateX:
    case PixelOp::kTranslateY:
      d.amount = sign * frac * kMaxTranslate;
      break;
    case PixelOp::kShear:
      d.amount = sign * frac * kMaxShear;
      break;
    case PixelOp::kBrightness:
    case PixelOp::kContrast:
      d.amount = sign * frac * kMaxEnhance;
      break;
    case PixelOp::kCutout:
      d.cut_side = static_cast<int>(std::lround(frac * kMaxCutout * side));
      d.cut_x = static_cast<int>(rng.uniform_int(0, side - d.cut_side));
      d.cut_y = static_cast<int>(rng.uniform_int(0, side - d.cut_side));
      break;
  }
  return d;
}

}  // namespace

std::string to_string(PixelOp op) {
  for (const auto& [o, n] : kOpNames)
    if (o == op) return n;
  return "identity";
}

PixelOp pixel_op_from_string(const std::string& name) {
  for (const auto& [o, n] : kOpNames)
    if (name == n) return o;
  throw ConfigError("unknown pixel op '" + name + "'");
}

void AugmentPolicy::validate() const {
  if (num_ops < 0) throw ConfigError("augment policy: num_ops must be >= 0");
  if (magnitude_std < 0) throw ConfigError("augment policy: magnitude_std must be >= 0");
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) throw ConfigError("augment policy: crop_fraction must be in (0, 1]");
  for (const auto& o : pixel_ops) {
    if (o.magnitude < 0.0 || o.magnitude > 10.0) throw ConfigError("augment policy: magnitudes must lie in [0, 10]");
  }
  if (kind == PolicyKind::kStrong && num_ops > 0 && pixel_ops.empty()) {
    throw ConfigError("augment policy: strong policy needs at least one op to sample from");
  }
}

AugmentPolicy AugmentPolicy::none() { return {}; }

AugmentPolicy AugmentPolicy::weak() {
  AugmentPolicy p;
  p.kind = PolicyKind::kWeak;
  p.pixel_ops = {{PixelOp::kRotate, 10.0 / 3.0}};
  p.num_ops = 1;
  p.crop_fraction = 0.875;
  return p;
}

AugmentPolicy AugmentPolicy::strong() {
  AugmentPolicy p;
  p.kind = PolicyKind::kStrong;
  for (auto op : {PixelOp::kIdentity, PixelOp::kRotate, PixelOp::kTranslateX, PixelOp::kTranslateY, PixelOp::kShear,
                  PixelOp::kBrightness, PixelOp::kContrast, PixelOp::kCutout}) {
    p.pixel_ops.push_back({op, 9.0});
  }
  p.num_ops = 5;
  p.magnitude_std = 0.8;
  return p;
}

void to_json(nlohmann::json& j, const AugmentPolicy& p) {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& o : p.pixel_ops) ops.push_back({{"op", to_string(o.op)}, {"magnitude", o.magnitude}});
  j = {{"kind", p.kind == PolicyKind::kStrong ? "strong" : "weak"},
       {"pixel_ops", ops},
       {"num_ops", p.num_ops},
       {"magnitude_std", p.magnitude_std},
       {"crop_fraction", p.crop_fraction}};
}

void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  const std::string kind = j.value("kind", std::string("weak"));
  if (kind != "weak" && kind != "strong") throw ConfigError("augment policy: kind must be weak or strong");
  p.kind = kind == "strong" ? PolicyKind::kStrong : PolicyKind::kWeak;
  p.pixel_ops.clear();
  for (const auto& o : j.value("pixel_ops", nlohmann::json::array())) {
    p.pixel_ops.push_back({pixel_op_from_string(o.at("op").get<std::string>()), o.at("magnitude").get<double>()});
  }
  p.num_ops = j.value("num_ops", 0);
  p.magnitude_std = j.value("magnitude_std", 0.0);
  p.crop_fraction = j.value("crop_fraction", 1.0);
  p.validate();
}

void to_json(nlohmann::json& j, const Normalization& n) { j = {{"mean", n.mean}, {"std", n.stddev}}; }

void from_json(const nlohmann::json& j, Normalization& n) {
  n.mean = j.at("mean").get<std::vector<float>>();
  n.stddev = j.at("std").get<std::vector<float>>();
  if (n.mean.size() != n.stddev.size()) throw ConfigError("normalization: mean/std length mismatch");
}

FrameWindow weak_view(std::span<const Frame> video, Index t, int window_len) {
  if (t < 0 || t >= static_cast<Index>(video.size())) throw InputError("weak_view: frame index out of range");
  if (window_len < 1) throw InputError("weak_view: window length must be >= 1");
  FrameWindow w;
  w.query_index = t;
  w.frames.reserve(window_len);
  for (Index i = t - window_len + 1; i <= t; ++i) w.frames.push_back(video[std::max<Index>(i, 0)]);
  return w;
}

std::vector<Index> strong_view_indices(Index t, int window_len, RngStream& rng) {
  const Index need = window_len - 1;
  std::vector<Index> idx;
  idx.reserve(window_len);
  if (need > 0) {
    if (t == 0) {
      idx.assign(need, 0);
    } else if (t >= need) {
      std::vector<Index> pool(t);
      std::iota(pool.begin(), pool.end(), Index{0});
      // Partial Fisher-Yates: first `need` entries become the sample.
      for (Index i = 0; i < need; ++i) std::swap(pool[i], pool[rng.uniform_int(i, t - 1)]);
      idx.assign(pool.begin(), pool.begin() + need);
    } else {
      for (Index i = 0; i < need; ++i) idx.push_back(rng.uniform_int(0, t - 1));
    }
    std::sort(idx.begin(), idx.end());
  }
  idx.push_back(t);
  return idx;
}

FrameWindow strong_view(std::span<const Frame> video, Index t, int window_len, RngStream& rng) {
  if (t < 0 || t >= static_cast<Index>(video.size())) throw InputError("strong_view: frame index out of range");
  if (window_len < 1) throw InputError("strong_view: window length must be >= 1");
  FrameWindow w;
  w.query_index = t;
  for (Index i : strong_view_indices(t, window_len, rng)) w.frames.push_back(video[i]);
  return w;
}

FrameWindow apply_pixel_policy(const FrameWindow& window, const AugmentPolicy& policy, const Normalization& norm,
                               RngStream& rng) {
  FrameWindow out;
  out.query_index = window.query_index;
  if (window.frames.empty()) return out;
  const int side = side_of(window.frames.front());
  const Index channels = window.frames.front().rows();
  if (static_cast<Index>(norm.mean.size()) != channels || static_cast<Index>(norm.stddev.size()) != channels) {
    throw ConfigError("normalization statistics do not match the channel count");
  }

  std::vector<Draw> draws;
  Crop crop;
  bool cropping = false;
  if (policy.kind == PolicyKind::kWeak) {
    if (policy.crop_fraction < 1.0) {
      cropping = true;
      crop.size = policy.crop_fraction * side;
      crop.x0 = rng.uniform(0.0, side - crop.size);
      crop.y0 = rng.uniform(0.0, side - crop.size);
    }
    const int n = std::min<int>(policy.num_ops, static_cast<int>(policy.pixel_ops.size()));
    for (int i = 0; i < n; ++i) {
      const auto& o = policy.pixel_ops[i];
      draws.push_back(resolve(o.op, rng.uniform(0.0, o.magnitude), side, rng));
    }
  } else if (!policy.pixel_ops.empty()) {
    for (int i = 0; i < policy.num_ops; ++i) {
      const auto& o = policy.pixel_ops[rng.uniform_int(0, static_cast<long>(policy.pixel_ops.size()) - 1)];
      const double m = policy.magnitude_std > 0 ? rng.normal(o.magnitude, policy.magnitude_std) : o.magnitude;
      draws.push_back(resolve(o.op, std::clamp(m, 0.0, 10.0), side, rng));
    }
  }

  // Geometry is shared by the whole window, so build the tables once.
  std::optional<SampleTable> crop_map;
  if (cropping) crop_map = crop_table(side, crop);
  std::vector<std::optional<SampleTable>> maps;
  for (const auto& d : draws) maps.push_back(geometry_of(d, side));

  out.frames.reserve(window.frames.size());
  for (const Frame& src : window.frames) {
    if (src.rows() != channels || src.cols() != static_cast<Index>(side) * side) {
      throw InputError("apply_pixel_policy: frames in a window must share one shape");
    }
    Frame f = crop_map ? apply_table(src, *crop_map) : src;
    for (std::size_t i = 0; i < draws.size(); ++i) f = maps[i] ? apply_table(f, *maps[i]) : apply_photometric(f, draws[i]);
    f = f.cwiseMax(0.0f).cwiseMin(1.0f);
    for (Index c = 0; c < channels; ++c) {
      const float sd = norm.stddev[c] > 0.0f ? norm.stddev[c] : 1.0f;
      f.row(c) = ((f.row(c).array() - norm.mean[c]) / sd).matrix();
    }
    for (const auto& d : draws) {
      if (d.op != PixelOp::kCutout || d.cut_side == 0) continue;
      for (Index c = 0; c < channels; ++c)
        for (int y = d.cut_y; y < d.cut_y + d.cut_side; ++y)
          for (int x = d.cut_x; x < d.cut_x + d.cut_side; ++x) f(c, y * side + x) = 0.0f;
    }
    out.frames.push_back(std::move(f));
  }
  return out;
}

}  // namespace semivt
