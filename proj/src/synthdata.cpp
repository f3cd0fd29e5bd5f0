#include "semivt/synthdata.hpp"

#include "semivt/io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

namespace semivt {

namespace {

using nlohmann::json;

constexpr std::uint64_t kVideoStream = 0x766964656fULL;
constexpr std::uint64_t kLengthStream = 0x6c656e677468ULL;
constexpr std::uint64_t kLabeledStream = 0x6c6162656cULL;

const char* pattern_name(Pattern p) {
  switch (p) {
    case Pattern::kHorizontalStripes: return "horizontal_stripes";
    case Pattern::kVerticalStripes: return "vertical_stripes";
    case Pattern::kChecker: return "checker";
    case Pattern::kRings: return "rings";
    case Pattern::kDiagonal: return "diagonal";
    case Pattern::kBlob: return "blob";
  }
  return "?";
}

Pattern pattern_from_name(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(Pattern::kBlob); ++i)
    if (s == pattern_name(static_cast<Pattern>(i))) return static_cast<Pattern>(i);
  throw ConfigError("unknown pattern '" + s + "'");
}

// Per-visit texture placement.
struct Placement {
  double phase_x, phase_y, cx, cy;
};

double texture(const RenderSpec& spec, const Placement& pl, double x, double y) {
  constexpr double kTau = 2.0 * std::numbers::pi;
  const double f = spec.frequency;
  switch (spec.pattern) {
    case Pattern::kHorizontalStripes: return std::sin(kTau * f * y + pl.phase_y);
    case Pattern::kVerticalStripes: return std::sin(kTau * f * x + pl.phase_x);
    case Pattern::kChecker: return std::sin(kTau * f * x + pl.phase_x) * std::sin(kTau * f * y + pl.phase_y);
    case Pattern::kRings: return std::sin(kTau * f * std::hypot(x - pl.cx, y - pl.cy) + pl.phase_x);
    case Pattern::kDiagonal: return std::sin(kTau * f * (x + y) / std::numbers::sqrt2 + pl.phase_x);
    case Pattern::kBlob: {
      const double s = 0.35 / f;
      const double r2 = (x - pl.cx) * (x - pl.cx) + (y - pl.cy) * (y - pl.cy);
      return 2.0 * std::exp(-r2 / (2 * s * s)) - 1.0;
    }
  }
  return 0.0;
}

int sample_next(const WorkflowModel& m, int phase, RngStream& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last = phase;
  for (int j = 0; j < m.num_phases; ++j) {
    const double p = m.transitions(phase, j);
    if (p <= 0.0) continue;
    acc += p;
    last = j;
    if (u < acc) return j;
  }
  return last;
}

std::string label_hash(const LabeledVideo& v) {
  std::string bytes;
  for (const auto& f : v.frames) io::append_f32_le(bytes, {f.data(), static_cast<std::size_t>(f.size())});
  for (int l : v.labels) bytes += std::to_string(l) + ',';
  return io::hex64(io::fnv1a(bytes));
}

}  // namespace

void WorkflowModel::validate() const {
  if (num_phases < 2) throw ConfigError("workflow needs at least 2 phases");
  const auto c = static_cast<Index>(num_phases);
  if (transitions.rows() != c || transitions.cols() != c) throw ConfigError("transition matrix must be CxC");
  for (Index i = 0; i < c; ++i) {
    if (transitions(i, i) != 0.0) throw ConfigError("self-transitions are not allowed");
    if ((transitions.row(i).array() < 0.0).any()) throw ConfigError("negative transition probability");
    if (std::abs(transitions.row(i).sum() - 1.0) > 1e-9)
      throw ConfigError("transition row " + std::to_string(i) + " does not sum to 1");
  }
  if (static_cast<int>(dwell_mean.size()) != num_phases || static_cast<int>(render.size()) != num_phases ||
      static_cast<int>(ramp.size()) != num_phases)
    throw ConfigError("per-phase tables must have one entry per phase");
  for (double d : dwell_mean)
    if (!(d >= 1.0)) throw ConfigError("dwell means must be >= 1");
  if (dwell_shape < 0) throw ConfigError("dwell_shape must be >= 0");
  if (ambiguous_pairs.empty()) throw ConfigError("at least one ambiguous phase pair is required");
  for (auto [a, b] : ambiguous_pairs) {
    if (a < 0 || b < 0 || a >= num_phases || b >= num_phases || a == b) throw ConfigError("bad ambiguous pair");
    if (!(render[a] == render[b])) throw ConfigError("ambiguous phases must share a render spec");
  }
  if (initial_phase < 0 || initial_phase >= num_phases) throw ConfigError("initial_phase out of range");
  if (!(noise_sigma >= 0.0) || frame_size < 2 || channels < 1) throw ConfigError("bad render settings");
}

WorkflowModel WorkflowModel::standard(int num_phases, int frame_size) {
  if (num_phases < 2) throw ConfigError("workflow needs at least 2 phases");
  WorkflowModel m;
  m.num_phases = num_phases;
  m.frame_size = frame_size;
  const int c = num_phases;
  const auto pair = c >= 4 ? std::pair{1, c - 2} : std::pair{0, c - 1};
  m.ambiguous_pairs = {pair};

  m.transitions = Matrix<double>::Zero(c, c);
  for (int i = 0; i < c; ++i) {
    if (i == 0) m.transitions(i, 1) = 1.0;
    else if (i == c - 1) m.transitions(i, i - 1) = 1.0;
    else {
      m.transitions(i, i + 1) = 0.85;
      m.transitions(i, i - 1) = 0.15;
    }
  }

  const double base = 200.0 / c;
  static constexpr Pattern kCycle[] = {Pattern::kHorizontalStripes, Pattern::kChecker, Pattern::kVerticalStripes,
                                       Pattern::kRings, Pattern::kDiagonal, Pattern::kBlob};
  const int groups = c - 1;
  int g = 0;
  for (int i = 0; i < c; ++i) {
    m.dwell_mean.push_back(base * (1.0 + 0.2 * ((i % 3) - 1)));
    if (i == pair.second) {
      m.render.push_back(m.render[pair.first]);
    } else {
      RenderSpec r;
      r.pattern = kCycle[g % 6];
      r.intensity = 0.35 + 0.3 * g / std::max(1, groups - 1);
      r.frequency = 2.0 + g % 3;
      m.render.push_back(r);
      ++g;
    }
    m.ramp.push_back(i == pair.first ? 0.3 : i == pair.second ? -0.3 : 0.0);
  }
  return m;
}

void to_json(json& j, const WorkflowModel& m) {
  json rows = json::array();
  for (Index i = 0; i < m.transitions.rows(); ++i) {
    json r = json::array();
    for (Index k = 0; k < m.transitions.cols(); ++k) r.push_back(m.transitions(i, k));
    rows.push_back(r);
  }
  json render = json::array();
  for (const auto& r : m.render)
    render.push_back({{"pattern", pattern_name(r.pattern)}, {"intensity", r.intensity}, {"frequency", r.frequency}});
  json pairs = json::array();
  for (auto [a, b] : m.ambiguous_pairs) pairs.push_back({a, b});
  j = json{{"num_phases", m.num_phases},
           {"transitions", rows},
           {"dwell_mean", m.dwell_mean},
           {"dwell_shape", m.dwell_shape},
           {"render", render},
           {"ramp", m.ramp},
           {"ambiguous_pairs", pairs},
           {"pattern_amplitude", m.pattern_amplitude},
           {"noise_sigma", m.noise_sigma},
           {"brightness_jitter", m.brightness_jitter},
           {"contrast_jitter", m.contrast_jitter},
           {"initial_phase", m.initial_phase},
           {"frame_size", m.frame_size},
           {"channels", m.channels}};
}

void from_json(const json& j, WorkflowModel& m) {
  try {
    m.num_phases = j.at("num_phases");
    const auto& rows = j.at("transitions");
    m.transitions = Matrix<double>::Zero(static_cast<Index>(rows.size()), m.num_phases);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != static_cast<std::size_t>(m.num_phases)) throw ConfigError("ragged transition matrix");
      for (std::size_t k = 0; k < rows[i].size(); ++k) m.transitions(i, k) = rows[i][k].get<double>();
    }
    m.dwell_mean = j.at("dwell_mean").get<std::vector<double>>();
    m.dwell_shape = j.at("dwell_shape");
    m.render.clear();
    for (const auto& r : j.at("render"))
      m.render.push_back({pattern_from_name(r.at("pattern")), r.at("intensity"), r.at("frequency")});
    m.ramp = j.at("ramp").get<std::vector<double>>();
    m.ambiguous_pairs.clear();
    for (const auto& p : j.at("ambiguous_pairs")) m.ambiguous_pairs.emplace_back(p.at(0), p.at(1));
    m.pattern_amplitude = j.at("pattern_amplitude");
    m.noise_sigma = j.at("noise_sigma");
    m.brightness_jitter = j.at("brightness_jitter");
    m.contrast_jitter = j.at("contrast_jitter");
    m.initial_phase = j.at("initial_phase");
    m.frame_size = j.at("frame_size");
    m.channels = j.at("channels");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("workflow model: ") + e.what());
  }
}

int sample_dwell(const WorkflowModel& model, int phase, RngStream& rng) {
  const double mean = model.dwell_mean.at(phase);
  if (model.dwell_shape == 0) return std::max(1, static_cast<int>(std::lround(mean)));
  // 1 + failures before `shape` successes, so the mean is exactly `mean`.
  const double p = model.dwell_shape / (model.dwell_shape + mean - 1.0);
  return 1 + std::negative_binomial_distribution<int>(model.dwell_shape, p)(rng.engine());
}

LabeledVideo generate_video(const WorkflowModel& model, Index length, RngStream& rng, std::string id) {
  model.validate();
  if (length < 1) throw InputError("video length must be >= 1");

  const double gain = 1.0 + rng.uniform(-model.contrast_jitter, model.contrast_jitter);
  const double offset = rng.uniform(-model.brightness_jitter, model.brightness_jitter);

  LabeledVideo video;
  video.id = std::move(id);
  video.frames.reserve(length);
  video.labels.reserve(length);

  const int side = model.frame_size;
  int phase = model.initial_phase;
  while (static_cast<Index>(video.labels.size()) < length) {
    const int dwell = sample_dwell(model, phase, rng);
    const Placement pl{rng.uniform(0, 2 * std::numbers::pi), rng.uniform(0, 2 * std::numbers::pi),
                       rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
    const RenderSpec& spec = model.render[phase];
    for (int k = 0; k < dwell && static_cast<Index>(video.labels.size()) < length; ++k) {
      const double progress = dwell > 1 ? static_cast<double>(k) / (dwell - 1) : 0.5;
      const double level = spec.intensity + model.ramp[phase] * (progress - 0.5);
      Frame frame(model.channels, side * side);
      for (int c = 0; c < model.channels; ++c)
        for (int y = 0; y < side; ++y)
          for (int x = 0; x < side; ++x) {
            const double tex = texture(spec, pl, (x + 0.5) / side, (y + 0.5) / side);
            double v = level + model.pattern_amplitude * tex;
            v = 0.5 + gain * (v - 0.5) + offset + rng.normal(0.0, model.noise_sigma);
            frame(c, y * side + x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
      video.frames.push_back(std::move(frame));
      video.labels.push_back(phase);
    }
    phase = sample_next(model, phase, rng);
  }
  return video;
}

Normalization dataset_statistics(const std::vector<LabeledVideo>& videos) {
  Index channels = 0;
  for (const auto& v : videos)
    if (!v.frames.empty()) channels = std::max(channels, v.frames.front().rows());
  Normalization out;
  out.mean.assign(std::max<Index>(channels, 1), 0.0f);
  out.stddev.assign(std::max<Index>(channels, 1), 0.0f);
  for (Index c = 0; c < channels; ++c) {
    double sum = 0, sq = 0, n = 0;
    for (const auto& v : videos)
      for (const auto& f : v.frames) {
        const auto row = f.row(c).cast<double>();
        sum += row.sum();
        sq += row.squaredNorm();
        n += static_cast<double>(row.size());
      }
    const double mean = n > 0 ? sum / n : 0.0;
    const double var = n > 0 ? std::max(0.0, sq / n - mean * mean) : 0.0;
    out.mean[c] = static_cast<float>(mean);
    out.stddev[c] = static_cast<float>(std::sqrt(var));
  }
  return out;
}

void save_video(const LabeledVideo& video, const std::filesystem::path& dir) {
  if (video.frames.size() != video.labels.size()) throw InputError("frames and labels differ in length");
  std::filesystem::create_directories(dir);
  const Index channels = video.frames.empty() ? 1 : video.frames.front().rows();
  const Index pixels = video.frames.empty() ? 0 : video.frames.front().cols();
  const auto side = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(pixels))));
  if (side * side != pixels) throw InputError("frames must be square");

  std::string bytes;
  bytes.reserve(video.frames.size() * channels * pixels * 4);
  for (const auto& f : video.frames) {
    if (f.rows() != channels || f.cols() != pixels) throw InputError("frames differ in shape");
    io::append_f32_le(bytes, {f.data(), static_cast<std::size_t>(f.size())});
  }
  io::write_text(dir / "frames.bin", bytes);

  const json meta{{"video_id", video.id},
                  {"shape", {video.frames.size(), channels, side, side}},
                  {"dtype", "float32"},
                  {"byte_order", "little"},
                  {"fps", video.fps}};
  io::write_text(dir / "frames.json", meta.dump(2) + "\n");

  std::ostringstream csv;
  csv << "frame_index,phase_id\n";
  for (std::size_t i = 0; i < video.labels.size(); ++i) csv << i << ',' << video.labels[i] << '\n';
  io::write_text(dir / "labels.csv", csv.str());
}

LabeledVideo load_video(const std::filesystem::path& dir) {
  LabeledVideo video;
  json meta;
  try {
    meta = json::parse(io::read_text(dir / "frames.json"));
    if (meta.at("dtype") != "float32" || meta.at("byte_order") != "little")
      throw DataError(dir.string() + ": unsupported frame encoding");
    video.id = meta.value("video_id", dir.filename().string());
    video.fps = meta.value("fps", 1.0);
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/frames.json: " + e.what());
  }
  const auto shape = meta.at("shape").get<std::vector<Index>>();
  if (shape.size() != 4 || shape[0] < 0 || shape[1] < 1 || shape[2] < 1 || shape[3] < 1)
    throw DataError(dir.string() + ": shape must be [N, C, H, W]");
  const Index n = shape[0], channels = shape[1], pixels = shape[2] * shape[3];

  const std::string bytes = io::read_text(dir / "frames.bin");
  if (bytes.size() != static_cast<std::size_t>(n * channels * pixels * 4))
    throw DataError(dir.string() + "/frames.bin: size does not match frames.json");
  video.frames.reserve(n);
  for (Index i = 0; i < n; ++i) {
    Frame f(channels, pixels);
    io::decode_f32_le(bytes.data() + i * channels * pixels * 4, {f.data(), static_cast<std::size_t>(f.size())});
    video.frames.push_back(std::move(f));
  }

  std::istringstream csv(io::read_text(dir / "labels.csv"));
  std::string line;
  if (!std::getline(csv, line) || line != "frame_index,phase_id")
    throw DataError(dir.string() + "/labels.csv: missing header");
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    long idx = -1, phase = -1;
    try {
      if (comma == std::string::npos) throw std::invalid_argument("no comma");
      idx = std::stol(line.substr(0, comma));
      phase = std::stol(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw DataError(dir.string() + "/labels.csv: malformed row '" + line + "'");
    }
    if (idx != static_cast<long>(video.labels.size()) || phase < 0)
      throw DataError(dir.string() + "/labels.csv: bad row '" + line + "'");
    video.labels.push_back(static_cast<int>(phase));
  }
  if (static_cast<Index>(video.labels.size()) != n)
    throw DataError(dir.string() + ": " + std::to_string(video.labels.size()) + " labels for " + std::to_string(n) +
                    " frames");
  return video;
}

void BenchmarkConfig::validate() const {
  if (train_videos < 1 || val_videos < 0 || test_videos < 0) throw ConfigError("bad video counts");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) throw ConfigError("labeled_fraction must be in (0, 1]");
  if (min_length < 1 || max_length < min_length) throw ConfigError("bad video length range");
}

std::string manifest_hash(const json& manifest) { return io::hex64(io::fnv1a(manifest.dump())); }

json make_benchmark(const BenchmarkConfig& cfg, const std::filesystem::path& root) {
  cfg.validate();
  const auto model = WorkflowModel::standard(cfg.num_phases, cfg.frame_size);
  model.validate();

  const int total = cfg.train_videos + cfg.val_videos + cfg.test_videos;
  std::vector<LabeledVideo> videos;
  RngStream lengths(cfg.seed, kLengthStream);
  for (int i = 0; i < total; ++i) {
    const Index len = lengths.uniform_int(cfg.min_length, cfg.max_length);
    RngStream rng = RngStream(cfg.seed, kVideoStream).child(i);
    char id[32];
    std::snprintf(id, sizeof id, "video_%03d", i);
    videos.push_back(generate_video(model, len, rng, id));
  }

  const int n_labeled =
      std::max(1, static_cast<int>(std::floor(cfg.labeled_fraction * cfg.train_videos + 1e-9)));
  std::vector<int> labeled;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) throw DataError("no labeled subset covers every phase");
    std::vector<int> order(cfg.train_videos);
    for (int i = 0; i < cfg.train_videos; ++i) order[i] = i;
    RngStream rng = RngStream(cfg.seed, kLabeledStream).child(attempt);
    std::shuffle(order.begin(), order.end(), rng.engine());
    order.resize(n_labeled);
    std::set<int> seen;
    for (int v : order) seen.insert(videos[v].labels.begin(), videos[v].labels.end());
    if (static_cast<int>(seen.size()) == cfg.num_phases) {
      std::sort(order.begin(), order.end());
      labeled = std::move(order);
      break;
    }
  }

  std::map<std::string, std::vector<int>> splits;
  for (int i = 0; i < cfg.train_videos; ++i)
    splits[std::binary_search(labeled.begin(), labeled.end(), i) ? "train_labeled" : "train_unlabeled"].push_back(i);
  for (int i = 0; i < cfg.val_videos; ++i) splits["val"].push_back(cfg.train_videos + i);
  for (int i = 0; i < cfg.test_videos; ++i) splits["test"].push_back(cfg.train_videos + cfg.val_videos + i);

  std::filesystem::create_directories(root);
  json split_ids = json::object();
  json video_info = json::object();
  for (const auto& name : split_names()) {
    split_ids[name] = json::array();
    for (int i : splits[name]) {
      save_video(videos[i], root / name / videos[i].id);
      split_ids[name].push_back(videos[i].id);
      video_info[videos[i].id] = {{"split", name}, {"length", videos[i].size()}, {"hash", label_hash(videos[i])}};
    }
  }

  std::vector<LabeledVideo> train(videos.begin(), videos.begin() + cfg.train_videos);
  const json manifest{{"format_version", 1},
                      {"seed", cfg.seed},
                      {"benchmark",
                       {{"train_videos", cfg.train_videos},
                        {"val_videos", cfg.val_videos},
                        {"test_videos", cfg.test_videos},
                        {"labeled_fraction", cfg.labeled_fraction},
                        {"min_length", cfg.min_length},
                        {"max_length", cfg.max_length},
                        {"num_phases", cfg.num_phases},
                        {"frame_size", cfg.frame_size}}},
                      {"generator", model},
                      {"splits", split_ids},
                      {"videos", video_info},
                      {"normalization", dataset_statistics(train)}};
  io::write_text(root / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

json load_manifest(const std::filesystem::path& root) {
  try {
    return json::parse(io::read_text(root / "manifest.json"));
  } catch (const json::exception& e) {
    throw DataError((root / "manifest.json").string() + ": " + e.what());
  }
}

std::vector<LabeledVideo> load_split(const std::filesystem::path& root, const std::string& split) {
  const json manifest = load_manifest(root);
  std::vector<LabeledVideo> out;
  const auto& splits = manifest.at("splits");
  if (!splits.contains(split)) throw DataError("manifest has no split '" + split + "'");
  for (const auto& id : splits.at(split)) out.push_back(load_video(root / split / id.get<std::string>()));
  return out;
}

}  // namespace semivt
