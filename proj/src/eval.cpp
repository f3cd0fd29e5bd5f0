#include "semivt/eval.hpp"

#include "semivt/io.hpp"
#include "semivt/tcn.hpp"

#include <cmath>
#include <sstream>

namespace semivt {

namespace {

using nlohmann::json;

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  if (v.empty()) return out;
  double sum = 0;
  for (double x : v) sum += x;
  out.mean = sum / v.size();
  double sq = 0;
  for (double x : v) sq += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(sq / v.size());
  return out;
}

double ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

json to_json_ms(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }
MeanStd ms_from_json(const json& j) { return {j.at("mean"), j.at("std")}; }

}  // namespace

PredictionTrack online_predict(const Architecture& arch, const ParameterSet<float>& params,
                               std::span<const Frame> frames, const Normalization& norm, bool use_tcn,
                               std::string video_id) {
  if (frames.empty()) throw InputError("online_predict: empty video");
  if (use_tcn && !arch.config.tcn_head) throw ConfigError("online_predict: model has no tcn head");
  arch.check(params);
  const auto policy = AugmentPolicy::none();
  RngStream unused(0, 0);

  PredictionTrack track;
  track.video_id = std::move(video_id);
  std::vector<FeatureEmbedding<float>> feats;
  std::vector<PhaseDistribution<float>> dists;
  for (Index t = 0; t < static_cast<Index>(frames.size()); ++t) {
    const auto window = apply_pixel_policy(weak_view(frames, t, arch.config.window_len), policy, norm, unused);
    feats.push_back(encode(arch, window, params));
    if (!use_tcn) dists.push_back(classify(arch, feats.back(), params));
  }
  // Causal convolutions: row t of the output depends on rows <= t only.
  if (use_tcn) dists = tcn_refine(arch, feats, params);
  for (const auto& d : dists) {
    track.predicted.push_back(static_cast<int>(d.argmax()));
    track.confidence.push_back(d.max());
  }
  return track;
}

MetricsReport compute_metrics(const std::vector<PredictionTrack>& tracks, const std::vector<std::vector<int>>& truth,
                              int num_classes) {
  if (num_classes < 1) throw InputError("compute_metrics: num_classes must be >= 1");
  if (tracks.size() != truth.size()) throw InputError("compute_metrics: track and ground-truth counts differ");
  MetricsReport r;
  r.num_classes = num_classes;
  r.phase_f1.assign(num_classes, 0.0);
  r.phase_videos.assign(num_classes, 0);
  std::vector<double> acc, prec, rec, jac, f1;
  for (std::size_t v = 0; v < tracks.size(); ++v) {
    const auto& pred = tracks[v].predicted;
    const auto& gt = truth[v];
    if (pred.size() != gt.size())
      throw InputError("compute_metrics: video " + tracks[v].video_id + " has " + std::to_string(pred.size()) +
                       " predictions for " + std::to_string(gt.size()) + " labels");
    std::vector<long> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    long correct = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] < 0 || gt[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes)
        throw InputError("compute_metrics: phase id out of range");
      if (gt[i] == pred[i]) {
        ++correct;
        ++tp[gt[i]];
      } else {
        ++fp[pred[i]];
        ++fn[gt[i]];
      }
    }
    VideoMetrics vm;
    vm.video_id = tracks[v].video_id;
    vm.accuracy = ratio(correct, static_cast<double>(gt.size()));
    vm.phases.resize(num_classes);
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
      auto& pm = vm.phases[c];
      pm.present = tp[c] + fp[c] + fn[c] > 0;
      if (!pm.present) continue;
      ++present;
      pm.precision = ratio(tp[c], tp[c] + fp[c]);
      pm.recall = ratio(tp[c], tp[c] + fn[c]);
      pm.jaccard = ratio(tp[c], tp[c] + fp[c] + fn[c]);
      pm.f1 = ratio(2 * pm.precision * pm.recall, pm.precision + pm.recall);
      vm.precision += pm.precision;
      vm.recall += pm.recall;
      vm.jaccard += pm.jaccard;
      vm.f1 += pm.f1;
      r.phase_f1[c] += pm.f1;
      ++r.phase_videos[c];
    }
    if (present > 0) {
      vm.precision /= present;
      vm.recall /= present;
      vm.jaccard /= present;
      vm.f1 /= present;
    }
    acc.push_back(vm.accuracy);
    prec.push_back(vm.precision);
    rec.push_back(vm.recall);
    jac.push_back(vm.jaccard);
    f1.push_back(vm.f1);
    r.videos.push_back(std::move(vm));
  }
  for (int c = 0; c < num_classes; ++c)
    if (r.phase_videos[c] > 0) r.phase_f1[c] /= r.phase_videos[c];
  r.accuracy = mean_std(acc);
  r.precision = mean_std(prec);
  r.recall = mean_std(rec);
  r.jaccard = mean_std(jac);
  r.f1 = mean_std(f1);
  return r;
}

void to_json(json& j, const MetricsReport& r) {
  json videos = json::array();
  for (const auto& v : r.videos) {
    json phases = json::array();
    for (const auto& p : v.phases)
      phases.push_back({{"present", p.present},
                        {"precision", p.precision},
                        {"recall", p.recall},
                        {"jaccard", p.jaccard},
                        {"f1", p.f1}});
    videos.push_back({{"video_id", v.video_id},
                      {"accuracy", v.accuracy},
                      {"precision", v.precision},
                      {"recall", v.recall},
                      {"jaccard", v.jaccard},
                      {"f1", v.f1},
                      {"phases", phases}});
  }
  j = json{{"num_classes", r.num_classes},
           {"num_videos", r.videos.size()},
           {"accuracy", to_json_ms(r.accuracy)},
           {"precision", to_json_ms(r.precision)},
           {"recall", to_json_ms(r.recall)},
           {"jaccard", to_json_ms(r.jaccard)},
           {"f1", to_json_ms(r.f1)},
           {"phase_f1", r.phase_f1},
           {"phase_videos", r.phase_videos},
           {"absent_phase_rule", r.absent_phase_rule},
           {"zero_division", r.zero_division},
           {"videos", videos}};
}

void from_json(const json& j, MetricsReport& r) {
  try {
    r.num_classes = j.at("num_classes");
    r.accuracy = ms_from_json(j.at("accuracy"));
    r.precision = ms_from_json(j.at("precision"));
    r.recall = ms_from_json(j.at("recall"));
    r.jaccard = ms_from_json(j.at("jaccard"));
    r.f1 = ms_from_json(j.at("f1"));
    r.phase_f1 = j.at("phase_f1").get<std::vector<double>>();
    r.phase_videos = j.at("phase_videos").get<std::vector<int>>();
    r.absent_phase_rule = j.at("absent_phase_rule");
    r.zero_division = j.at("zero_division");
    r.videos.clear();
    for (const auto& v : j.at("videos")) {
      VideoMetrics vm;
      vm.video_id = v.at("video_id");
      vm.accuracy = v.at("accuracy");
      vm.precision = v.at("precision");
      vm.recall = v.at("recall");
      vm.jaccard = v.at("jaccard");
      vm.f1 = v.at("f1");
      for (const auto& p : v.at("phases")) vm.phases.push_back({p.at("present"), p.at("precision"), p.at("recall"), p.at("jaccard"), p.at("f1")});
      r.videos.push_back(std::move(vm));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("metrics report: ") + e.what());
  }
}

void export_ribbon(const PredictionTrack& track, const std::vector<int>& truth, const std::filesystem::path& csv,
                   const std::filesystem::path& image, int scale) {
  if (truth.size() != track.predicted.size()) throw InputError("export_ribbon: track and ground truth differ in length");
  std::ostringstream out;
  out << "frame,gt_phase,pred_phase\n";
  for (std::size_t i = 0; i < truth.size(); ++i) out << i << ',' << truth[i] << ',' << track.predicted[i] << '\n';
  io::write_text(csv, out.str());
  if (image.empty()) return;

  if (scale < 1) throw InputError("export_ribbon: scale must be >= 1");
  static constexpr unsigned char kPalette[][3] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},
                                                  {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127},
                                                  {188, 189, 34}, {23, 190, 207}};
  constexpr int kBand = 16, kGap = 2;
  const int width = static_cast<int>(truth.size()) * scale;
  const int height = 2 * kBand + kGap;
  std::string ppm = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (y >= kBand && y < kBand + kGap) {
        ppm.append(3, static_cast<char>(255));
        continue;
      }
      const int phase = y < kBand ? truth[x / scale] : track.predicted[x / scale];
      const auto* rgb = kPalette[static_cast<std::size_t>(phase) % std::size(kPalette)];
      ppm.append(reinterpret_cast<const char*>(rgb), 3);
    }
  io::write_text(image, ppm);
}

RibbonRows read_ribbon(const std::filesystem::path& csv) {
  std::istringstream in(io::read_text(csv));
  std::string line;
  if (!std::getline(in, line) || line != "frame,gt_phase,pred_phase") throw DataError(csv.string() + ": bad header");
  RibbonRows rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string a, b, c;
    if (!std::getline(fields, a, ',') || !std::getline(fields, b, ',') || !std::getline(fields, c))
      throw DataError(csv.string() + ": malformed row '" + line + "'");
    try {
      if (std::stoul(a) != rows.truth.size()) throw DataError(csv.string() + ": frames out of order");
      rows.truth.push_back(std::stoi(b));
      rows.predicted.push_back(std::stoi(c));
    } catch (const std::logic_error&) {
      throw DataError(csv.string() + ": malformed row '" + line + "'");
    }
  }
  return rows;
}

}  // namespace semivt
