#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "semivt/eval.hpp"
#include "semivt/io.hpp"
#include "support/metrics_oracle.hpp"
#include "support/tiny_data.hpp"

#include <algorithm>
#include <numeric>
#include <random>

using namespace semivt;
using namespace semivt::testing;

namespace {

PredictionTrack track_of(std::vector<int> pred, std::string id = "v") {
  PredictionTrack t;
  t.video_id = std::move(id);
  t.confidence.assign(pred.size(), 1.0f);
  t.predicted = std::move(pred);
  return t;
}

}  // namespace

TEST_CASE("hand-counted confusion matrix") {
  const auto r = compute_metrics({track_of({0, 1, 1, 1})}, {{0, 0, 1, 1}}, 2);
  const auto& v = r.videos.at(0);
  CHECK(v.accuracy == 0.75);
  CHECK(v.phases[0].precision == doctest::Approx(1.0));
  CHECK(v.phases[0].recall == doctest::Approx(0.5));
  CHECK(v.phases[0].jaccard == doctest::Approx(0.5));
  CHECK(v.phases[0].f1 == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(v.phases[1].precision == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(v.phases[1].recall == doctest::Approx(1.0));
  CHECK(v.phases[1].jaccard == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(v.phases[1].f1 == doctest::Approx(0.8));
  CHECK(r.accuracy.mean == 0.75);
  CHECK(r.accuracy.std == 0.0);
}

TEST_CASE("perfect and single-phase predictions") {
  const auto r = compute_metrics({track_of({2, 2, 0, 1})}, {{2, 2, 0, 1}}, 4);
  for (double m : {r.accuracy.mean, r.precision.mean, r.recall.mean, r.jaccard.mean, r.f1.mean}) CHECK(m == 1.0);
  CHECK(!r.videos[0].phases[3].present);

  const auto s = compute_metrics({track_of({1, 1, 1})}, {{1, 1, 1}}, 5);
  CHECK(s.videos[0].accuracy == 1.0);
  CHECK(s.videos[0].precision == 1.0);
  int present = 0;
  for (const auto& p : s.videos[0].phases) present += p.present;
  CHECK(present == 1);
  CHECK(s.phase_videos == std::vector<int>{0, 1, 0, 0, 0});
}

TEST_CASE("compute_metrics equals a brute-force tally") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = std::uniform_int_distribution<int>(1, 6)(rng);
    const int videos = std::uniform_int_distribution<int>(1, 4)(rng);
    std::vector<PredictionTrack> tracks;
    std::vector<std::vector<int>> truth;
    for (int v = 0; v < videos; ++v) {
      const int len = std::uniform_int_distribution<int>(1, 50)(rng);
      std::uniform_int_distribution<int> phase(0, classes - 1);
      std::vector<int> gt(len), pred(len);
      for (int i = 0; i < len; ++i) {
        gt[i] = phase(rng);
        pred[i] = std::bernoulli_distribution(0.6)(rng) ? gt[i] : phase(rng);
      }
      tracks.push_back(track_of(pred));
      truth.push_back(gt);
    }
    const auto r = compute_metrics(tracks, truth, classes);
    std::vector<double> acc, prec, rec, jac, f1;
    for (int v = 0; v < videos; ++v) {
      const auto o = oracle_video(truth[v], tracks[v].predicted, classes);
      const auto& got = r.videos[v];
      CHECK(got.accuracy == o.accuracy);
      CHECK(got.precision == o.precision);
      CHECK(got.recall == o.recall);
      CHECK(got.jaccard == o.jaccard);
      CHECK(got.f1 == o.f1);
      for (int c = 0; c < classes; ++c) {
        CHECK(got.phases[c].present == o.present[c]);
        CHECK(got.phases[c].precision == o.p[c]);
        CHECK(got.phases[c].recall == o.r[c]);
        CHECK(got.phases[c].jaccard == o.j[c]);
        CHECK(got.phases[c].f1 == o.f[c]);
      }
      acc.push_back(o.accuracy);
      prec.push_back(o.precision);
      rec.push_back(o.recall);
      jac.push_back(o.jaccard);
      f1.push_back(o.f1);
    }
    CHECK(r.accuracy.mean == oracle_mean_std(acc).first);
    CHECK(r.accuracy.std == oracle_mean_std(acc).second);
    CHECK(r.precision.mean == oracle_mean_std(prec).first);
    CHECK(r.recall.mean == oracle_mean_std(rec).first);
    CHECK(r.jaccard.mean == oracle_mean_std(jac).first);
    CHECK(r.f1.std == oracle_mean_std(f1).second);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int classes = 5;
    std::uniform_int_distribution<int> phase(0, classes - 1);
    std::vector<int> gt(30), pred(30);
    for (int i = 0; i < 30; ++i) {
      gt[i] = phase(rng);
      pred[i] = phase(rng);
    }
    std::vector<int> perm(classes);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> gt2(30), pred2(30);
    for (int i = 0; i < 30; ++i) {
      gt2[i] = perm[gt[i]];
      pred2[i] = perm[pred[i]];
    }
    const auto a = compute_metrics({track_of(pred)}, {gt}, classes);
    const auto b = compute_metrics({track_of(pred2)}, {gt2}, classes);
    CHECK(a.accuracy.mean == b.accuracy.mean);
    for (double m : {a.accuracy.mean, a.precision.mean, a.recall.mean, a.jaccard.mean, a.f1.mean}) {
      CHECK(m >= 0.0);
      CHECK(m <= 1.0);
    }
    const auto twice = compute_metrics({track_of(pred), track_of(pred)}, {gt, gt}, classes);
    CHECK(twice.accuracy.std == 0.0);
    CHECK(twice.f1.std == 0.0);
  }
  CHECK_THROWS_AS(compute_metrics({track_of({0, 1})}, {{0}}, 2), InputError);
  CHECK_THROWS_AS(compute_metrics({track_of({0})}, {}, 2), InputError);
}

TEST_CASE("metrics report json round trip") {
  const auto r = compute_metrics({track_of({0, 1, 1, 2}, "a"), track_of({2, 2, 1}, "b")}, {{0, 0, 1, 2}, {2, 1, 1}}, 3);
  const nlohmann::json j = r;
  const auto back = j.get<MetricsReport>();
  CHECK(nlohmann::json(back) == j);
  CHECK(j.at("num_videos") == 2);
}

TEST_CASE("online_predict is causal and matches frame-wise recomputation") {
  const auto data = tiny_data(1, 0, 20);
  const auto& video = data.labeled[0];
  for (bool tcn : {false, true}) {
    auto cfg = tiny_model();
    cfg.tcn_head = tcn;
    const Architecture arch(cfg);
    const auto params = init_parameters<float>(cfg, 3);
    const auto track = online_predict(arch, params, video.frames, data.norm, tcn, video.id);
    REQUIRE(track.size() == video.size());

    for (Index t : {Index{0}, Index{7}, Index{18}}) {
      auto changed = video.frames;
      std::mt19937_64 rng(t);
      std::uniform_real_distribution<float> u(0.0f, 1.0f);
      for (Index i = t + 1; i < video.size(); ++i)
        for (Index k = 0; k < changed[i].size(); ++k) changed[i].data()[k] = u(rng);
      const auto other = online_predict(arch, params, changed, data.norm, tcn);
      for (Index i = 0; i <= t; ++i) {
        CHECK(other.predicted[i] == track.predicted[i]);
        CHECK(other.confidence[i] == track.confidence[i]);
      }
    }

    const auto single = online_predict(arch, params, std::span(video.frames).first(1), data.norm, tcn);
    CHECK(single.size() == 1);

    if (!tcn) {
      RngStream unused(0, 0);
      for (Index t = 0; t < video.size(); ++t) {
        const auto w = apply_pixel_policy(weak_view(video.frames, t, cfg.window_len), AugmentPolicy::none(), data.norm, unused);
        const auto p = classify(arch, encode(arch, w, params), params);
        CHECK(track.predicted[t] == p.argmax());
        CHECK(track.confidence[t] == p.max());
      }
    } else {
      CHECK_THROWS_AS(online_predict(Architecture(tiny_model()), init_parameters<float>(tiny_model(), 3), video.frames,
                                     data.norm, true),
                      ConfigError);
    }
  }
  const Architecture arch(tiny_model());
  CHECK_THROWS_AS(online_predict(arch, init_parameters<float>(tiny_model(), 3), std::span<const Frame>{}, data.norm, false),
                  InputError);
}

TEST_CASE("ribbon export") {
  TempDir tmp("ribbon");
  const std::vector<int> gt{0, 0, 1, 2, 2, 2, 1};
  const auto track = track_of({0, 1, 1, 2, 2, 0, 1});
  export_ribbon(track, gt, tmp.path / "r.csv", tmp.path / "r.ppm", 3);
  const auto text = io::read_text(tmp.path / "r.csv");
  CHECK(std::count(text.begin(), text.end(), '\n') == 8);
  const auto rows = read_ribbon(tmp.path / "r.csv");
  CHECK(rows.truth == gt);
  CHECK(rows.predicted == track.predicted);

  const auto ppm = io::read_text(tmp.path / "r.ppm");
  std::istringstream head(ppm);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  head >> magic >> w >> h >> maxval;
  CHECK(magic == "P6");
  CHECK(w == 7 * 3);
  CHECK(h == 34);
  const std::size_t header = ppm.size() - static_cast<std::size_t>(w) * h * 3;
  auto pixel = [&](int x, int y) { return ppm.substr(header + (static_cast<std::size_t>(y) * w + x) * 3, 3); };
  // Top band follows the ground truth, bottom band the prediction.
  CHECK(pixel(3, 0) == pixel(0, 0));   // gt frame 1 = gt frame 0
  CHECK(pixel(3, 33) != pixel(0, 33)); // pred frame 1 != pred frame 0
  CHECK(pixel(15, 0) != pixel(15, 33));

  export_ribbon(track, gt, tmp.path / "only.csv");
  CHECK(!std::filesystem::exists(tmp.path / "only.ppm"));
  CHECK_THROWS_AS(export_ribbon(track, {0, 1}, tmp.path / "bad.csv"), InputError);
}
