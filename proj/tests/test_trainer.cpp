#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "semivt/checkpoint.hpp"
#include "semivt/eval.hpp"
#include "semivt/io.hpp"
#include "semivt/step.hpp"
#include "semivt/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/reference_model.hpp"
#include "support/tiny_data.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace semivt;
using namespace semivt::testing;
namespace fs = std::filesystem;

namespace {

FrameWindow random_window(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  FrameWindow w;
  for (int t = 0; t < c.window_len; ++t) {
    Frame f(c.channels, c.frame_size * c.frame_size);
    for (Index i = 0; i < f.size(); ++i) f.data()[i] = n(rng);
    w.frames.push_back(f);
  }
  w.query_index = c.window_len - 1;
  return w;
}

PrototypeBank<double> random_bank(Index classes, Index dim, std::uint64_t seed, double margin = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  PrototypeBank<double> bank;
  bank.vectors.resize(classes, dim);
  for (Index c = 0; c < classes; ++c) {
    for (Index k = 0; k < dim; ++k) bank.vectors(c, k) = n(rng);
    bank.vectors.row(c).normalize();
  }
  bank.margin = margin;
  bank.initialized = true;
  return bank;
}

// Scalar re-implementation of classifier, losses and prototype updates.
struct ScalarOracle {
  ModelConfig cfg;

  std::vector<double> probs(const ParameterSet<double>& p, const std::vector<double>& f) const {
    const auto& w = tensor(p, "classifier.weight");
    const auto& b = tensor(p, "classifier.bias");
    std::vector<double> z(cfg.num_classes);
    for (int c = 0; c < cfg.num_classes; ++c) {
      z[c] = b(0, c);
      for (int k = 0; k < cfg.embed_dim; ++k) z[c] += f[k] * w(k, c);
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (double& v : z) s += (v = std::exp(v - mx));
    for (double& v : z) v /= s;
    return z;
  }

  static std::vector<double> unit(std::vector<double> f) {
    double n = 0;
    for (double v : f) n += v * v;
    n = std::sqrt(n);
    for (double& v : f) v /= n;
    return f;
  }

  static double dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
  }

  static double triplet(const std::vector<double>& f, int y, const std::vector<std::vector<double>>& bank,
                        double margin, int k) {
    std::vector<std::pair<double, int>> d;
    for (int c = 0; c < static_cast<int>(bank.size()); ++c)
      if (c != y) d.push_back({dist(f, bank[c]), c});
    std::sort(d.begin(), d.end());
    k = std::min<int>(k, static_cast<int>(d.size()));
    std::vector<double> neg(f.size(), 0.0);
    for (int i = 0; i < k; ++i)
      for (std::size_t j = 0; j < f.size(); ++j) neg[j] += bank[d[i].second][j] / k;
    return std::max(0.0, dist(f, bank[y]) - dist(f, neg) + margin);
  }

  static void update(std::vector<std::vector<double>>& bank, int y, const std::vector<double>& f, double eta) {
    for (std::size_t j = 0; j < f.size(); ++j) bank[y][j] = eta * bank[y][j] + (1 - eta) * f[j];
  }
};

std::vector<std::string> read_lines(const fs::path& p) {
  std::istringstream in(io::read_text(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<StepRecord> run_all(Trainer& tr) {
  std::vector<StepRecord> recs;
  while (!tr.finished()) tr.run_epoch([&](const StepRecord& r) { recs.push_back(r); });
  return recs;
}

}  // namespace

TEST_CASE("sgd_step follows the momentum rule") {
  ParameterSet<double> p, g, v;
  p.add("w", Matrix<double>::Constant(1, 1, 1.0));
  g.add("w", Matrix<double>::Constant(1, 1, 1.0));
  v.add("w", Matrix<double>::Zero(1, 1));
  sgd_step(p, g, v, 0.005, 0.9, 0.001);
  CHECK(v[0](0, 0) == doctest::Approx(1.001).epsilon(1e-12));
  CHECK(p[0](0, 0) == doctest::Approx(0.994995).epsilon(1e-12));

  ParameterSet<double> q, zero, vel;
  q.add("a", Matrix<double>::Constant(2, 3, 0.7));
  zero.add("a", Matrix<double>::Zero(2, 3));
  vel.add("a", Matrix<double>::Constant(2, 3, 2.0));
  const auto before = q;
  sgd_step(q, zero, vel, 0.1, 0.9, 0.0);
  CHECK(vel[0].isApprox(Matrix<double>::Constant(2, 3, 1.8)));
  CHECK(q[0].isApprox(before[0] - 0.1 * vel[0]));

  ParameterSet<double> none, nog, nov;
  none.add("x", Matrix<double>::Ones(1, 2));
  nov.add("x", Matrix<double>::Zero(1, 2));
  nog.add("x", Matrix<double>::Ones(1, 2));
  nog[0](0, 1) = std::nan("");
  try {
    sgd_step(none, nog, nov, 0.1, 0.9, 0.0);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("x") != std::string::npos);
  }
  CHECK(none[0] == Matrix<double>::Ones(1, 2));
}

TEST_CASE("learning rate halves at epochs 8 and 12") {
  TrainConfig t;
  for (int e = 1; e < 8; ++e) CHECK(t.lr_at(e) == 0.005);
  CHECK(t.lr_at(8) == 0.0025);
  CHECK(t.lr_at(11) == 0.0025);
  CHECK(t.lr_at(12) == 0.00125);
  CHECK(t.lr_at(15) == 0.00125);
  CHECK(t.total_epochs() == 15);
}

TEST_CASE("modes select loss terms") {
  CHECK(mode_from_string("SUP") == Mode::kSup);
  CHECK(mode_from_string("TCR") == Mode::kTcr);
  CHECK(mode_from_string("SUP+TCR+CLP") == Mode::kClp);
  CHECK(mode_from_string("TCN") == Mode::kTcn);
  CHECK_THROWS_AS(mode_from_string("FOO"), ConfigError);
  for (Mode m : {Mode::kSup, Mode::kTcr, Mode::kClp, Mode::kTcn}) {
    CHECK(mode_from_string(to_string(m)) == m);
    const auto warm = terms_for(m, true);
    CHECK((warm.sup && !warm.reg && !warm.tri_l && !warm.tri_u));
  }
  CHECK(!terms_for(Mode::kSup, false).reg);
  const auto tcr = terms_for(Mode::kTcr, false);
  CHECK((tcr.reg && !tcr.tri_l && !tcr.tri_u));
  const auto clp = terms_for(Mode::kClp, false);
  CHECK((clp.reg && clp.tri_l && clp.tri_u));
}

TEST_CASE("train config json and validation") {
  TrainConfig t;
  t.mode = Mode::kTcr;
  t.seed = 42;
  t.delta = 0.6;
  nlohmann::json j = t;
  CHECK(j.get<TrainConfig>() == t);
  j["momentum"] = 1.5;
  CHECK_THROWS_AS(j.get<TrainConfig>(), ConfigError);
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("archive round trip and errors") {
  TempDir tmp("archive");
  Archive ar;
  ar.config = tiny_model();
  ar.add_set("student/", init_parameters<float>(ar.config, 1));
  ar.add("extra", Matrix<float>::Constant(2, 3, 1.5f));
  ar.meta = {{"epoch", 4}};
  save_archive(ar, tmp.path / "a.ckpt");
  const auto back = load_archive(tmp.path / "a.ckpt");
  CHECK(back.config == ar.config);
  CHECK(back.meta == ar.meta);
  CHECK(back.names == ar.names);
  for (std::size_t i = 0; i < ar.tensors.size(); ++i) CHECK(back.tensors[i] == ar.tensors[i]);
  CHECK(back.extract_set("student/", make_layout(ar.config)) == init_parameters<float>(ar.config, 1));
  CHECK_THROWS_AS(back.at("missing"), DataError);

  auto bytes = io::read_text(tmp.path / "a.ckpt");
  auto bumped = bytes;
  bumped[8] = 2;
  io::write_text(tmp.path / "v.ckpt", bumped);
  CHECK_THROWS_WITH_AS(load_archive(tmp.path / "v.ckpt"), doctest::Contains("version"), DataError);
  io::write_text(tmp.path / "t.ckpt", bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_WITH_AS(load_archive(tmp.path / "t.ckpt"), doctest::Contains("corrupt manifest"), DataError);
  auto garbled = bytes;
  garbled[22] = '#';
  io::write_text(tmp.path / "g.ckpt", garbled);
  CHECK_THROWS_AS(load_archive(tmp.path / "g.ckpt"), DataError);
}

TEST_CASE("single step matches a scalar recomputation") {
  const ModelConfig cfg = tiny_model(3);
  const Architecture arch(cfg);
  const auto student = init_parameters<double>(cfg, 3);
  const auto teacher = init_parameters<double>(cfg, 4);
  const ScalarOracle oracle{cfg};

  StepInputs in;
  in.labeled = {random_window(cfg, 10), random_window(cfg, 11)};
  in.labels = {0, 2};
  const std::vector<FrameWindow> weak{random_window(cfg, 20), random_window(cfg, 21)};
  const std::vector<FrameWindow> strong{random_window(cfg, 30), random_window(cfg, 31)};
  in.unlabeled_weak = weak;
  in.unlabeled_strong = [&](std::size_t j) { return strong[j]; };

  // Threshold between the two teacher confidences: exactly one sample passes.
  std::vector<std::vector<double>> tp;
  for (const auto& w : weak) tp.push_back(oracle.probs(teacher, reference_encode(cfg, w, teacher)));
  const double m0 = *std::max_element(tp[0].begin(), tp[0].end());
  const double m1 = *std::max_element(tp[1].begin(), tp[1].end());
  REQUIRE(std::abs(m0 - m1) > 1e-6);

  StepOptions opt;
  opt.terms = terms_for(Mode::kClp, false);
  opt.gate = GateConfig{(m0 + m1) / 2};

  auto bank = random_bank(3, cfg.embed_dim, 7);
  std::vector<std::vector<double>> rb;
  for (Index c = 0; c < 3; ++c) rb.emplace_back(bank.vectors.row(c).data(), bank.vectors.row(c).data() + cfg.embed_dim);

  const auto out = compute_step<double>(arch, student, &teacher, &bank, in, opt);

  LossBreakdown expect;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto f = reference_encode(cfg, in.labeled[i], student);
    const int y = static_cast<int>(in.labels[i]);
    expect.l_sup += -std::log(oracle.probs(student, f)[y]) / 2;
    const auto u = ScalarOracle::unit(f);
    expect.l_tri_l += ScalarOracle::triplet(u, y, rb, 0.3, 3) / 2;
    ScalarOracle::update(rb, y, u, 0.9);
  }
  int gated = 0;
  for (std::size_t j = 0; j < 2; ++j) {
    const auto& p = tp[j];
    const int yhat = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    if (p[yhat] < opt.gate.delta) continue;
    ++gated;
    const auto fs = reference_encode(cfg, strong[j], student);
    expect.l_reg += -std::log(oracle.probs(student, fs)[yhat]) / 2;
    const auto ut = ScalarOracle::unit(reference_encode(cfg, weak[j], teacher));
    expect.l_tri_u += ScalarOracle::triplet(ut, yhat, rb, 0.3, 3) / 2;
    ScalarOracle::update(rb, yhat, ut, 0.9);
  }
  CHECK(gated == 1);
  CHECK(out.gated == 1);
  CHECK(out.unlabeled == 2);
  CHECK(out.losses.l_sup == doctest::Approx(expect.l_sup).epsilon(1e-9));
  CHECK(out.losses.l_reg == doctest::Approx(expect.l_reg).epsilon(1e-9));
  CHECK(out.losses.l_tri_l == doctest::Approx(expect.l_tri_l).epsilon(1e-9));
  CHECK(out.losses.l_tri_u == doctest::Approx(expect.l_tri_u).epsilon(1e-9));
  const double total = expect.l_sup + expect.l_reg + expect.l_tri_l + expect.l_tri_u;
  CHECK(out.losses.l_total == doctest::Approx(total).epsilon(1e-9));
  for (Index c = 0; c < 3; ++c)
    for (Index k = 0; k < cfg.embed_dim; ++k) CHECK(bank.vectors(c, k) == doctest::Approx(rb[c][k]).epsilon(1e-9));
}

TEST_CASE("step gradients match finite differences on a micro config") {
  ModelConfig cfg = tiny_model(2);
  cfg.window_len = 2;
  const Architecture arch(cfg);
  auto student = init_parameters<double>(cfg, 8);
  const auto teacher = init_parameters<double>(cfg, 9);

  StepInputs in;
  in.labeled = {random_window(cfg, 40), random_window(cfg, 41)};
  in.labels = {0, 1};
  const std::vector<FrameWindow> strong{random_window(cfg, 50), random_window(cfg, 51)};
  in.unlabeled_weak = {random_window(cfg, 60), random_window(cfg, 61)};
  in.unlabeled_strong = [&](std::size_t j) { return strong[j]; };

  // Large margin keeps every hinge active; the bank stays fixed while probing.
  const auto bank = random_bank(2, cfg.embed_dim, 12, 1.5);
  StepOptions opt;
  opt.gate = GateConfig{0.0};
  opt.update_bank = false;
  opt.tri_u_student_features = true;

  struct Case {
    const char* name;
    ActiveTerms terms;
  };
  const Case cases[] = {{"L_Sup", {true, false, false, false}},
                        {"L_Reg", {false, true, false, false}},
                        {"L_Tri-L", {false, false, true, false}},
                        {"L_Tri-U", {false, false, false, true}},
                        {"L_total", {true, true, true, true}}};
  for (const auto& c : cases) {
    opt.terms = c.terms;
    auto b = bank;
    const auto out = compute_step<double>(arch, student, &teacher, &b, in, opt);
    CHECK(out.gated == (c.terms.any_unlabeled() ? 2u : 0u));
    const auto errs = check_parameter_gradients(student, out.grads, [&] {
      auto bb = bank;
      return compute_step<double>(arch, student, &teacher, &bb, in, opt).losses.l_total;
    });
    INFO(c.name);
    CHECK(worst(errs) < 1e-3);
  }
}

TEST_CASE("teacher equals student after warm-up") {
  const auto data = tiny_data();
  auto cfg = tiny_train(Mode::kClp);
  Trainer tr(tiny_model(), cfg, data);
  CHECK(!tr.state().teacher_ready);
  tr.run_epoch();
  CHECK(tr.state().teacher_ready);
  CHECK(tr.state().teacher == tr.state().student);
  CHECK(tr.state().bank.initialized);
  CHECK(tr.state().bank.num_classes() == 3);
  tr.run_epoch();
  CHECK(!(tr.state().teacher == tr.state().student));
}

TEST_CASE("loss components sum to the total and follow the mode") {
  const auto data = tiny_data();
  for (Mode m : {Mode::kSup, Mode::kTcr, Mode::kClp}) {
    Trainer tr(tiny_model(), tiny_train(m), data);
    const auto recs = run_all(tr);
    REQUIRE(!recs.empty());
    bool semi_gated = false;
    for (const auto& r : recs) {
      const auto& l = r.losses;
      CHECK(std::abs(l.l_total - (l.l_sup + l.l_reg + l.l_tri_l + l.l_tri_u)) < 1e-9);
      if (m != Mode::kClp || r.epoch == 1) {
        CHECK(l.l_tri_l == 0.0);
        CHECK(l.l_tri_u == 0.0);
      }
      if (m == Mode::kSup || r.epoch == 1) {
        CHECK(l.l_reg == 0.0);
        CHECK(r.unlabeled == 0);
      }
      semi_gated = semi_gated || r.gated > 0;
    }
    CHECK(semi_gated == (m != Mode::kSup));
  }
}

TEST_CASE("delta = 1 closes the gate for the whole run") {
  const auto data = tiny_data();
  auto cfg = tiny_train(Mode::kClp);
  cfg.delta = 1.0;
  Trainer tr(tiny_model(), cfg, data);
  bool tri_l = false;
  for (const auto& r : run_all(tr)) {
    CHECK(r.gated == 0);
    CHECK(r.losses.l_reg == 0.0);
    CHECK(r.losses.l_tri_u == 0.0);
    if (r.epoch > 1) tri_l = tri_l || r.losses.l_tri_l > 0.0;
  }
  CHECK(tri_l);
}

TEST_CASE("an empty unlabeled set leaves supervised plus labeled triplet") {
  auto data = tiny_data();
  data.unlabeled.clear();
  Trainer tr(tiny_model(), tiny_train(Mode::kClp), data);
  CHECK(tr.steps_per_epoch(2) == tr.steps_per_epoch(1));
  for (const auto& r : run_all(tr)) {
    CHECK(r.unlabeled == 0);
    CHECK(r.losses.l_reg == 0.0);
    CHECK(r.losses.l_tri_u == 0.0);
  }
}

TEST_CASE("SUP mode ignores unlabeled data") {
  auto with = tiny_data();
  auto without = with;
  without.unlabeled.clear();
  Trainer a(tiny_model(), tiny_train(Mode::kSup), with);
  Trainer b(tiny_model(), tiny_train(Mode::kSup), without);
  run_all(a);
  run_all(b);
  CHECK(a.state().student == b.state().student);
  CHECK(a.state().teacher == b.state().teacher);
}

TEST_CASE("warm-up loss decreases on a separable toy set") {
  // Each phase is a flat frame of its own brightness.
  TrainingData d;
  d.num_classes = 3;
  for (int v = 0; v < 2; ++v) {
    LabeledVideo video;
    video.id = "toy" + std::to_string(v);
    for (int t = 0; t < 48; ++t) {
      const int y = (t / 8 + v) % 3;
      video.frames.push_back(Frame::Constant(1, 256, 0.2f + 0.3f * y));
      video.labels.push_back(y);
    }
    d.labeled.push_back(video);
  }
  d.norm = dataset_statistics(d.labeled);
  auto cfg = tiny_train(Mode::kSup);
  cfg.warmup_epochs = 5;
  cfg.semi_epochs = 0;
  cfg.base_lr = 0.02;
  cfg.weak = AugmentPolicy::none();
  Trainer tr(tiny_model(), cfg, d);
  std::vector<double> mean(6, 0.0);
  std::vector<int> count(6, 0);
  for (const auto& r : run_all(tr)) {
    mean[r.epoch] += r.losses.l_sup;
    ++count[r.epoch];
  }
  for (int e = 1; e <= 5; ++e) mean[e] /= count[e];
  for (int e = 2; e <= 5; ++e) CHECK(mean[e] < mean[e - 1]);
}

TEST_CASE("missing classes and shape mismatches are rejected") {
  auto data = tiny_data();
  for (auto& v : data.labeled)
    for (auto& y : v.labels)
      if (y == 2) y = 1;
  CHECK_THROWS_AS(Trainer(tiny_model(), tiny_train(Mode::kClp), data), DataError);
  const auto good = tiny_data();
  CHECK_THROWS_AS(Trainer(tiny_model(4), tiny_train(Mode::kClp), good), ConfigError);
  auto big = tiny_model();
  big.frame_size = 32;
  CHECK_THROWS_AS(Trainer(big, tiny_train(Mode::kClp), good), ConfigError);
  CHECK_THROWS_AS(Trainer(tiny_model(), tiny_train(Mode::kTcn), good), ConfigError);
}

TEST_CASE("runs are reproducible and resume matches the uninterrupted run") {
  TempDir tmp("resume");
  const auto data = tiny_data();
  const auto model = tiny_model();
  const auto cfg = tiny_train(Mode::kClp, 3);

  RunOptions a;
  a.run_dir = tmp.path / "a";
  const auto sa = train_run(model, cfg, data, a);
  RunOptions b;
  b.run_dir = tmp.path / "b";
  train_run(model, cfg, data, b);
  const auto la = read_lines(a.run_dir / "metrics.jsonl");
  CHECK(la == read_lines(b.run_dir / "metrics.jsonl"));
  CHECK(la.size() == sa.step);

  RunOptions c;
  c.run_dir = tmp.path / "c";
  c.stop_after_epoch = 2;
  const auto partial = train_run(model, cfg, data, c);
  CHECK(partial.epoch == 2);
  CHECK(!fs::exists(c.run_dir / "final" / "teacher.ckpt"));
  // A stray line from an epoch that never reached its checkpoint.
  {
    std::ofstream log(c.run_dir / "metrics.jsonl", std::ios::app);
    log << R"({"epoch":3,"step":999})" << "\n";
  }
  c.stop_after_epoch = 0;
  c.resume = true;
  const auto resumed = train_run(model, cfg, data, c);
  CHECK(read_lines(c.run_dir / "metrics.jsonl") == la);
  CHECK(resumed.teacher == sa.teacher);
  CHECK(resumed.student == sa.student);
  CHECK(io::read_text(c.run_dir / "final" / "teacher.ckpt") == io::read_text(a.run_dir / "final" / "teacher.ckpt"));

  auto other = model;
  other.embed_dim = 32;
  Trainer mismatched(other, cfg, data);
  CHECK_THROWS_AS(mismatched.restore(load_archive(a.run_dir / "checkpoints" / "epoch_1.ckpt")), ConfigError);
  auto other_cfg = cfg;
  other_cfg.seed = 4;
  Trainer reseeded(model, other_cfg, data);
  CHECK_THROWS_AS(reseeded.restore(load_archive(a.run_dir / "checkpoints" / "epoch_1.ckpt")), ConfigError);

  const auto final_model = load_model(a.run_dir / "final" / "teacher.ckpt");
  CHECK(final_model.config == model);
  CHECK(final_model.params == sa.teacher);
  CHECK(final_model.norm == data.norm);
  CHECK(load_model(a.run_dir / "final" / "teacher.ckpt", true).params == sa.student);
  CHECK(fs::exists(a.run_dir / "config.json"));
  CHECK(fs::exists(a.run_dir / "checkpoints" / "epoch_3.ckpt"));
}

TEST_CASE("TCN mode trains the head on labeled clips") {
  const auto data = tiny_data();
  auto model = tiny_model();
  model.tcn_head = true;
  Trainer tr(model, tiny_train(Mode::kTcn), data);
  const auto recs = run_all(tr);
  for (const auto& r : recs) CHECK(std::isfinite(r.losses.l_total));
  const auto track = online_predict(tr.arch(), tr.state().teacher, data.labeled[0].frames, data.norm, true);
  CHECK(track.size() == data.labeled[0].size());
}
