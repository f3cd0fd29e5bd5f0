#include "semivt/trainer.hpp"

#include "semivt/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

namespace semivt {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr std::uint64_t kLabeledOrder = 0x4c4f524445ULL;
constexpr std::uint64_t kUnlabeledOrder = 0x554f524445ULL;
constexpr std::uint64_t kAugment = 0x415547ULL;

enum Role : std::uint64_t { kLabeledView = 1, kTeacherView = 2, kStudentView = 3 };

}  // namespace

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kSup: return "SUP";
    case Mode::kTcr: return "SUP+TCR";
    case Mode::kClp: return "SUP+TCR+CLP";
    case Mode::kTcn: return "SUP+TCR+CLP+TCN";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "SUP") return Mode::kSup;
  if (s == "TCR" || s == "SUP+TCR") return Mode::kTcr;
  if (s == "CLP" || s == "SUP+TCR+CLP") return Mode::kClp;
  if (s == "TCN" || s == "SUP+TCR+CLP+TCN") return Mode::kTcn;
  throw ConfigError("unknown mode '" + s + "' (expected SUP, TCR, CLP or TCN)");
}

ActiveTerms terms_for(Mode m, bool warmup) {
  ActiveTerms t;
  if (warmup || m == Mode::kSup) return t;
  t.reg = true;
  if (m == Mode::kClp || m == Mode::kTcn) t.tri_l = t.tri_u = true;
  return t;
}

void TrainConfig::validate() const {
  if (warmup_epochs < 0 || semi_epochs < 0 || total_epochs() < 1) throw ConfigError("train: need at least one epoch");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(base_lr > 0.0)) throw ConfigError("train: base_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  GateConfig{delta}.validate();
  EmaConfig{alpha}.validate();
  PrototypeBank<float> probe;
  probe.eta = eta;
  probe.margin = margin;
  probe.k_neg = k_neg;
  probe.validate();
  weak.validate();
  strong.validate();
}

double TrainConfig::lr_at(int epoch) const {
  double lr = base_lr;
  for (int e : lr_halving_epochs)
    if (epoch >= e) lr *= 0.5;
  return lr;
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"warmup_epochs", c.warmup_epochs},
           {"semi_epochs", c.semi_epochs},
           {"batch_size", c.batch_size},
           {"base_lr", c.base_lr},
           {"lr_halving_epochs", c.lr_halving_epochs},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"delta", c.delta},
           {"alpha", c.alpha},
           {"eta", c.eta},
           {"margin", c.margin},
           {"k_neg", c.k_neg},
           {"mode", to_string(c.mode)},
           {"seed", c.seed},
           {"tri_u_student_features", c.tri_u_student_features},
           {"weak_policy", c.weak},
           {"strong_policy", c.strong}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  try {
    c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
    c.semi_epochs = j.value("semi_epochs", d.semi_epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.base_lr = j.value("base_lr", d.base_lr);
    c.lr_halving_epochs = j.value("lr_halving_epochs", d.lr_halving_epochs);
    c.momentum = j.value("momentum", d.momentum);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.delta = j.value("delta", d.delta);
    c.alpha = j.value("alpha", d.alpha);
    c.eta = j.value("eta", d.eta);
    c.margin = j.value("margin", d.margin);
    c.k_neg = j.value("k_neg", d.k_neg);
    c.mode = mode_from_string(j.value("mode", to_string(d.mode)));
    c.seed = j.value("seed", d.seed);
    c.tri_u_student_features = j.value("tri_u_student_features", d.tri_u_student_features);
    c.weak = j.contains("weak_policy") ? j.at("weak_policy").get<AugmentPolicy>() : d.weak;
    c.strong = j.contains("strong_policy") ? j.at("strong_policy").get<AugmentPolicy>() : d.strong;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
}

void to_json(json& j, const LossBreakdown& l) {
  j = json{{"l_sup", l.l_sup}, {"l_reg", l.l_reg}, {"l_tri_l", l.l_tri_l}, {"l_tri_u", l.l_tri_u}, {"l_total", l.l_total}};
}

void to_json(json& j, const StepRecord& r) {
  j = json{{"epoch", r.epoch},     {"step", r.step},         {"losses", r.losses}, {"gated", r.gated},
           {"unlabeled", r.unlabeled}, {"gate_pass_rate", r.gate_rate()}, {"lr", r.lr}};
}

TrainingData TrainingData::load(const fs::path& root) {
  const json manifest = load_manifest(root);
  TrainingData d;
  d.labeled = load_split(root, "train_labeled");
  d.unlabeled = load_split(root, "train_unlabeled");
  try {
    d.norm = manifest.at("normalization").get<Normalization>();
    d.num_classes = manifest.at("benchmark").at("num_phases");
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  d.validate();
  return d;
}

void TrainingData::validate() const {
  if (num_classes < 2) throw DataError("training data needs at least 2 classes");
  if (labeled.empty()) throw DataError("no labeled training videos");
  std::set<int> seen;
  for (const auto* split : {&labeled, &unlabeled})
    for (const auto& v : *split) {
      if (v.frames.size() != v.labels.size()) throw DataError(v.id + ": frames and labels differ in length");
      for (int y : v.labels)
        if (y < 0 || y >= num_classes) throw DataError(v.id + ": label " + std::to_string(y) + " out of range");
    }
  for (const auto& v : labeled) seen.insert(v.labels.begin(), v.labels.end());
  for (int c = 0; c < num_classes; ++c)
    if (!seen.count(c)) throw DataError("labeled videos contain no frame of phase " + std::to_string(c));
}

Trainer::Trainer(const ModelConfig& model, const TrainConfig& train, const TrainingData& data)
    : arch_(model), cfg_(train), data_(data) {
  cfg_.validate();
  data_.validate();
  if (model.num_classes != data.num_classes)
    throw ConfigError("model has " + std::to_string(model.num_classes) + " classes, data has " +
                      std::to_string(data.num_classes));
  for (const auto* split : {&data.labeled, &data.unlabeled})
    for (const auto& v : *split)
      for (const auto& f : v.frames)
        if (f.rows() != model.channels || f.cols() != static_cast<Index>(model.frame_size) * model.frame_size)
          throw ConfigError(v.id + ": frame shape does not match the model config");
  if (model.tcn_head != (cfg_.mode == Mode::kTcn))
    throw ConfigError("the TCN head is used exactly in TCN mode");

  for (std::size_t v = 0; v < data.labeled.size(); ++v)
    for (Index t = 0; t < data.labeled[v].size(); ++t) labeled_frames_.push_back({v, t});
  for (std::size_t v = 0; v < data.unlabeled.size(); ++v)
    for (Index t = 0; t < data.unlabeled[v].size(); ++t) unlabeled_frames_.push_back({v, t});

  state_.student = init_parameters<float>(model, cfg_.seed);
  state_.teacher = state_.student;
  state_.velocity = state_.student.zeros_like();
  state_.bank.eta = cfg_.eta;
  state_.bank.margin = cfg_.margin;
  state_.bank.k_neg = cfg_.k_neg;
}

int Trainer::steps_per_epoch(int epoch) const {
  const auto b = static_cast<std::size_t>(cfg_.batch_size);
  const bool semi = epoch > cfg_.warmup_epochs && cfg_.mode != Mode::kSup && !unlabeled_frames_.empty();
  const std::size_t n = semi ? unlabeled_frames_.size() : labeled_frames_.size();
  return static_cast<int>((n + b - 1) / b);
}

Trainer::LabeledRef Trainer::labeled_at(std::uint64_t position) {
  const std::uint64_t n = labeled_frames_.size();
  const std::uint64_t cycle = position / n;
  if (cycle != cached_cycle_) {
    cycle_perm_.resize(n);
    std::iota(cycle_perm_.begin(), cycle_perm_.end(), std::size_t{0});
    RngStream rng(cfg_.seed, hash_ids({kLabeledOrder, cycle}));
    std::shuffle(cycle_perm_.begin(), cycle_perm_.end(), rng.engine());
    cached_cycle_ = cycle;
  }
  return labeled_frames_[cycle_perm_[position % n]];
}

std::vector<Trainer::LabeledRef> Trainer::unlabeled_order(int epoch) const {
  std::vector<LabeledRef> order = unlabeled_frames_;
  RngStream rng(cfg_.seed, hash_ids({kUnlabeledOrder, static_cast<std::uint64_t>(epoch)}));
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

void Trainer::finish_warmup() {
  state_.teacher = state_.student;
  if (cfg_.mode == Mode::kClp || cfg_.mode == Mode::kTcn) {
    std::vector<LabeledFeature<float>> feats;
    feats.reserve(labeled_frames_.size());
    const auto none = AugmentPolicy::none();
    RngStream unused(cfg_.seed, 0);
    for (const auto& ref : labeled_frames_) {
      const auto& video = data_.labeled[ref.video];
      const auto window = apply_pixel_policy(weak_view(video.frames, ref.frame, arch_.config.window_len), none,
                                             data_.norm, unused);
      feats.push_back({normalize(encode(arch_, window, state_.student)), video.labels[ref.frame]});
    }
    state_.bank = init_prototypes(feats, data_.num_classes, cfg_.eta, cfg_.margin, cfg_.k_neg);
  }
  state_.teacher_ready = true;
}

StepRecord Trainer::train_step(int epoch, std::span<const LabeledRef> unlabeled) {
  const bool warm = epoch <= cfg_.warmup_epochs;
  const int T = arch_.config.window_len;
  const std::uint64_t step = state_.step;
  auto view_rng = [&](Role role, std::uint64_t slot) { return RngStream(cfg_.seed, hash_ids({kAugment, step, role, slot})); };

  StepInputs in;
  StepOptions opt;
  opt.terms = terms_for(cfg_.mode, warm);
  opt.gate = GateConfig{cfg_.delta};
  opt.tri_u_student_features = cfg_.tri_u_student_features;

  if (cfg_.mode == Mode::kTcn) {
    // One clip of up to batch_size consecutive frames ending at the anchor.
    const auto anchor = labeled_at(state_.labeled_cursor++);
    const auto& video = data_.labeled[anchor.video];
    const Index first = std::max<Index>(0, anchor.frame - cfg_.batch_size + 1);
    for (Index t = first; t <= anchor.frame; ++t) {
      auto rng = view_rng(kLabeledView, static_cast<std::uint64_t>(t - first));
      in.labeled.push_back(apply_pixel_policy(weak_view(video.frames, t, T), cfg_.weak, data_.norm, rng));
      in.labels.push_back(video.labels[t]);
    }
    opt.labeled_clip = true;
  } else {
    for (int i = 0; i < cfg_.batch_size; ++i) {
      const auto ref = labeled_at(state_.labeled_cursor++);
      const auto& video = data_.labeled[ref.video];
      auto rng = view_rng(kLabeledView, static_cast<std::uint64_t>(i));
      in.labeled.push_back(apply_pixel_policy(weak_view(video.frames, ref.frame, T), cfg_.weak, data_.norm, rng));
      in.labels.push_back(video.labels[ref.frame]);
    }
  }

  for (std::size_t j = 0; j < unlabeled.size(); ++j) {
    const auto& video = data_.unlabeled[unlabeled[j].video];
    auto rng = view_rng(kTeacherView, j);
    in.unlabeled_weak.push_back(apply_pixel_policy(weak_view(video.frames, unlabeled[j].frame, T), cfg_.weak, data_.norm, rng));
  }
  in.unlabeled_strong = [&](std::size_t j) {
    const auto& video = data_.unlabeled[unlabeled[j].video];
    auto rng = view_rng(kStudentView, j);
    auto window = strong_view(video.frames, unlabeled[j].frame, T, rng);
    return apply_pixel_policy(window, cfg_.strong, data_.norm, rng);
  };

  const bool bank_on = state_.bank.initialized;
  auto out = compute_step<float>(arch_, state_.student, state_.teacher_ready ? &state_.teacher : nullptr,
                                 bank_on ? &state_.bank : nullptr, in, opt);
  if (!std::isfinite(out.losses.l_total))
    throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));

  const double lr = cfg_.lr_at(epoch);
  sgd_step(state_.student, out.grads, state_.velocity, lr, cfg_.momentum, cfg_.weight_decay);
  if (state_.teacher_ready) ema_update(state_.teacher, state_.student, EmaConfig{cfg_.alpha});
  ++state_.step;

  StepRecord rec;
  rec.epoch = epoch;
  rec.step = state_.step;
  rec.losses = out.losses;
  rec.gated = out.gated;
  rec.unlabeled = out.unlabeled;
  rec.lr = lr;
  return rec;
}

void Trainer::run_epoch(const std::function<void(const StepRecord&)>& on_step) {
  if (finished()) throw StateError("training already finished");
  const int epoch = state_.epoch + 1;
  if (epoch > cfg_.warmup_epochs && !state_.teacher_ready) finish_warmup();

  const bool semi = epoch > cfg_.warmup_epochs && cfg_.mode != Mode::kSup;
  const auto order = semi ? unlabeled_order(epoch) : std::vector<LabeledRef>{};
  const int steps = steps_per_epoch(epoch);
  const auto b = static_cast<std::size_t>(cfg_.batch_size);
  for (int s = 0; s < steps; ++s) {
    std::span<const LabeledRef> batch;
    if (!order.empty()) {
      const std::size_t lo = s * b, hi = std::min(order.size(), lo + b);
      batch = std::span<const LabeledRef>(order).subspan(lo, hi - lo);
    }
    const auto rec = train_step(epoch, batch);
    if (on_step) on_step(rec);
  }
  state_.epoch = epoch;
  if (epoch == cfg_.warmup_epochs) finish_warmup();
}

Archive Trainer::to_archive() const {
  Archive ar;
  ar.config = arch_.config;
  ar.add_set("student/", state_.student);
  ar.add_set("teacher/", state_.teacher);
  ar.add_set("velocity/", state_.velocity);
  if (state_.bank.initialized) ar.add("prototypes", state_.bank.vectors);
  ar.meta = json{{"kind", "training_state"},
                 {"train_config", cfg_},
                 {"epoch", state_.epoch},
                 {"step", state_.step},
                 {"labeled_cursor", state_.labeled_cursor},
                 {"teacher_ready", state_.teacher_ready},
                 {"bank_initialized", state_.bank.initialized},
                 {"normalization", data_.norm}};
  return ar;
}

void Trainer::restore(const Archive& ar) {
  if (!(ar.config == arch_.config)) throw ConfigError("checkpoint was written for a different model config");
  TrainConfig stored;
  try {
    stored = ar.meta.at("train_config").get<TrainConfig>();
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint meta: ") + e.what());
  }
  if (!(stored == cfg_)) throw ConfigError("checkpoint was written for a different train config");

  state_.student = ar.extract_set("student/", arch_.layout);
  state_.teacher = ar.extract_set("teacher/", arch_.layout);
  state_.velocity = ar.extract_set("velocity/", arch_.layout);
  state_.epoch = ar.meta.at("epoch");
  state_.step = ar.meta.at("step");
  state_.labeled_cursor = ar.meta.at("labeled_cursor");
  state_.teacher_ready = ar.meta.at("teacher_ready");
  state_.bank.initialized = ar.meta.at("bank_initialized");
  if (state_.bank.initialized) {
    state_.bank.vectors = ar.at("prototypes");
    if (state_.bank.vectors.rows() != arch_.config.num_classes || state_.bank.vectors.cols() != arch_.config.embed_dim)
      throw DataError("checkpoint prototypes have the wrong shape");
  } else {
    state_.bank.vectors.resize(0, 0);
  }
}

TrainState train_run(const ModelConfig& model, const TrainConfig& train, const TrainingData& data,
                     const RunOptions& options) {
  if (options.run_dir.empty()) throw ConfigError("train_run needs a run directory");
  const fs::path dir = options.run_dir;
  fs::create_directories(dir / "checkpoints");
  Trainer trainer(model, train, data);

  const fs::path metrics_path = dir / "metrics.jsonl";
  int resumed_from = 0;
  if (options.resume) {
    static const std::regex pattern(R"(epoch_(\d+)\.ckpt)");
    fs::path latest;
    for (const auto& entry : fs::directory_iterator(dir / "checkpoints")) {
      std::smatch m;
      const std::string name = entry.path().filename().string();
      if (std::regex_match(name, m, pattern) && std::stoi(m[1]) > resumed_from) {
        resumed_from = std::stoi(m[1]);
        latest = entry.path();
      }
    }
    if (resumed_from > 0) trainer.restore(load_archive(latest));
  }

  if (resumed_from > 0) {
    // Drop log lines written after the checkpoint we resume from.
    std::istringstream old(fs::exists(metrics_path) ? io::read_text(metrics_path) : std::string{});
    std::string kept, line;
    while (std::getline(old, line)) {
      if (line.empty()) continue;
      if (json::parse(line).at("epoch").get<int>() <= resumed_from) kept += line + "\n";
    }
    io::write_text(metrics_path, kept);
  } else {
    json cfg{{"model", model}, {"train", train}};
    for (const auto& [k, v] : options.run_info.items()) cfg[k] = v;
    io::write_text(dir / "config.json", cfg.dump(2) + "\n");
    io::write_text(metrics_path, "");
  }

  std::ofstream log(metrics_path, std::ios::app);
  while (!trainer.finished()) {
    trainer.run_epoch([&](const StepRecord& r) {
      log << json(r).dump() << '\n';
      if (options.on_step) options.on_step(r);
    });
    log.flush();
    const int epoch = trainer.state().epoch;
    save_archive(trainer.to_archive(), dir / "checkpoints" / ("epoch_" + std::to_string(epoch) + ".ckpt"));
    if (options.stop_after_epoch > 0 && epoch >= options.stop_after_epoch && !trainer.finished())
      return trainer.state();
  }

  Archive final_model;
  final_model.config = model;
  final_model.add_set("teacher/", trainer.state().teacher);
  final_model.add_set("student/", trainer.state().student);
  final_model.meta = json{{"kind", "model"}, {"train_config", train}, {"epoch", trainer.state().epoch},
                          {"normalization", data.norm}};
  save_archive(final_model, dir / "final" / "teacher.ckpt");
  return trainer.state();
}

LoadedModel load_model(const fs::path& checkpoint, bool use_student) {
  const Archive ar = load_archive(checkpoint);
  LoadedModel m;
  m.config = ar.config;
  m.params = ar.extract_set(use_student ? "student/" : "teacher/", make_layout(ar.config));
  if (ar.meta.contains("normalization")) m.norm = ar.meta.at("normalization").get<Normalization>();
  return m;
}

}  // namespace semivt
