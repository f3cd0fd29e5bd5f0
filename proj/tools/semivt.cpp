// semivt: generate data, train, evaluate and compare runs.

#include "semivt/eval.hpp"
#include "semivt/io.hpp"
#include "semivt/synthdata.hpp"
#include "semivt/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace semivt;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct GenArgs {
  BenchmarkConfig cfg;
  fs::path out = "dataset";
  bool force = false;
};

struct TrainArgs {
  fs::path data = "dataset";
  fs::path out;
  fs::path config;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::optional<int> warmup_epochs, semi_epochs, batch_size, embed_dim, depth, heads, mlp_ratio, patch_size;
  std::optional<double> lr, delta;
  bool resume = false;
  bool tri_u_student = false;
};

struct EvalArgs {
  fs::path checkpoint;
  fs::path data = "dataset";
  std::string split = "test";
  fs::path out;
  bool student = false;
  bool ribbons = false;
};

struct CompareArgs {
  std::vector<fs::path> runs;
  fs::path csv;
};

int cmd_gen_data(const GenArgs& a) {
  if (fs::exists(a.out) && !fs::is_empty(a.out)) {
    if (!a.force) {
      std::cerr << "error: " << a.out << " exists and is not empty (use --force)\n";
      return kUsage;
    }
    fs::remove_all(a.out);
  }
  const json manifest = make_benchmark(a.cfg, a.out);
  std::cout << "dataset  " << a.out.string() << "\n";
  for (const auto& name : split_names())
    std::cout << std::left << std::setw(17) << name << manifest.at("splits").at(name).size() << " videos\n";
  std::cout << "phases   " << a.cfg.num_phases << "\nmanifest " << manifest_hash(manifest) << "\n";
  return kOk;
}

MetricsReport evaluate_split(const LoadedModel& model, const fs::path& data, const std::string& split,
                             const fs::path& ribbon_dir) {
  const Architecture arch(model.config);
  const auto videos = load_split(data, split);
  std::vector<PredictionTrack> tracks;
  std::vector<std::vector<int>> truth;
  for (const auto& v : videos) {
    tracks.push_back(online_predict(arch, model.params, v.frames, model.norm, model.config.tcn_head, v.id));
    truth.push_back(v.labels);
    if (!ribbon_dir.empty()) {
      fs::create_directories(ribbon_dir);
      export_ribbon(tracks.back(), v.labels, ribbon_dir / (v.id + ".csv"), ribbon_dir / (v.id + ".ppm"));
    }
  }
  return compute_metrics(tracks, truth, model.config.num_classes);
}

void print_report(const std::string& label, const MetricsReport& r) {
  std::cout << std::fixed << std::setprecision(2) << label << ": accuracy " << 100 * r.accuracy.mean << " ± "
            << 100 * r.accuracy.std << ", precision " << 100 * r.precision.mean << ", recall " << 100 * r.recall.mean
            << ", jaccard " << 100 * r.jaccard.mean << " (" << r.videos.size() << " videos)\n";
}

int cmd_train(const TrainArgs& a) {
  ModelConfig model;
  TrainConfig train;
  fs::path data = a.data;
  if (!a.config.empty()) {
    const json j = json::parse(io::read_text(a.config));
    if (j.contains("model")) model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) train = j.at("train").get<TrainConfig>();
    if (j.contains("dataset")) data = j.at("dataset").get<std::string>();
  }
  if (!a.mode.empty()) train.mode = mode_from_string(a.mode);
  if (a.seed) train.seed = *a.seed;
  if (a.warmup_epochs) train.warmup_epochs = *a.warmup_epochs;
  if (a.semi_epochs) train.semi_epochs = *a.semi_epochs;
  if (a.batch_size) train.batch_size = *a.batch_size;
  if (a.lr) train.base_lr = *a.lr;
  if (a.delta) train.delta = *a.delta;
  if (a.tri_u_student) train.tri_u_student_features = true;
  if (a.embed_dim) model.embed_dim = *a.embed_dim;
  if (a.depth) model.depth = *a.depth;
  if (a.heads) model.heads = *a.heads;
  if (a.mlp_ratio) model.mlp_ratio = *a.mlp_ratio;
  if (a.patch_size) model.patch_size = *a.patch_size;
  model.tcn_head = train.mode == Mode::kTcn;

  const json manifest = load_manifest(data);
  model.num_classes = manifest.at("benchmark").at("num_phases");
  model.frame_size = manifest.at("benchmark").at("frame_size");
  model.validate();
  train.validate();

  const fs::path out = a.out.empty() ? fs::path("runs") / (to_string(train.mode) + "_seed" + std::to_string(train.seed))
                                     : a.out;
  const auto td = TrainingData::load(data);
  RunOptions opts;
  opts.run_dir = out;
  opts.resume = a.resume;
  opts.run_info = {{"dataset", fs::absolute(data).string()}, {"manifest_hash", manifest_hash(manifest)}, {"run_dir", out.string()}};
  int last_epoch = 0;
  opts.on_step = [&](const StepRecord& r) {
    if (r.epoch != last_epoch) {
      last_epoch = r.epoch;
      std::cout << "epoch " << r.epoch << "/" << train.total_epochs() << "  lr " << r.lr << std::endl;
    }
  };
  train_run(model, train, td, opts);

  const auto loaded = load_model(out / "final" / "teacher.ckpt");
  const auto report = evaluate_split(loaded, data, "test", {});
  io::write_text(out / "report_test.json", json(report).dump(2) + "\n");
  print_report(to_string(train.mode) + " seed " + std::to_string(train.seed), report);
  std::cout << "run dir  " << out.string() << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  const auto model = load_model(a.checkpoint, a.student);
  fs::path out = a.out;
  if (out.empty()) out = a.checkpoint.parent_path().parent_path();
  fs::create_directories(out);
  const auto report = evaluate_split(model, a.data, a.split, a.ribbons ? out / ("ribbons_" + a.split) : fs::path{});
  const fs::path path = out / ("report_" + a.split + (a.student ? "_student" : "") + ".json");
  io::write_text(path, json(report).dump(2) + "\n");
  print_report(a.split, report);
  std::cout << "report   " << path.string() << "\n";
  return kOk;
}

int cmd_compare(const CompareArgs& a) {
  struct Row {
    Mode mode;
    std::uint64_t seed;
    std::string run;
    MetricsReport report;
  };
  std::vector<Row> rows;
  for (const auto& run : a.runs) {
    const json cfg = json::parse(io::read_text(run / "config.json"));
    const auto train = cfg.at("train").get<TrainConfig>();
    const auto report = json::parse(io::read_text(run / "report_test.json")).get<MetricsReport>();
    rows.push_back({train.mode, train.seed, run.string(), report});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) {
    return std::pair{static_cast<int>(x.mode), x.seed} < std::pair{static_cast<int>(y.mode), y.seed};
  });

  auto cell = [](const MeanStd& m) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << 100 * m.mean << " ± " << 100 * m.std;
    return s.str();
  };
  std::ostringstream text, csv;
  text << std::left << std::setw(18) << "mode" << std::setw(6) << "seed" << std::setw(14) << "accuracy" << std::setw(14)
       << "precision" << std::setw(14) << "recall" << std::setw(14) << "jaccard" << "\n";
  csv << "mode,seed,run,accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std,jaccard_mean,"
         "jaccard_std\n";
  csv << std::setprecision(10);
  for (const auto& r : rows) {
    // setw counts bytes and "±" is two.
    text << std::left << std::setw(18) << to_string(r.mode) << std::setw(6) << r.seed << std::setw(15)
         << cell(r.report.accuracy) << std::setw(15) << cell(r.report.precision) << std::setw(15)
         << cell(r.report.recall) << std::setw(15) << cell(r.report.jaccard) << "\n";
    csv << to_string(r.mode) << ',' << r.seed << ',' << r.run;
    for (const auto* m : {&r.report.accuracy, &r.report.precision, &r.report.recall, &r.report.jaccard})
      csv << ',' << m->mean << ',' << m->std;
    csv << '\n';
  }
  std::cout << text.str();
  if (a.csv.empty()) std::cout << "\n" << csv.str();
  else io::write_text(a.csv, csv.str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised surgical phase recognition on synthetic workflow videos"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic benchmark");
  g->add_option("--seed", gen.cfg.seed, "Generator seed");
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--labeled-fraction", gen.cfg.labeled_fraction, "Fraction of training videos with labels");
  g->add_option("--videos", gen.cfg.train_videos, "Number of training videos");
  g->add_option("--val-videos", gen.cfg.val_videos, "Number of validation videos");
  g->add_option("--test-videos", gen.cfg.test_videos, "Number of test videos");
  g->add_option("--phases", gen.cfg.num_phases, "Number of phases");
  g->add_option("--min-length", gen.cfg.min_length, "Shortest video (frames)");
  g->add_option("--max-length", gen.cfg.max_length, "Longest video (frames)");
  g->add_flag("--force", gen.force, "Replace a non-empty output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one ablation mode");
  t->add_option("--data", tr.data, "Dataset directory");
  t->add_option("--out", tr.out, "Run directory (default runs/<mode>_seed<seed>)");
  t->add_option("--config", tr.config, "JSON with model/train/dataset fields; flags override it");
  t->add_option("--mode", tr.mode, "SUP, TCR, CLP or TCN");
  t->add_option("--seed", tr.seed, "Run seed");
  t->add_option("--warmup-epochs", tr.warmup_epochs);
  t->add_option("--semi-epochs", tr.semi_epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.lr, "Base learning rate");
  t->add_option("--delta", tr.delta, "Confidence threshold");
  t->add_option("--embed-dim", tr.embed_dim);
  t->add_option("--depth", tr.depth);
  t->add_option("--heads", tr.heads);
  t->add_option("--mlp-ratio", tr.mlp_ratio);
  t->add_option("--patch-size", tr.patch_size);
  t->add_flag("--tri-u-student", tr.tri_u_student, "Unlabeled triplet term on student features");
  t->add_flag("--resume", tr.resume, "Continue from the newest epoch checkpoint");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory");
  e->add_option("--split", ev.split, "Split to evaluate");
  e->add_option("--out", ev.out, "Output directory (default: the run directory)");
  e->add_flag("--student", ev.student, "Evaluate the student instead of the teacher");
  e->add_flag("--ribbons", ev.ribbons, "Write per-video ribbon CSV and PPM files");

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "Tabulate test metrics of several runs");
  c->add_option("--runs", cmp.runs, "Run directories")->required();
  c->add_option("--csv", cmp.csv, "Write the CSV table here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*c) return cmd_compare(cmp);
  } catch (const NumericalError& err) {
    std::cerr << "numerical error: " << err.what() << "\n";
    return kNumerical;
  } catch (const ConfigError& err) {
    std::cerr << "configuration error: " << err.what() << "\n";
    return kUsage;
  } catch (const InputError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}
