#pragma once

// Small synthetic workflow data and model configs that train in seconds.

#include "semivt/synthdata.hpp"
#include "semivt/trainer.hpp"

#include <filesystem>
#include <set>
#include <string>
#include <unistd.h>

namespace semivt::testing {

inline ModelConfig tiny_model(int classes = 3) {
  ModelConfig c;
  c.frame_size = 16;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.window_len = 4;
  c.num_classes = classes;
  c.tcn_stages = 2;
  c.tcn_levels = 2;
  c.tcn_channels = 8;
  return c;
}

inline TrainConfig tiny_train(Mode mode, std::uint64_t seed = 1) {
  TrainConfig t;
  t.warmup_epochs = 1;
  t.semi_epochs = 2;
  t.batch_size = 4;
  t.lr_halving_epochs = {3};
  t.base_lr = 0.01;
  t.delta = 0.5;
  t.mode = mode;
  t.seed = seed;
  return t;
}

inline WorkflowModel tiny_workflow(int classes = 3) {
  auto m = WorkflowModel::standard(classes, 16);
  m.dwell_mean.assign(classes, 8.0);
  return m;
}

/// Labeled videos are resampled until every phase appears among them.
inline TrainingData tiny_data(int labeled = 2, int unlabeled = 3, Index length = 30, std::uint64_t seed = 5,
                              int classes = 3) {
  const auto model = tiny_workflow(classes);
  TrainingData d;
  d.num_classes = classes;
  std::uint64_t stream = 0;
  for (;;) {
    d.labeled.clear();
    std::set<int> seen;
    for (int i = 0; i < labeled; ++i) {
      RngStream rng(seed, stream++);
      d.labeled.push_back(generate_video(model, length, rng, "lab" + std::to_string(i)));
      seen.insert(d.labeled.back().labels.begin(), d.labeled.back().labels.end());
    }
    if (static_cast<int>(seen.size()) == classes) break;
  }
  for (int i = 0; i < unlabeled; ++i) {
    RngStream rng(seed, 1000 + i);
    d.unlabeled.push_back(generate_video(model, length, rng, "unl" + std::to_string(i)));
  }
  std::vector<LabeledVideo> all = d.labeled;
  all.insert(all.end(), d.unlabeled.begin(), d.unlabeled.end());
  d.norm = dataset_statistics(all);
  return d;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("semivt_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace semivt::testing
