#pragma once

// Tensor archive: "SEMIVTAR", u32 version, u64 header length, JSON header
// (model config, metadata, tensor manifest), then little-endian float32 data.

#include "semivt/common.hpp"
#include "semivt/model_config.hpp"
#include "semivt/parameters.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace semivt {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct Archive {
  ModelConfig config;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::string> names;
  std::vector<Matrix<float>> tensors;

  void add(std::string name, Matrix<float> value);
  void add_set(const std::string& prefix, const ParameterSet<float>& set);
  bool contains(const std::string& name) const;
  const Matrix<float>& at(const std::string& name) const;

  /// Tensors `prefix + spec.name` in layout order; DataError when any is
  /// missing or misshapen.
  ParameterSet<float> extract_set(const std::string& prefix, const ModelLayout& layout) const;
};

/// Written to a temporary file first and renamed into place.
void save_archive(const Archive& archive, const std::filesystem::path& path);
Archive load_archive(const std::filesystem::path& path);

}  // namespace semivt
