#include "semivt/checkpoint.hpp"

#include "semivt/io.hpp"

#include <cstring>

namespace semivt {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'M', 'I', 'V', 'T', 'A', 'R'};

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& buf, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  return v;
}

}  // namespace

void Archive::add(std::string name, Matrix<float> value) {
  if (contains(name)) throw InputError("archive already holds tensor " + name);
  names.push_back(std::move(name));
  tensors.push_back(std::move(value));
}

void Archive::add_set(const std::string& prefix, const ParameterSet<float>& set) {
  for (std::size_t i = 0; i < set.size(); ++i) add(prefix + set.name(i), set[i]);
}

bool Archive::contains(const std::string& name) const {
  for (const auto& n : names)
    if (n == name) return true;
  return false;
}

const Matrix<float>& Archive::at(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return tensors[i];
  throw DataError("archive has no tensor " + name);
}

ParameterSet<float> Archive::extract_set(const std::string& prefix, const ModelLayout& layout) const {
  ParameterSet<float> out;
  for (const auto& spec : layout.specs) {
    const auto& t = at(prefix + spec.name);
    if (t.rows() != spec.rows || t.cols() != spec.cols)
      throw DataError("archive tensor " + prefix + spec.name + " has the wrong shape");
    out.add(spec.name, t);
  }
  return out;
}

void save_archive(const Archive& archive, const std::filesystem::path& path) {
  nlohmann::json manifest = nlohmann::json::array();
  std::string data;
  for (std::size_t i = 0; i < archive.names.size(); ++i) {
    const auto& t = archive.tensors[i];
    manifest.push_back({{"name", archive.names[i]}, {"shape", {t.rows(), t.cols()}}, {"offset", data.size()}});
    io::append_f32_le(data, {t.data(), static_cast<std::size_t>(t.size())});
  }
  const nlohmann::json header{{"model_config", archive.config}, {"meta", archive.meta}, {"tensors", manifest}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((kArchiveVersion >> (8 * i)) & 0xff));
  put_u64(out, text.size());
  out += text;
  out += data;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  io::write_text(tmp, out);
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
  const std::string bytes = io::read_text(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(where + "not a tensor archive");
  const auto version = static_cast<std::uint32_t>(get_u64(bytes, 8, 4));
  if (version != kArchiveVersion)
    throw DataError(where + "archive version " + std::to_string(version) + ", expected " +
                    std::to_string(kArchiveVersion));
  const std::uint64_t header_len = get_u64(bytes, 12, 8);
  if (header_len > bytes.size() - 20) throw DataError(where + "corrupt manifest (header overruns file)");

  Archive ar;
  const std::size_t data_start = 20 + header_len;
  const std::size_t data_len = bytes.size() - data_start;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(20, header_len));
    ar.config = header.at("model_config").get<ModelConfig>();
    ar.meta = header.at("meta");
    std::size_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<Index>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) throw DataError(where + "corrupt manifest (bad shape)");
      const std::size_t n = static_cast<std::size_t>(shape[0] * shape[1]);
      if (offset != expected_offset || offset + 4 * n > data_len)
        throw DataError(where + "corrupt manifest (tensor " + name + " out of bounds)");
      Matrix<float> t(shape[0], shape[1]);
      io::decode_f32_le(bytes.data() + data_start + offset, {t.data(), n});
      ar.add(name, std::move(t));
      expected_offset = offset + 4 * n;
    }
    if (expected_offset != data_len) throw DataError(where + "corrupt manifest (trailing data)");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + "corrupt manifest (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw DataError(where + "corrupt manifest (" + e.what() + ")");
  }
  return ar;
}

}  // namespace semivt
