#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "csformer/config.hpp"
#include "csformer/params.hpp"

namespace csformer {

/// Named-tensor archive layout (little-endian):
///   "CSFK1", u32 entry count, then per entry
///   u32 name length, UTF-8 name, u8 dtype (1 f32, 2 f64, 3 i64), u32 rank,
///   i64 extents[rank], raw values.
struct ArchiveEntry {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>> values;
};

class Archive {
 public:
  void add(ArchiveEntry entry);
  bool contains(const std::string& name) const;
  const ArchiveEntry& at(const std::string& name) const;
  const std::vector<ArchiveEntry>& entries() const { return entries_; }

  void save(const std::filesystem::path& path) const;
  /// Throws CheckpointError on a bad magic, truncation, or unknown dtype.
  static Archive load(const std::filesystem::path& path);

 private:
  std::vector<ArchiveEntry> entries_;
};

template <typename T>
void add_params(Archive& archive, const ParamStore<T>& params, const std::string& prefix = "");

struct LoadReport {
  std::vector<std::string> loaded;   // present in both
  std::vector<std::string> missing;  // in the model only; left untouched
  std::vector<std::string> unused;   // in the archive only
};

/// Copies every archive entry named prefix + parameter name into the store.
/// Mismatched shapes throw CheckpointError.
template <typename T>
LoadReport load_params(const Archive& archive, ParamStore<T>& params, const std::string& prefix = "");

/// Model checkpoint: the archive at `path` plus the config at `path`.json.
template <typename T>
void save_model(const std::filesystem::path& path, const ParamStore<T>& params, const ModelConfig& config);
ModelConfig load_model_config(const std::filesystem::path& path);
std::filesystem::path config_sidecar(const std::filesystem::path& path);

}  // namespace csformer
