#include "csformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "csformer/error.hpp"

namespace csformer {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[5] = {'C', 'S', 'F', 'K', '1'};

template <typename V>
void put(std::ostream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V take(std::istream& in) {
  V value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(V))) throw CheckpointError("truncated checkpoint");
  return value;
}

template <typename V>
std::uint8_t dtype_code() {
  if constexpr (std::is_same_v<V, float>) return 1;
  if constexpr (std::is_same_v<V, double>) return 2;
  return 3;
}

template <typename V>
std::vector<V> read_values(std::istream& in, std::int64_t count) {
  std::vector<V> values(static_cast<std::size_t>(count));
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(V)))) {
    throw CheckpointError("truncated checkpoint values");
  }
  return values;
}

}  // namespace

void Archive::add(ArchiveEntry entry) {
  if (contains(entry.name)) throw CheckpointError("duplicate archive entry " + entry.name);
  entries_.push_back(std::move(entry));
}

bool Archive::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const ArchiveEntry& Archive::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw CheckpointError("archive has no entry " + name);
}

void Archive::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    std::visit(
        [&](const auto& values) {
          using V = typename std::decay_t<decltype(values)>::value_type;
          if (static_cast<std::int64_t>(values.size()) != shape_numel(e.shape)) {
            throw CheckpointError("entry " + e.name + " has a value count that does not match its shape");
          }
          put<std::uint8_t>(out, dtype_code<V>());
          put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
          for (int extent : e.shape) put<std::int64_t>(out, extent);
          out.write(reinterpret_cast<const char*>(values.data()),
                    static_cast<std::streamsize>(values.size() * sizeof(V)));
        },
        e.values);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + " is not a CSFK1 checkpoint");
  }
  Archive archive;
  const auto count = take<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveEntry e;
    const auto name_len = take<std::uint32_t>(in);
    if (name_len > (1u << 16)) throw CheckpointError("implausible entry name length");
    e.name.resize(name_len);
    if (!in.read(e.name.data(), name_len)) throw CheckpointError("truncated checkpoint name");
    const auto dtype = take<std::uint8_t>(in);
    const auto rank = take<std::uint32_t>(in);
    if (rank > 8) throw CheckpointError("implausible rank for entry " + e.name);
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto extent = take<std::int64_t>(in);
      if (extent < 0 || extent > (1ll << 31)) throw CheckpointError("invalid extent for entry " + e.name);
      e.shape.push_back(static_cast<int>(extent));
    }
    const std::int64_t n = shape_numel(e.shape);
    switch (dtype) {
      case 1: e.values = read_values<float>(in, n); break;
      case 2: e.values = read_values<double>(in, n); break;
      case 3: e.values = read_values<std::int64_t>(in, n); break;
      default: throw CheckpointError("unknown dtype code " + std::to_string(dtype) + " for entry " + e.name);
    }
    archive.add(std::move(e));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after the last entry");
  return archive;
}

template <typename T>
void add_params(Archive& archive, const ParamStore<T>& params, const std::string& prefix) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensors()[i];
    archive.add({prefix + params.names()[i], t.shape(), std::vector<T>(t.data().begin(), t.data().end())});
  }
}

template <typename T>
LoadReport load_params(const Archive& archive, ParamStore<T>& params, const std::string& prefix) {
  LoadReport report;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = prefix + params.names()[i];
    if (!archive.contains(name)) {
      report.missing.push_back(params.names()[i]);
      continue;
    }
    const ArchiveEntry& e = archive.at(name);
    Tensor<T>& target = params.tensors()[i];
    if (e.shape != target.shape()) {
      throw CheckpointError("shape mismatch for " + name + ": archive " + shape_to_string(e.shape) + ", model " +
                            shape_to_string(target.shape()));
    }
    auto dst = target.mutable_data();
    std::visit([&](const auto& values) { std::copy(values.begin(), values.end(), dst.begin()); }, e.values);
    seen.insert(name);
    report.loaded.push_back(params.names()[i]);
  }
  for (const auto& e : archive.entries()) {
    if (e.name.rfind(prefix, 0) == 0 && !seen.count(e.name)) report.unused.push_back(e.name);
  }
  return report;
}

std::filesystem::path config_sidecar(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  p += ".json";
  return p;
}

template <typename T>
void save_model(const std::filesystem::path& path, const ParamStore<T>& params, const ModelConfig& config) {
  Archive archive;
  add_params(archive, params);
  archive.save(path);
  std::ofstream out(config_sidecar(path), std::ios::trunc);
  if (!out) throw IoError("cannot write " + config_sidecar(path).string());
  out << config.to_json() << '\n';
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(config_sidecar(path));
  if (!in) throw IoError("missing config sidecar " + config_sidecar(path).string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return ModelConfig::from_json(buffer.str());
}

template void add_params(Archive&, const ParamStore<float>&, const std::string&);
template void add_params(Archive&, const ParamStore<double>&, const std::string&);
template LoadReport load_params(const Archive&, ParamStore<float>&, const std::string&);
template LoadReport load_params(const Archive&, ParamStore<double>&, const std::string&);
template void save_model(const std::filesystem::path&, const ParamStore<float>&, const ModelConfig&);
template void save_model(const std::filesystem::path&, const ParamStore<double>&, const ModelConfig&);

}  // namespace csformer
