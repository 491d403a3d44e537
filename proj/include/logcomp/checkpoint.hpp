#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "logcomp/config.hpp"
#include "logcomp/error.hpp"
#include "logcomp/matrix.hpp"
#include "logcomp/model.hpp"

/// Checkpoint container, little-endian throughout:
///
///   magic        8 bytes  "LOGCKPT\0"
///   version      u32      1
///   header_len   u64      byte length of the header text
///   header       UTF-8    sorted "key=value\n" lines: every model.* and
///                         filter.* field, train.seed, train.step, plus
///                         any extra run metadata
///   blob_count   u32
///   blobs        blob_count × { u32 name_len, name, u64 rows, u64 cols,
///                               rows·cols f64 values, row-major }
///
/// Model parameters come first in ModelParams::list() order; optimizer
/// moments follow as "adam.m/<name>" and "adam.v/<name>".
namespace logcomp {

inline constexpr char kCheckpointMagic[8] = {'L', 'O', 'G', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> header;
  std::vector<std::pair<std::string, Matrix>> blobs;

  const Matrix* find(const std::string& name) const {
    for (const auto& [n, m] : blobs) {
      if (n == name) return &m;
    }
    return nullptr;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("truncated checkpoint while reading " + what);
  return v;
}

}  // namespace detail

/// Writes to a temporary sibling and renames, so an existing file is only
/// replaced by a complete one.
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    std::string header;
    for (const auto& [k, v] : ckpt.header) header += k + "=" + v + "\n";
    detail::put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.blobs.size()));
    for (const auto& [name, m] : ckpt.blobs) {
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put<std::uint64_t>(out, m.rows());
      detail::put<std::uint64_t>(out, m.cols());
      out.write(reinterpret_cast<const char*>(m.data().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    out.flush();
    if (!out) throw IoError("write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw IoError(path.string() + " is not a checkpoint");
  }
  const auto version = detail::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = detail::get<std::uint64_t>(in, "header length");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("truncated checkpoint header");
  Checkpoint ckpt;
  std::size_t pos = 0;
  while (pos < header.size()) {
    const auto nl = header.find('\n', pos);
    const std::string line = header.substr(pos, nl - pos);
    pos = nl == std::string::npos ? header.size() : nl + 1;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed checkpoint header line '" + line + "'");
    ckpt.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = detail::get<std::uint32_t>(in, "blob count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get<std::uint32_t>(in, "blob name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rows = detail::get<std::uint64_t>(in, name + " rows");
    const auto cols = detail::get<std::uint64_t>(in, name + " cols");
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint blob " + name);
    ckpt.blobs.emplace_back(std::move(name), std::move(m));
  }
  return ckpt;
}

/// Header and parameter blobs for a model.
inline Checkpoint model_checkpoint(const Model& model, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.header = model.config().to_map();
  ckpt.header["train.seed"] = std::to_string(seed);
  for (const auto& p : model.params().list()) ckpt.blobs.emplace_back(p.name, p.tensor.value());
  return ckpt;
}

inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig config = model_config_from_map(ckpt.header);
  ModelParams params = shaped_params(config);
  for (auto& p : params.list()) {
    const Matrix* blob = ckpt.find(p.name);
    if (!blob) throw IoError("checkpoint is missing parameter " + p.name);
    if (!blob->same_shape(p.tensor.value())) {
      throw IoError("checkpoint parameter " + p.name + " has shape " + blob->shape_string() + ", expected " +
                    p.tensor.value().shape_string());
    }
    p.tensor.mutable_value() = *blob;
  }
  return Model(config, std::move(params));
}

}  // namespace logcomp
