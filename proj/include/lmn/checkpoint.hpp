#pragma once

// Binary checkpoint:
//   "LMNCKPT" | u32 version | u32 n | n bytes of model.* key=value text
//   then, until EOF, per tensor:
//   u32 name length | name | u32 rank | u64 extents[rank] | float32 data
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmn/model.hpp"

namespace lmn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "LMNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

template <class U>
void write_pod(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U read_pod(std::istream& is, const char* what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    os.write(kCheckpointMagic, sizeof kCheckpointMagic - 1);
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    const std::string text = model.config().to_text();
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : model.parameters()) {
      detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t extent : t.shape()) detail::write_pod<std::uint64_t>(os, extent);
      os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!os) throw CheckpointError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof kCheckpointMagic - 1];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto text_len = detail::read_pod<std::uint32_t>(is, "config length");
  std::string text(text_len, '\0');
  if (!is.read(text.data(), text_len)) throw CheckpointError("checkpoint truncated in config text");

  Model<float> model = Model<float>::init(ModelConfig::from_text(text));
  auto params = model.parameters();
  std::vector<bool> seen(params.size(), false);
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto name_len = detail::read_pod<std::uint32_t>(is, "tensor name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw CheckpointError("checkpoint truncated in tensor name");
    const auto rank = detail::read_pod<std::uint32_t>(is, "tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is, "tensor extent"));
    std::size_t index = 0;
    while (index < params.size() && params[index].first != name) ++index;
    if (index == params.size()) throw CheckpointError("checkpoint tensor '" + name + "' does not belong to the configured model");
    BasicTensor<float>& target = params[index].second;
    if (target.shape() != shape) {
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " + shape_str(target.shape()));
    }
    auto dst = target.mutable_data();
    if (!is.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(float)))) {
      throw CheckpointError("checkpoint truncated in tensor '" + name + "'");
    }
    seen[index] = true;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!seen[i]) throw CheckpointError("checkpoint is missing tensor '" + params[i].first + "'");
  }
  return model;
}

}  // namespace lmn
