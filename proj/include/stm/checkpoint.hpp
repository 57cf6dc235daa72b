#pragma once

// "STMW" weight files: named tensors in model enumeration order.
//
//   magic "STMW" | version u32 | count u32
//   per tensor: name_len u16 | name | dtype u8 (0 = f32) | rank u8 | extents u64[rank] | f32 payload
//
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "stm/model.hpp"

namespace stm {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'M', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U get(std::istream& is, const char* what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + name.substr(0, 64));
    if (t.rank() > 0xFF) throw CheckpointError("tensor rank too large: " + name);
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint8_t>(os, 0);
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) detail::put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!os) throw CheckpointError("checkpoint write failed");
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw CheckpointError("checkpoint truncated while reading magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint truncated while reading tensor name");
    const auto dtype = detail::get<std::uint8_t>(is, "dtype");
    if (dtype != 0) throw CheckpointError("tensor '" + name + "': unsupported dtype " + std::to_string(dtype));
    const auto rank = detail::get<std::uint8_t>(is, "rank");
    if (rank == 0) throw CheckpointError("tensor '" + name + "': rank 0");
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& e : shape) {
      const auto ext = detail::get<std::uint64_t>(is, "extent");
      if (ext == 0 || ext > (std::uint64_t{1} << 40) || n > (std::uint64_t{1} << 40) / ext)
        throw CheckpointError("tensor '" + name + "': implausible extent");
      e = static_cast<std::size_t>(ext);
      n *= ext;
    }
    std::vector<float> data(n);
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float))))
      throw CheckpointError("checkpoint truncated in payload of '" + name + "'");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint");
  return out;
}

inline std::vector<NamedTensor> named_tensors(const Model& m) {
  std::vector<NamedTensor> out;
  visit_tensors(m, [&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

// Copies checkpoint tensors into a model built from the same config. Names
// and shapes must match in order.
inline void assign_tensors(Model& m, const std::vector<NamedTensor>& tensors) {
  std::size_t i = 0;
  visit_tensors(m, [&](const std::string& name, Tensor& t) {
    if (i >= tensors.size()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    const auto& src = tensors[i++];
    if (src.name != name)
      throw CheckpointError("tensor name mismatch: expected '" + name + "', found '" + src.name + "'");
    if (src.tensor.shape() != t.shape())
      throw CheckpointError("shape mismatch for '" + name + "': model " + to_string(t.shape()) +
                            ", checkpoint " + to_string(src.tensor.shape()));
    t = src.tensor;
  });
  if (i != tensors.size())
    throw CheckpointError("checkpoint has " + std::to_string(tensors.size() - i) + " extra tensors, first '" +
                          tensors[i].name + "'");
}

// Write to a sibling temp file, then rename over the target.
inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, named_tensors(m));
  }
  std::filesystem::rename(tmp, path);
}

inline Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  Model m = build_skeleton(cfg);
  assign_tensors(m, read_checkpoint(is));
  return m;
}

}  // namespace stm
