#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "comad/errors.hpp"
#include "comad/io.hpp"
#include "comad/tensor.hpp"
#include "comad/vit.hpp"

namespace comad {

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  std::uint64_t config_digest = 0;
  NamedParams<T> tensors;
  std::string rng_state;  // empty when the producer had no stateful RNG
  std::uint64_t step = 0;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  return sizeof(T) == 4 ? 0 : 1;
}

// Layout: magic "CMCK", u32 version, u64 config digest, u32 tensor count,
// then per tensor: length-prefixed name, u8 dtype tag (0 = f32, 1 = f64),
// u32 rank, rank x u32 dims, payload little-endian; then the RNG state as a
// length-prefixed string and a u64 step counter.
template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint '" + path + "' for writing");
  bin::write_bytes(out, "CMCK", 4);
  bin::write_scalar<std::uint32_t>(out, kCheckpointVersion);
  bin::write_scalar<std::uint64_t>(out, ck.config_digest);
  bin::write_scalar<std::uint32_t>(out,
                                   static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    bin::write_string(out, name);
    bin::write_scalar<std::uint8_t>(out, dtype_tag<T>());
    bin::write_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d)
      bin::write_scalar<std::uint32_t>(out,
                                       static_cast<std::uint32_t>(t.dim(d)));
    bin::write_array(out, t.data(), t.numel());
  }
  bin::write_string(out, ck.rng_state);
  bin::write_scalar<std::uint64_t>(out, ck.step);
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[4];
  bin::read_bytes(in, magic, 4, "checkpoint magic");
  if (std::string(magic, 4) != "CMCK")
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = bin::read_scalar<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw IoError("checkpoint version " + std::to_string(version) +
                  " unsupported (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  Checkpoint<T> ck;
  ck.config_digest = bin::read_scalar<std::uint64_t>(in, "config digest");
  const auto count = bin::read_scalar<std::uint32_t>(in, "tensor count");
  ck.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = bin::read_string(in, "tensor name");
    const auto tag = bin::read_scalar<std::uint8_t>(in, "dtype tag");
    if (tag != dtype_tag<T>())
      throw IoError("checkpoint tensor '" + name + "' has dtype tag " +
                    std::to_string(tag) + ", expected " +
                    std::to_string(dtype_tag<T>()));
    const auto rank = bin::read_scalar<std::uint32_t>(in, "rank");
    if (rank > 8) throw IoError("checkpoint tensor '" + name + "' rank " +
                                std::to_string(rank) + " is implausible");
    Shape shape(rank);
    for (auto& d : shape) {
      d = bin::read_scalar<std::uint32_t>(in, "dims");
      if (d <= 0) throw IoError("checkpoint tensor '" + name + "' has a zero dim");
    }
    Tensor<T> t(shape);
    bin::read_array(in, t.data(), t.numel(), name.c_str());
    ck.tensors.emplace_back(name, std::move(t));
  }
  ck.rng_state = bin::read_string(in, "rng state");
  ck.step = bin::read_scalar<std::uint64_t>(in, "step counter");
  return ck;
}

// Copies checkpoint values into existing parameter storage, matched by name.
// Every destination must be present with an identical shape.
template <typename T>
void restore_params(const Checkpoint<T>& ck, const NamedParams<T>& params) {
  std::unordered_map<std::string, const Tensor<T>*> table;
  for (const auto& [name, t] : ck.tensors) table[name] = &t;
  for (const auto& [name, dst] : params) {
    auto it = table.find(name);
    if (it == table.end())
      throw IoError("checkpoint is missing tensor '" + name + "'");
    const Tensor<T>& src = *it->second;
    if (src.shape() != dst.shape())
      throw IoError("checkpoint tensor '" + name + "' has shape " +
                    shape_str(src.shape()) + ", model expects " +
                    shape_str(dst.shape()));
    Tensor<T> alias = dst;
    std::copy(src.data(), src.data() + src.numel(), alias.data());
  }
}

}  // namespace comad
