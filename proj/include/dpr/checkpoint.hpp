// SPDX-License-Identifier: Apache-2.0
//
// Self-describing binary checkpoint. Layout (all integers little-endian):
//   magic "DPRC" | u32 version | u32 precision (4|8) | u64 config digest
//   u64 config length | config text (canonical key=value document)
//   u32 tensor count
//   per tensor: u32 name length | name | u32 rank | u64 dims[rank]
//   u64 payload length | payload (row-major IEEE-754 arrays, LE, in manifest
//   order; offsets are implicit because entries are contiguous)
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dpr/rng.hpp"
#include "dpr/tensor.hpp"

namespace dpr {

constexpr char kCheckpointMagic[4] = {'D', 'P', 'R', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;  // widened; exact for both f32 and f64 payloads
};

struct CheckpointData {
  std::uint32_t precision = 8;  // bytes per scalar
  std::string config_text;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint_n(4)); }
  std::uint64_t u64() { return uint_n(8); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  const char* raw(std::size_t n) {
    need(n);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::uint64_t uint_n(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf_[pos_ + std::size_t(i)])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) throw DataError(path_ + ": truncated checkpoint");
  }
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

template <typename S>
inline void encode_scalar(std::string& out, S v) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof(S));
  for (std::size_t i = 0; i < sizeof(S); ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
}

template <typename S>
inline S decode_scalar(const char* p) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(S); ++i)
    bits |= std::uint64_t(static_cast<unsigned char>(p[i])) << (8 * i);
  S v;
  std::memcpy(&v, &bits, sizeof(S));
  return v;
}

}  // namespace detail

/// Serialize named tensors plus the canonical config document.
template <typename S>
void save_checkpoint(const std::string& path, const std::string& config_text,
                     const std::vector<std::pair<std::string, Tensor<S>>>& tensors) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, sizeof(S));
  detail::put_u64(out, fnv1a64(config_text));
  detail::put_u64(out, config_text.size());
  out += config_text;
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t payload_len = 0;
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (Index e : t.shape()) detail::put_u64(out, static_cast<std::uint64_t>(e));
    payload_len += std::uint64_t(t.size()) * sizeof(S);
  }
  detail::put_u64(out, payload_len);
  for (const auto& [name, t] : tensors)
    for (Index i = 0; i < t.size(); ++i) detail::encode_scalar(out, t.data()[i]);
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot write checkpoint " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw DataError("write failed for checkpoint " + path);
}

/// Read a checkpoint back; tolerates either scalar width. A digest that does
/// not match the embedded config text is reported on stderr, never ignored.
inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  detail::Reader r(buf, path);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4))
    throw DataError(path + ": bad checkpoint magic");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  data.precision = r.u32();
  if (data.precision != 4 && data.precision != 8)
    throw DataError(path + ": unknown precision tag " + std::to_string(data.precision));
  std::uint64_t digest = r.u64();
  data.config_text = r.bytes(r.u64());
  if (digest != fnv1a64(data.config_text))
    std::cerr << "warning: " << path << ": config digest mismatch (checkpoint edited or corrupted)\n";
  std::uint32_t count = r.u32();
  std::vector<std::uint64_t> sizes;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.bytes(r.u32());
    std::uint32_t rank = r.u32();
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(static_cast<Index>(r.u64()));
      numel *= static_cast<std::uint64_t>(t.shape.back());
    }
    sizes.push_back(numel);
    data.tensors.push_back(std::move(t));
  }
  std::uint64_t payload_len = r.u64();
  std::uint64_t expected = 0;
  for (auto n : sizes) expected += n * data.precision;
  if (payload_len != expected) throw DataError(path + ": payload length mismatch");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto& t = data.tensors[i];
    t.values.resize(sizes[i]);
    for (std::uint64_t j = 0; j < sizes[i]; ++j) {
      const char* p = r.raw(data.precision);
      t.values[j] = (data.precision == 4) ? double(detail::decode_scalar<float>(p))
                                          : detail::decode_scalar<double>(p);
    }
  }
  if (!r.done()) throw DataError(path + ": trailing bytes after payload");
  return data;
}

}  // namespace dpr
