#pragma once

// Checkpoint file format:
//   magic "PSCK" | u32le tensor count | records | u32le CRC-32 of payload
//   record: u16le name length | name bytes | u8 rank | rank x u32le extents |
//           row-major f32le data
// The CRC covers everything between the magic and the checksum. Tensor names
// are unique; loading is order-independent (lookup by name).

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "pscnet/params.hpp"
#include "pscnet/tensor.hpp"

namespace pscnet {

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

namespace detail {

inline void put_u16le(std::vector<unsigned char>& b, uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xff));
  b.push_back(static_cast<unsigned char>(v >> 8));
}

inline void put_u32le(std::vector<unsigned char>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline void put_f32le(std::vector<unsigned char>& b, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32le(b, bits);
}

struct ByteReader {
  const std::vector<unsigned char>& buf;
  size_t pos = 0;
  const char* ctx;

  void need(size_t n) {
    if (pos + n > buf.size()) throw Error(std::string(ctx) + ": truncated file");
  }
  uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  uint16_t u16le() {
    need(2);
    uint16_t v = static_cast<uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32le() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32le() {
    uint32_t bits = u32le();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

inline std::vector<unsigned char> read_file_bytes(const std::string& path, const char* ctx) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(std::string(ctx) + ": cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& buf, const char* ctx) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(std::string(ctx) + ": cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw Error(std::string(ctx) + ": short write to " + path);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams<float>& params) {
  std::vector<unsigned char> payload;
  detail::put_u32le(payload, static_cast<uint32_t>(params.entries().size()));
  for (const auto& e : params.entries()) {
    if (e.name.size() > 0xffff) throw Error("checkpoint: tensor name too long: " + e.name);
    detail::put_u16le(payload, static_cast<uint16_t>(e.name.size()));
    payload.insert(payload.end(), e.name.begin(), e.name.end());
    payload.push_back(static_cast<unsigned char>(e.tensor.rank()));
    for (int d = 0; d < e.tensor.rank(); ++d) detail::put_u32le(payload, static_cast<uint32_t>(e.tensor.extent(d)));
    for (float v : e.tensor.raw()) detail::put_f32le(payload, v);
  }
  std::vector<unsigned char> file;
  file.reserve(payload.size() + 8);
  const char magic[4] = {'P', 'S', 'C', 'K'};
  file.insert(file.end(), magic, magic + 4);
  file.insert(file.end(), payload.begin(), payload.end());
  detail::put_u32le(file, static_cast<uint32_t>(::crc32(0L, payload.data(), static_cast<uInt>(payload.size()))));
  detail::write_file_bytes(path, file, "checkpoint");
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  const auto buf = detail::read_file_bytes(path, "checkpoint");
  if (buf.size() < 12) throw Error("checkpoint: truncated file");
  if (std::memcmp(buf.data(), "PSCK", 4) != 0) throw Error("checkpoint: bad magic in " + path);
  const size_t payload_len = buf.size() - 8;
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<uint32_t>(buf[buf.size() - 4 + static_cast<size_t>(i)]) << (8 * i);
  const uint32_t computed = static_cast<uint32_t>(::crc32(0L, buf.data() + 4, static_cast<uInt>(payload_len)));
  if (stored != computed) throw Error("checkpoint: checksum mismatch in " + path);

  std::vector<unsigned char> payload(buf.begin() + 4, buf.end() - 4);
  detail::ByteReader r{payload, 0, "checkpoint"};
  const uint32_t count = r.u32le();
  std::vector<NamedTensor> records;
  records.reserve(count);
  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16le();
    std::string name = r.bytes(name_len);
    if (!seen.insert(name).second) throw Error("checkpoint: duplicate tensor name " + name);
    const int rank = r.u8();
    Shape shape(static_cast<size_t>(rank));
    for (int d = 0; d < rank; ++d) shape[static_cast<size_t>(d)] = static_cast<int>(r.u32le());
    validate_shape("checkpoint", shape);
    Tensor<float> t(shape);
    for (auto& v : t.raw()) v = r.f32le();
    records.push_back({std::move(name), std::move(t)});
  }
  if (r.pos != payload.size()) throw Error("checkpoint: trailing bytes after last record");
  return records;
}

// Copies each record into the registry entry of the same name. With
// require_complete, every registry entry must appear in the records;
// otherwise records may cover a subset (entries not named are untouched).
inline void apply_checkpoint(const std::vector<NamedTensor>& records, ModelParams<float>& params,
                             bool require_complete) {
  std::set<std::string> applied;
  for (const auto& rec : records) {
    Tensor<float>* dst = params.find(rec.name);
    if (!dst) throw Error("checkpoint: tensor " + rec.name + " does not exist in the model");
    if (dst->shape() != rec.tensor.shape())
      throw Error("checkpoint: shape mismatch for " + rec.name + ": file has " + shape_str(rec.tensor.shape()) +
                  ", model has " + shape_str(dst->shape()));
    dst->raw() = rec.tensor.raw();
    applied.insert(rec.name);
  }
  if (require_complete)
    for (const auto& e : params.entries())
      if (!applied.count(e.name)) throw Error("checkpoint: tensor " + e.name + " missing from file");
}

inline void load_checkpoint(const std::string& path, ModelParams<float>& params) {
  apply_checkpoint(read_checkpoint(path), params, /*require_complete=*/true);
}

}  // namespace pscnet
