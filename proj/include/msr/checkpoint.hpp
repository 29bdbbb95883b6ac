#pragma once

// Versioned little-endian checkpoint container. Layout in docs/checkpoint-format.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msr/data.hpp"
#include "msr/errors.hpp"
#include "msr/tensor.hpp"

namespace msr {

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'R', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct Checkpoint {
  std::string config_text;
  std::map<std::string, std::string> meta;  // counters, accumulators, rng states
  std::vector<std::pair<std::string, Tensor<double>>> tensors;

  const Tensor<double>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw DataError("checkpoint: no tensor named " + name);
  }
  const std::string& at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataError("checkpoint: missing field " + key);
    return it->second;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str64(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() { return need(1)[0]; }
  std::uint32_t u32() {
    const auto* p = need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    const auto* p = need(n);
    return {reinterpret_cast<const char*>(p), n};
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::uint8_t* need(std::size_t n) {
    if (n > remaining()) {
      throw DataError("checkpoint: truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                      ", have " + std::to_string(remaining()) + ")");
    }
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  w.str64(c.config_text);
  std::string meta;
  for (const auto& [k, v] : c.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint: meta entry " + k + " contains a separator");
    }
    meta += k + "=" + v + "\n";
  }
  w.str64(meta);
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(kDtypeF64);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    w.u64(offset);
    offset += 8 * t.size();
  }
  w.u64(offset);
  for (const auto& [name, t] : c.tensors) {
    for (double v : t.data()) w.f64(v);
  }
  return std::move(w.buffer());
}

inline Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.str(8) != std::string(kCheckpointMagic, 8)) throw DataError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Checkpoint c;
  c.config_text = r.str(r.u64());
  const std::string meta = r.str(r.u64());
  for (std::size_t start = 0; start < meta.size();) {
    const auto nl = meta.find('\n', start);
    const auto eq = meta.find('=', start);
    if (nl == std::string::npos || eq == std::string::npos || eq > nl) throw DataError("checkpoint: malformed meta");
    c.meta[meta.substr(start, eq - start)] = meta.substr(eq + 1, nl - eq - 1);
    start = nl + 1;
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.u32());
    if (r.u8() != kDtypeF64) throw DataError("checkpoint: tensor " + e.name + " has unsupported dtype");
    const std::uint8_t rank = r.u8();
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.u64());
    e.offset = r.u64();
    manifest.push_back(std::move(e));
  }
  const std::uint64_t payload = r.u64();
  if (payload != r.remaining()) {
    throw DataError("checkpoint: payload is " + std::to_string(r.remaining()) + " bytes, header says " +
                    std::to_string(payload));
  }
  const std::size_t base = r.pos();
  for (auto& e : manifest) {
    const std::size_t n = shape_numel(e.shape);
    if (e.offset + 8 * n > payload) throw DataError("checkpoint: tensor " + e.name + " overruns the payload");
    detail::ByteReader tr(bytes.subspan(base + e.offset, 8 * n));
    std::vector<double> v(n);
    for (auto& x : v) x = tr.f64();
    c.tensors.emplace_back(e.name, Tensor<double>(e.shape, std::move(v)));
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  write_file_bytes(tmp, serialize_checkpoint(c));
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file_bytes(path));
}

}  // namespace msr
