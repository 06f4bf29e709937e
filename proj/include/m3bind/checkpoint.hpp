#pragma once

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "m3bind/io_util.hpp"
#include "m3bind/tensor.hpp"

namespace m3bind {

// Checkpoint container: "M3CK" magic, version, the 32-byte config
// fingerprint, then a named-entry table sorted by name. Entries hold f64
// tensors (parameters, optimizer moments), u64 words (rng state, counters)
// or utf-8 strings (phase tag). Writing the same state twice produces
// byte-identical files.
inline constexpr char kCheckpointMagic[4] = {'M', '3', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class Archive {
 public:
  enum class Dtype : std::uint8_t { kF64 = 0, kU64 = 1, kStr = 2 };

  struct Entry {
    Dtype dtype = Dtype::kF64;
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> payload;
  };

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataFormatError("checkpoint: missing entry '" + name + "'");
    return it->second;
  }

  void put_tensor(const std::string& name, const Tensor& t) {
    ByteWriter w;
    for (std::size_t i = 0; i < t.size(); ++i) w.f64(t[i]);
    entries_[name] = Entry{Dtype::kF64, t.shape(), w.data()};
  }

  void put_u64s(const std::string& name, const std::vector<std::uint64_t>& values) {
    ByteWriter w;
    for (std::uint64_t v : values) w.u64(v);
    entries_[name] = Entry{Dtype::kU64, {values.size()}, w.data()};
  }

  void put_str(const std::string& name, const std::string& s) {
    std::vector<std::uint8_t> payload(s.begin(), s.end());
    entries_[name] = Entry{Dtype::kStr, {s.size()}, std::move(payload)};
  }

  Tensor get_tensor(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != Dtype::kF64) throw DataFormatError("checkpoint: '" + name + "' is not a tensor");
    std::size_t n = 1;
    for (std::size_t d : e.dims) n *= d;
    std::vector<double> data(n);
    ByteReader r(e.payload);
    for (std::size_t i = 0; i < n; ++i) data[i] = r.f64();
    return Tensor(e.dims, std::move(data));
  }

  std::vector<std::uint64_t> get_u64s(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != Dtype::kU64) throw DataFormatError("checkpoint: '" + name + "' is not u64 data");
    std::vector<std::uint64_t> out(e.dims.empty() ? 0 : e.dims[0]);
    ByteReader r(e.payload);
    for (auto& v : out) v = r.u64();
    return out;
  }

  std::string get_str(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != Dtype::kStr) throw DataFormatError("checkpoint: '" + name + "' is not a string");
    return {e.payload.begin(), e.payload.end()};
  }

  void save(const std::string& path, const std::string& fingerprint_hex) const {
    if (fingerprint_hex.size() != 64) {
      throw ValueError("checkpoint: fingerprint must be 64 hex chars");
    }
    ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    for (std::size_t i = 0; i < 32; ++i) {
      w.u8(static_cast<std::uint8_t>(std::stoi(fingerprint_hex.substr(2 * i, 2), nullptr, 16)));
    }
    w.u64(entries_.size());
    for (const auto& [name, e] : entries_) {
      w.str(name);
      w.u8(static_cast<std::uint8_t>(e.dtype));
      w.u32(static_cast<std::uint32_t>(e.dims.size()));
      for (std::size_t d : e.dims) w.u64(d);
      w.u64(e.payload.size());
      w.bytes(e.payload.data(), e.payload.size());
    }
    w.write_file(path);
  }

  void insert_entry(const std::string& name, Entry e) { entries_[name] = std::move(e); }

 private:
  std::map<std::string, Entry> entries_;
};

struct LoadedArchive {
  Archive archive;
  std::string fingerprint_hex;
};

inline LoadedArchive load_archive(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    std::string found(magic, 4);
    std::string hint = found == "M3BD" ? " (this is a corpus file, not a checkpoint)" : "";
    throw DataFormatError("checkpoint: wrong magic in " + path + " (expected M3CK, found '" +
                          found + "')" + hint);
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataFormatError("checkpoint: unsupported version " + std::to_string(version) + " in " +
                          path);
  }
  LoadedArchive out;
  static const char* digits = "0123456789abcdef";
  for (std::size_t i = 0; i < 32; ++i) {
    const std::uint8_t b = r.u8();
    out.fingerprint_hex.push_back(digits[b >> 4]);
    out.fingerprint_hex.push_back(digits[b & 0xf]);
  }
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    Archive::Entry e;
    e.dtype = static_cast<Archive::Dtype>(r.u8());
    const std::uint32_t rank = r.u32();
    e.dims.resize(rank);
    for (auto& d : e.dims) d = r.u64();
    const std::uint64_t len = r.u64();
    e.payload.resize(len);
    r.bytes(e.payload.data(), len, "entry payload");
    out.archive.insert_entry(name, std::move(e));
  }
  if (!r.done()) {
    throw DataFormatError("checkpoint: trailing bytes at offset " + std::to_string(r.offset()) +
                          " in " + path);
  }
  return out;
}

}  // namespace m3bind
