#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "asymdsd/common.hpp"
#include "asymdsd/tensor.hpp"

namespace asymdsd::io {

// Binary tensor table: magic "ADSD", u32 format version, u32 entry count,
// then per entry (u32 name length, name, u8 dtype, u32 rank, u32 dims[],
// u64 byte length, raw little-endian data). Checkpoints and feature dumps
// share this container.

static_assert(std::endian::native == std::endian::little,
              "tensor table assumes a little-endian host");

enum class DType : uint8_t { kF32 = 0, kF64 = 1, kI64 = 2, kU8 = 3 };

inline size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kI64: return 8;
    case DType::kU8: return 1;
  }
  fail("tensor table: invalid dtype");
}

struct TableEntry {
  DType dtype = DType::kF32;
  std::vector<int> shape;
  std::vector<uint8_t> raw;

  int64_t numel() const { return Tensor::numel_of(shape); }

  Tensor as_f32() const {
    check(dtype == DType::kF32, "tensor table: entry is not f32");
    Tensor t;
    t.shape = shape;
    t.data.resize(size_t(numel()));
    std::memcpy(t.data.data(), raw.data(), raw.size());
    return t;
  }
  std::vector<int64_t> as_i64() const {
    check(dtype == DType::kI64, "tensor table: entry is not i64");
    std::vector<int64_t> v(static_cast<size_t>(numel()));
    std::memcpy(v.data(), raw.data(), raw.size());
    return v;
  }
  std::vector<uint8_t> as_u8() const {
    check(dtype == DType::kU8, "tensor table: entry is not u8");
    return raw;
  }
};

class TensorTable {
 public:
  static constexpr uint32_t kVersion = 1;

  void put_f32(const std::string& name, const Tensor& t) {
    TableEntry e;
    e.dtype = DType::kF32;
    e.shape = t.shape;
    e.raw.resize(t.data.size() * 4);
    std::memcpy(e.raw.data(), t.data.data(), e.raw.size());
    entries_[name] = std::move(e);
  }
  void put_i64(const std::string& name, const std::vector<int64_t>& v) {
    TableEntry e;
    e.dtype = DType::kI64;
    e.shape = {int(v.size())};
    e.raw.resize(v.size() * 8);
    std::memcpy(e.raw.data(), v.data(), e.raw.size());
    entries_[name] = std::move(e);
  }
  void put_u8(const std::string& name, const std::vector<uint8_t>& v) {
    TableEntry e;
    e.dtype = DType::kU8;
    e.shape = {int(v.size())};
    e.raw = v;
    entries_[name] = std::move(e);
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  const TableEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    check(it != entries_.end(), "tensor table: missing entry '", name, "'");
    return it->second;
  }
  const std::map<std::string, TableEntry>& entries() const { return entries_; }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), "tensor table: cannot open '", path, "' for writing");
    f.write("ADSD", 4);
    write_u32(f, kVersion);
    write_u32(f, uint32_t(entries_.size()));
    for (const auto& [name, e] : entries_) {
      write_u32(f, uint32_t(name.size()));
      f.write(name.data(), std::streamsize(name.size()));
      const uint8_t d = uint8_t(e.dtype);
      f.write(reinterpret_cast<const char*>(&d), 1);
      write_u32(f, uint32_t(e.shape.size()));
      for (int dim : e.shape) write_u32(f, uint32_t(dim));
      const uint64_t nbytes = e.raw.size();
      f.write(reinterpret_cast<const char*>(&nbytes), 8);
      f.write(reinterpret_cast<const char*>(e.raw.data()),
              std::streamsize(e.raw.size()));
    }
    check(f.good(), "tensor table: write to '", path, "' failed");
  }

  static TensorTable read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "tensor table: cannot open '", path, "'");
    Reader r{f, 0, path};
    char magic[4];
    r.bytes(magic, 4);
    check(std::memcmp(magic, "ADSD", 4) == 0, "tensor table: bad magic in '",
          path, "'");
    const uint32_t version = r.u32();
    check(version == kVersion, "tensor table: format version mismatch (file ",
          version, ", expected ", kVersion, ")");
    const uint32_t count = r.u32();
    TensorTable t;
    for (uint32_t i = 0; i < count; ++i) {
      const uint32_t name_len = r.u32();
      check(name_len < (1u << 20), "tensor table: corrupt entry at byte offset ",
            r.offset);
      std::string name(name_len, '\0');
      r.bytes(name.data(), name_len);
      uint8_t d;
      r.bytes(reinterpret_cast<char*>(&d), 1);
      check(d <= uint8_t(DType::kU8), "tensor table: corrupt dtype at byte offset ",
            r.offset);
      TableEntry e;
      e.dtype = DType(d);
      const uint32_t rank = r.u32();
      check(rank <= 8, "tensor table: corrupt rank at byte offset ", r.offset);
      e.shape.resize(rank);
      for (uint32_t q = 0; q < rank; ++q) e.shape[q] = int(r.u32());
      uint64_t nbytes;
      r.bytes(reinterpret_cast<char*>(&nbytes), 8);
      check(nbytes == uint64_t(e.numel()) * dtype_size(e.dtype),
            "tensor table: corrupt byte length at byte offset ", r.offset);
      e.raw.resize(nbytes);
      r.bytes(reinterpret_cast<char*>(e.raw.data()), std::streamsize(nbytes));
      t.entries_[name] = std::move(e);
    }
    return t;
  }

 private:
  struct Reader {
    std::ifstream& f;
    uint64_t offset;
    const std::string& path;
    void bytes(char* dst, std::streamsize n) {
      f.read(dst, n);
      check(f.gcount() == n, "tensor table: truncated file '", path,
            "' at byte offset ", offset + uint64_t(f.gcount()));
      offset += uint64_t(n);
    }
    uint32_t u32() {
      uint32_t v;
      bytes(reinterpret_cast<char*>(&v), 4);
      return v;
    }
  };

  static void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
  }

  std::map<std::string, TableEntry> entries_;
};

}  // namespace asymdsd::io
