#pragma once

// Checkpoint blob format shared by field and segmenter snapshots.
//
// Layout (all little-endian):
//   magic "FSB1", kind byte ('F' field / 'S' segmenter), u32 version,
//   a kind-specific config block, then the parameter table:
//   u32 entry count; per entry: u16 name length, name bytes, u8 trainable,
//   u8 rank, i32 extents..., f64 values...
// Doubles are written raw, so round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fieldseg/optim.hpp"
#include "fieldseg/tensor.hpp"

namespace fieldseg {

struct BlobError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Blob = std::vector<std::uint8_t>;

constexpr std::uint32_t kBlobVersion = 1;
constexpr char kBlobMagic[4] = {'F', 'S', 'B', '1'};

class ByteWriter {
 public:
  Blob take() { return std::move(bytes_); }
  const Blob& bytes() const { return bytes_; }

  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void i32(std::int32_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    if (s.size() > 0xffff) throw BlobError("string too long for blob");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }

 private:
  Blob bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const Blob& b) : bytes_(b) {}

  std::uint8_t u8() { return read<std::uint8_t>(); }
  std::uint16_t u16() { return read<std::uint16_t>(); }
  std::uint32_t u32() { return read<std::uint32_t>(); }
  std::int32_t i32() { return read<std::int32_t>(); }
  double f64() { return read<double>(); }
  std::string str() {
    std::size_t n = u16();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool exhausted() const { return pos_ == bytes_.size(); }

 private:
  template <typename T>
  T read() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw BlobError("blob truncated");
  }

  const Blob& bytes_;
  std::size_t pos_ = 0;
};

inline void write_blob_header(ByteWriter& w, char kind) {
  w.raw(kBlobMagic, 4);
  w.u8(static_cast<std::uint8_t>(kind));
  w.u32(kBlobVersion);
}

inline void read_blob_header(ByteReader& r, char expected_kind) {
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, kBlobMagic, 4) != 0) throw BlobError("bad blob magic");
  char kind = static_cast<char>(r.u8());
  if (kind != expected_kind)
    throw BlobError(std::string("blob kind mismatch: expected '") + expected_kind + "' got '" +
                    kind + "'");
  std::uint32_t version = r.u32();
  if (version != kBlobVersion)
    throw BlobError("unsupported blob version " + std::to_string(version));
}

inline void write_param_store(ByteWriter& w, const ParamStore& store) {
  w.u32(static_cast<std::uint32_t>(store.size()));
  store.for_each([&](const std::string& name, const ParamStore::Entry& e) {
    w.str(name);
    w.u8(e.trainable ? 1 : 0);
    const Tensor& t = e.var.value();
    w.u8(static_cast<std::uint8_t>(t.ndim()));
    for (int d : t.shape()) w.i32(d);
    w.raw(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(double));
  });
}

inline ParamStore read_param_store(ByteReader& r) {
  ParamStore store;
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    bool trainable = r.u8() != 0;
    int rank = r.u8();
    Shape shape;
    for (int d = 0; d < rank; ++d) {
      std::int32_t e = r.i32();
      if (e <= 0) throw BlobError("nonpositive extent in blob for " + name);
      shape.push_back(e);
    }
    Tensor t(shape);
    for (std::int64_t k = 0; k < t.numel(); ++k) t[k] = r.f64();
    store.add(name, std::move(t), trainable);
  }
  return store;
}

inline void save_blob(const std::string& path, const Blob& blob) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw BlobError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw BlobError("short write: " + path);
}

inline Blob load_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw BlobError("cannot open: " + path);
  std::streamsize n = in.tellg();
  in.seekg(0);
  Blob b(static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(b.data()), n);
  if (in.gcount() != n) throw BlobError("short read: " + path);
  return b;
}

}  // namespace fieldseg
