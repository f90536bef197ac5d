#pragma once

// Weight file, all integers little-endian, no padding:
//   "ACCV" | u32 version (1) | u16 len + variant name | u32 tensor count
//   per tensor: u16 len + name | u8 ndim | u32 dims[ndim] | f32 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "accvit/error.hpp"
#include "accvit/model.hpp"

namespace accvit {

inline constexpr char kWeightMagic[4] = {'A', 'C', 'C', 'V'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    if (s.size() > 0xFFFF) throw Error(ErrorCode::kIo, "name too long: " + s);
    u16(static_cast<std::uint16_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::size_t n = u16();
    need(n);
    std::string s(b_.begin() + pos_, b_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) {
      throw Error(ErrorCode::kTruncatedFile,
                  "needed " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", file has " + std::to_string(b_.size()));
    }
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{b_[pos_ + i]} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_weights(AccVitModel<T>& model) {
  detail::ByteWriter w;
  w.raw(kWeightMagic, 4);
  w.u32(kWeightVersion);
  w.str(model.config().name);
  const auto params = model.named_parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t->ndim()));
    for (auto d : t->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (const T v : t->data()) w.f32(static_cast<float>(v));
  }
  return w.bytes();
}

/// Replaces the model's parameters with the file contents. Nothing is
/// modified unless the whole file validates.
template <typename T>
void decode_weights(AccVitModel<T>& model, const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), kWeightMagic, 4) != 0) {
    throw Error(ErrorCode::kBadMagic, "not a weight file (magic mismatch)");
  }
  for (int i = 0; i < 4; ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != kWeightVersion) {
    throw Error(ErrorCode::kVersionMismatch,
                "file version " + std::to_string(version) + ", expected " +
                    std::to_string(kWeightVersion));
  }
  const std::string variant_name = r.str();
  const std::uint32_t count = r.u32();
  auto params = model.named_parameters();
  std::vector<std::vector<T>> staged;
  staged.reserve(params.size());
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const std::size_t ndim = r.u8();
    r.need(4 * ndim);
    Shape shape(ndim);
    for (auto& d : shape) d = r.u32();
    if (i >= params.size() || params[i].first != name ||
        params[i].second->shape() != shape) {
      std::string expected = i < params.size()
                                 ? params[i].first + " " + to_string(params[i].second->shape())
                                 : std::string("no more tensors");
      throw Error(ErrorCode::kShapeMismatch,
                  name + ": file has " + to_string(shape) + " (variant '" +
                      variant_name + "'), model expects " + expected);
    }
    const std::size_t n = numel(shape);
    r.need(4 * n);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(r.f32());
    staged.push_back(std::move(v));
  }
  if (count != params.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                params[count].first + ": missing from file (variant '" +
                    variant_name + "')");
  }
  if (r.remaining() != 0) {
    throw Error(ErrorCode::kInconsistentMetadata,
                std::to_string(r.remaining()) + " trailing bytes after last tensor");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].second->mutable_data();
    std::copy(staged[i].begin(), staged[i].end(), dst.begin());
  }
}

template <typename T>
void save_weights(AccVitModel<T>& model, const std::string& path) {
  const auto bytes = encode_weights(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

template <typename T>
void load_weights(AccVitModel<T>& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  decode_weights(model, bytes);
}

}  // namespace accvit
