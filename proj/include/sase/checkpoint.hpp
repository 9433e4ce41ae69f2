#pragma once

// Little-endian record container:
//   "SASECKPT" | u32 version | u32 len, hyper JSON | u32 len, RNG state |
//   u32 count, count x (u32 len, name, u64 value) |
//   u32 count, count x (u32 len, name, u32 rank, rank x u32 extent, f32 data)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sase/nn.hpp"

namespace sase {

inline constexpr std::string_view kCheckpointMagic = "SASECKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<std::uint32_t> extents;
  std::vector<float> data;

  bool operator==(const TensorRecord& o) const {
    return name == o.name && extents == o.extents && data.size() == o.data.size() &&
           std::memcmp(data.data(), o.data.data(), data.size() * sizeof(float)) == 0;
  }
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string hyper_json;
  std::string rng_state;
  std::vector<std::pair<std::string, std::uint64_t>> counters;
  std::vector<TensorRecord> records;

  const TensorRecord* find(std::string_view name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
  const TensorRecord& at(std::string_view name) const {
    if (auto* r = find(name)) return *r;
    fail(ErrorKind::Format, "checkpoint: missing record " + std::string(name));
  }
  std::uint64_t counter(std::string_view name) const {
    for (const auto& [k, v] : counters)
      if (k == name) return v;
    fail(ErrorKind::Format, "checkpoint: missing counter " + std::string(name));
  }
  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { out_.append(s); }
  void str(std::string_view s) {
    if (s.size() > 0xFFFFFFFFu) fail(ErrorKind::Value, "checkpoint: string too long");
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string str() { return bytes(u32()); }
  bool at_end() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) fail(ErrorKind::Format, "checkpoint: truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  detail::Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(ck.version);
  w.str(ck.hyper_json);
  w.str(ck.rng_state);
  w.u32(static_cast<std::uint32_t>(ck.counters.size()));
  for (const auto& [name, v] : ck.counters) {
    w.str(name);
    w.u64(v);
  }
  w.u32(static_cast<std::uint32_t>(ck.records.size()));
  for (const auto& r : ck.records) {
    std::size_t count = 1;
    for (auto e : r.extents) count *= e;
    if (count != r.data.size()) fail(ErrorKind::Shape, "checkpoint: record " + r.name + " extents do not match data");
    w.str(r.name);
    w.u32(static_cast<std::uint32_t>(r.extents.size()));
    for (auto e : r.extents) w.u32(e);
    for (float v : r.data) w.f32(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) fail(ErrorKind::Format, "checkpoint: bad magic");
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion)
    fail(ErrorKind::Format, "checkpoint: unsupported version " + std::to_string(ck.version));
  ck.hyper_json = r.str();
  ck.rng_state = r.str();
  const std::uint32_t ncounters = r.u32();
  for (std::uint32_t i = 0; i < ncounters; ++i) {
    auto name = r.str();
    ck.counters.emplace_back(std::move(name), r.u64());
  }
  const std::uint32_t nrecords = r.u32();
  for (std::uint32_t i = 0; i < nrecords; ++i) {
    TensorRecord rec;
    rec.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) fail(ErrorKind::Format, "checkpoint: record " + rec.name + " has rank " + std::to_string(rank));
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      rec.extents.push_back(r.u32());
      count *= rec.extents.back();
    }
    if (count * 4 > r.remaining()) fail(ErrorKind::Format, "checkpoint: truncated record " + rec.name);
    rec.data.resize(count);
    for (auto& v : rec.data) v = r.f32();
    ck.records.push_back(std::move(rec));
  }
  if (!r.at_end()) fail(ErrorKind::Format, "checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path);
  const auto bytes = encode_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

/// Tensor as a rank-4 record, narrowed to 32-bit floats.
template <class T>
TensorRecord to_record(const std::string& name, const Tensor<T>& t) {
  const Shape s = t.shape();
  TensorRecord r{name,
                 {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                  static_cast<std::uint32_t>(s.w)},
                 {}};
  r.data.reserve(t.size());
  for (T v : t.storage()) r.data.push_back(static_cast<float>(v));
  return r;
}

/// Record back into a tensor of the expected shape. Lower ranks fill the
/// trailing extents with 1.
template <class T>
Tensor<T> from_record(const TensorRecord& r, Shape expected) {
  if (r.extents.size() > 4) fail(ErrorKind::Format, "checkpoint: record " + r.name + " has rank above 4");
  Shape s{1, 1, 1, 1};
  for (std::size_t i = 0; i < r.extents.size(); ++i) s.at(static_cast<int>(i)) = static_cast<int>(r.extents[i]);
  if (s != expected)
    fail(ErrorKind::Shape, "checkpoint: record " + r.name + " is " + s.str() + ", expected " + expected.str());
  std::vector<T> data(r.data.begin(), r.data.end());
  return Tensor<T>(s, std::move(data));
}

template <class T>
void append_module_state(Checkpoint& ck, const Module<T>& m) {
  for (const auto& [name, p] : m.named_parameters()) ck.records.push_back(to_record("param/" + name, p->tensor()));
  for (const auto& [name, b] : m.named_buffers()) ck.records.push_back(to_record("buffer/" + name, *b));
}

template <class T>
void load_module_state(const Checkpoint& ck, const Module<T>& m) {
  for (const auto& [name, p] : m.named_parameters())
    p->assign(from_record<T>(ck.at("param/" + name), p->shape()));
  for (const auto& [name, b] : m.named_buffers()) *b = from_record<T>(ck.at("buffer/" + name), b->shape());
}

inline std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_string(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) fail(ErrorKind::Format, "checkpoint: malformed RNG state");
  return rng;
}

}  // namespace sase
