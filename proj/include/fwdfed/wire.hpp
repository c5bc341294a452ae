#pragma once

// Byte-stable encodings: forward-gradient records (binary and CSV), server
// dispatch messages and checkpoints. All integers and reals little-endian.
//
// Record (32 bytes):
//   u32 client_id | u64 base_seed | u64 index | f64 dd | u32 batch_size
//
// Dispatch message (32-byte header, then payload):
//   u32 magic "FWDD" | u16 version | u16 kind (0 = params+seeds, 1 = seeds only)
//   u64 round | u32 client_id | u32 n_params | u32 n_seeds | u32 reserved
//   n_params x f64 | n_seeds x (u64 base_seed, u64 index)
//
// Checkpoint:
//   8 bytes "FWDFEDCK" | u32 version | u32 scheme | u32 rank | u32 n_layers
//   n_layers x u32 layer size | u64 round | u64 dim | dim x f64

#include <bit>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fwdfed/error.hpp"
#include "fwdfed/fwdgrad.hpp"
#include "fwdfed/model.hpp"
#include "fwdfed/peft.hpp"

namespace fwdfed::wire {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::size_t kRecordBytes = 32;
inline constexpr std::size_t kDispatchHeaderBytes = 32;
inline constexpr std::size_t kSeedBytes = 16;
inline constexpr std::uint32_t kDispatchMagic = 0x44445746;  // "FWDD"
inline constexpr std::uint16_t kDispatchVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
 public:
  explicit Writer(Bytes& out) : out_(&out) {}
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(std::string_view s) { out_->insert(out_->end(), s.begin(), s.end()); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_->push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes* out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(in_.begin() + pos_, in_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw ShapeError("truncated message");
  }
  std::uint64_t get(int n) {
    need(n);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{in_[pos_ + i]} << (8 * i);
    pos_ += n;
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline Bytes encode_record(const ForwardGradientRecord& r) {
  Bytes out;
  out.reserve(kRecordBytes);
  Writer w(out);
  w.u32(r.client_id);
  w.u64(r.seed.base_seed);
  w.u64(r.seed.index);
  w.f64(r.dd);
  w.u32(r.batch_size);
  return out;
}

inline ForwardGradientRecord decode_record(std::span<const std::uint8_t> in) {
  if (in.size() != kRecordBytes) throw ShapeError("record must be 32 bytes");
  Reader rd(in);
  ForwardGradientRecord r;
  r.client_id = rd.u32();
  r.seed.base_seed = rd.u64();
  r.seed.index = rd.u64();
  r.dd = rd.f64();
  r.batch_size = rd.u32();
  return r;
}

// Shortest decimal form that reads back to the same double.
inline std::string format_real(double x) {
  char buf[40];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

inline std::string record_csv_header() { return "client_id,base_seed,index,dd,batch_size"; }

inline std::string encode_record_csv(const ForwardGradientRecord& r) {
  std::ostringstream os;
  os << r.client_id << ',' << r.seed.base_seed << ',' << r.seed.index << ','
     << format_real(r.dd) << ',' << r.batch_size;
  return os.str();
}

inline ForwardGradientRecord decode_record_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
  if (fields.size() != 5) throw ShapeError("record row needs 5 fields: " + line);
  try {
    ForwardGradientRecord r;
    r.client_id = static_cast<std::uint32_t>(std::stoul(fields[0]));
    r.seed.base_seed = std::stoull(fields[1]);
    r.seed.index = std::stoull(fields[2]);
    r.dd = std::stod(fields[3]);
    r.batch_size = static_cast<std::uint32_t>(std::stoul(fields[4]));
    return r;
  } catch (const std::logic_error&) {
    throw ShapeError("malformed record row: " + line);
  }
}

enum class DispatchKind : std::uint16_t { kParamsAndSeeds = 0, kSeedsOnly = 1 };

struct DispatchMessage {
  DispatchKind kind = DispatchKind::kParamsAndSeeds;
  std::uint64_t round = 0;
  std::uint32_t client_id = 0;
  ParamVector params;  // empty for kSeedsOnly
  std::vector<PerturbationSeed> seeds;

  friend bool operator==(const DispatchMessage&, const DispatchMessage&) = default;
};

inline std::size_t dispatch_size(std::size_t n_params, std::size_t n_seeds) {
  return kDispatchHeaderBytes + n_params * sizeof(double) + n_seeds * kSeedBytes;
}

inline Bytes encode_dispatch(const DispatchMessage& m) {
  Bytes out;
  out.reserve(dispatch_size(m.params.size(), m.seeds.size()));
  Writer w(out);
  w.u32(kDispatchMagic);
  w.u16(kDispatchVersion);
  w.u16(static_cast<std::uint16_t>(m.kind));
  w.u64(m.round);
  w.u32(m.client_id);
  w.u32(static_cast<std::uint32_t>(m.params.size()));
  w.u32(static_cast<std::uint32_t>(m.seeds.size()));
  w.u32(0);
  for (double p : m.params) w.f64(p);
  for (const auto& s : m.seeds) {
    w.u64(s.base_seed);
    w.u64(s.index);
  }
  return out;
}

inline DispatchMessage decode_dispatch(std::span<const std::uint8_t> in) {
  Reader rd(in);
  if (rd.u32() != kDispatchMagic) throw ShapeError("bad dispatch magic");
  if (rd.u16() != kDispatchVersion) throw ShapeError("unsupported dispatch version");
  DispatchMessage m;
  m.kind = static_cast<DispatchKind>(rd.u16());
  m.round = rd.u64();
  m.client_id = rd.u32();
  const std::uint32_t n_params = rd.u32();
  const std::uint32_t n_seeds = rd.u32();
  rd.u32();
  m.params.resize(n_params);
  for (double& p : m.params) p = rd.f64();
  m.seeds.resize(n_seeds);
  for (auto& s : m.seeds) {
    s.base_seed = rd.u64();
    s.index = rd.u64();
  }
  if (rd.remaining() != 0) throw ShapeError("trailing bytes in dispatch message");
  return m;
}

struct Checkpoint {
  TrainableMask mask;
  std::vector<std::size_t> layer_sizes;
  std::uint64_t round = 0;
  ParamVector theta;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline Bytes encode_checkpoint(const Checkpoint& c) {
  Bytes out;
  Writer w(out);
  w.raw("FWDFEDCK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.mask.scheme));
  w.u32(static_cast<std::uint32_t>(c.mask.rank));
  w.u32(static_cast<std::uint32_t>(c.layer_sizes.size()));
  for (std::size_t s : c.layer_sizes) w.u32(static_cast<std::uint32_t>(s));
  w.u64(c.round);
  w.u64(c.theta.size());
  for (double x : c.theta) w.f64(x);
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> in) {
  Reader rd(in);
  if (rd.raw(8) != "FWDFEDCK") throw ShapeError("not a checkpoint");
  if (rd.u32() != kCheckpointVersion) throw ShapeError("unsupported checkpoint version");
  Checkpoint c;
  const std::uint32_t scheme = rd.u32();
  if (scheme > static_cast<std::uint32_t>(PeftScheme::kLowRank)) {
    throw ShapeError("unknown mask scheme in checkpoint");
  }
  c.mask.scheme = static_cast<PeftScheme>(scheme);
  c.mask.rank = rd.u32();
  c.layer_sizes.resize(rd.u32());
  for (auto& s : c.layer_sizes) s = rd.u32();
  c.round = rd.u64();
  const std::uint64_t dim = rd.u64();
  if (rd.remaining() != dim * sizeof(double)) throw ShapeError("checkpoint length mismatch");
  c.theta.resize(dim);
  for (double& x : c.theta) x = rd.f64();
  return c;
}

inline void write_file(const std::string& path, const Bytes& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Bytes read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace fwdfed::wire
