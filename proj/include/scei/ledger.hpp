#pragma once

// Append-only hash-chained record store.
//
// Record byte layout (all integers little-endian). The hash is SHA-256 over
// every field before `hash`:
//
//   u64  index
//   u64  round
//   u8   kind
//   u8   has_node          0 or 1
//   u64  node_id           0 when has_node == 0
//   u64  payload_length
//   ...  payload
//   32B  prev_hash         all zero for the genesis record
//   32B  hash
//
// A dump file is a sequence of `u32 length ‖ record bytes`.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "scei/common.hpp"
#include "scei/model.hpp"

namespace scei {

using Digest = std::array<std::uint8_t, 32>;
using Bytes = std::vector<std::uint8_t>;

enum class RecordKind : std::uint8_t {
  kGenesis = 0,
  kLocalWeights = 1,
  kGlobalWeights = 2,
  kAccuracyList = 3,
  kAlphaDecision = 4,
  kSuspicionSet = 5,
  kExpulsion = 6,
};

inline constexpr std::uint8_t kMaxRecordKind = 6;

inline std::string_view to_string(RecordKind k) {
  switch (k) {
    case RecordKind::kGenesis: return "Genesis";
    case RecordKind::kLocalWeights: return "LocalWeights";
    case RecordKind::kGlobalWeights: return "GlobalWeights";
    case RecordKind::kAccuracyList: return "AccuracyList";
    case RecordKind::kAlphaDecision: return "AlphaDecision";
    case RecordKind::kSuspicionSet: return "SuspicionSet";
    case RecordKind::kExpulsion: return "Expulsion";
  }
  return "Unknown";
}

class LedgerFormatError : public Error {
 public:
  using Error::Error;
};

inline Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size())
    throw Error("SHA-256 computation failed");
  return out;
}

// Little-endian byte writer/reader used by records and payloads.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  Bytes take() && { return std::move(buf_); }
  const Bytes& buffer() const noexcept { return buf_; }

 private:
  template <typename T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = buf_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const noexcept { return buf_.size() - pos_; }
  bool done() const noexcept { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw LedgerFormatError("unexpected end of data");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(T(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

struct LedgerRecord {
  std::uint64_t index = 0;
  Round round = 0;
  RecordKind kind = RecordKind::kGenesis;
  std::optional<NodeId> node_id;
  Bytes payload;
  Digest prev_hash{};
  Digest hash{};

  friend bool operator==(const LedgerRecord&, const LedgerRecord&) = default;
};

// Bytes covered by the record hash.
inline Bytes hash_input(const LedgerRecord& r) {
  ByteWriter w;
  w.u64(r.index);
  w.u64(r.round);
  w.u8(static_cast<std::uint8_t>(r.kind));
  w.u8(r.node_id ? 1 : 0);
  w.u64(r.node_id.value_or(0));
  w.u64(r.payload.size());
  w.bytes(r.payload);
  w.bytes(r.prev_hash);
  return std::move(w).take();
}

inline Digest compute_hash(const LedgerRecord& r) { return sha256(hash_input(r)); }

inline Bytes serialize(const LedgerRecord& r) {
  Bytes out = hash_input(r);
  out.insert(out.end(), r.hash.begin(), r.hash.end());
  return out;
}

inline LedgerRecord deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  LedgerRecord r;
  r.index = in.u64();
  const std::uint64_t round = in.u64();
  if (round > UINT32_MAX) throw LedgerFormatError("round out of range");
  r.round = Round(round);
  const std::uint8_t kind = in.u8();
  if (kind > kMaxRecordKind) throw LedgerFormatError("unknown record kind");
  r.kind = RecordKind(kind);
  const std::uint8_t has_node = in.u8();
  const std::uint64_t node = in.u64();
  if (has_node > 1) throw LedgerFormatError("bad node flag");
  if (has_node) {
    if (node > UINT32_MAX) throw LedgerFormatError("node id out of range");
    r.node_id = NodeId(node);
  } else if (node != 0) {
    throw LedgerFormatError("node id present without node flag");
  }
  const std::uint64_t len = in.u64();
  if (len > in.remaining()) throw LedgerFormatError("payload length exceeds record");
  auto payload = in.bytes(std::size_t(len));
  r.payload.assign(payload.begin(), payload.end());
  auto prev = in.bytes(32);
  std::copy(prev.begin(), prev.end(), r.prev_hash.begin());
  auto h = in.bytes(32);
  std::copy(h.begin(), h.end(), r.hash.begin());
  if (!in.done()) throw LedgerFormatError("trailing bytes after record");
  return r;
}

// Index of the first record whose hash, linkage or position is wrong, or
// nullopt when the whole chain checks out.
inline std::optional<std::size_t> verify_chain(std::span<const LedgerRecord> records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.index != i) return i;
    if (i == 0) {
      if (r.kind != RecordKind::kGenesis || r.prev_hash != Digest{}) return i;
    } else if (r.prev_hash != records[i - 1].hash) {
      return i;
    }
    if (compute_hash(r) != r.hash) return i;
  }
  return std::nullopt;
}

struct DumpContents {
  std::vector<LedgerRecord> records;
  std::optional<std::size_t> malformed_at;  // first record that failed to parse
};

inline Bytes encode_dump(std::span<const LedgerRecord> records) {
  ByteWriter w;
  for (const auto& r : records) {
    Bytes body = serialize(r);
    if (body.size() > UINT32_MAX) throw Error("record too large for dump framing");
    w.u32(std::uint32_t(body.size()));
    w.bytes(body);
  }
  return std::move(w).take();
}

inline DumpContents decode_dump(std::span<const std::uint8_t> bytes) {
  DumpContents out;
  ByteReader in(bytes);
  while (!in.done()) {
    try {
      const std::uint32_t len = in.u32();
      out.records.push_back(deserialize(in.bytes(len)));
    } catch (const LedgerFormatError&) {
      out.malformed_at = out.records.size();
      break;
    }
  }
  return out;
}

// Chain verification over a dump: a record that cannot be parsed counts as
// the first bad index unless an earlier record already fails.
inline std::optional<std::size_t> verify_dump(std::span<const std::uint8_t> bytes) {
  auto contents = decode_dump(bytes);
  if (auto bad = verify_chain(contents.records)) return bad;
  return contents.malformed_at;
}

inline Bytes read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_binary_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw Error("write failed for " + path);
}

class Ledger {
 public:
  Ledger() {
    LedgerRecord g;
    g.kind = RecordKind::kGenesis;
    g.hash = compute_hash(g);
    records_.push_back(std::move(g));
  }

  // The single ordering point: appends are serialized.
  LedgerRecord append(Round round, RecordKind kind, std::optional<NodeId> node_id,
                      Bytes payload) {
    std::lock_guard lock(mu_);
    LedgerRecord r;
    r.index = records_.size();
    r.round = round;
    r.kind = kind;
    r.node_id = node_id;
    r.payload = std::move(payload);
    r.prev_hash = records_.back().hash;
    r.hash = compute_hash(r);
    records_.push_back(r);
    return r;
  }

  std::vector<LedgerRecord> query_round(Round round, RecordKind kind) const {
    std::lock_guard lock(mu_);
    std::vector<LedgerRecord> out;
    for (const auto& r : records_)
      if (r.round == round && r.kind == kind) out.push_back(r);
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return records_.size();
  }

  LedgerRecord back() const {
    std::lock_guard lock(mu_);
    return records_.back();
  }

  // Snapshot copy of every committed record.
  std::vector<LedgerRecord> snapshot() const {
    std::lock_guard lock(mu_);
    return records_;
  }

  std::optional<std::size_t> verify() const {
    std::lock_guard lock(mu_);
    return verify_chain(records_);
  }

  void write_dump(const std::string& path) const {
    std::lock_guard lock(mu_);
    write_binary_file(path, encode_dump(records_));
  }

 private:
  mutable std::mutex mu_;
  std::vector<LedgerRecord> records_;
};

// ---------------------------------------------------------------------------
// Payload codecs
// ---------------------------------------------------------------------------

namespace payload {

inline Bytes encode_params(const ParamVector& p) {
  ByteWriter w;
  w.u64(p.size());
  for (double v : p) w.f64(v);
  return std::move(w).take();
}

inline ParamVector decode_params(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const std::uint64_t n = in.u64();
  if (n > in.remaining() / 8) throw LedgerFormatError("parameter count exceeds payload");
  std::vector<double> values(n);
  for (auto& v : values) v = in.f64();
  if (!in.done()) throw LedgerFormatError("trailing bytes after parameters");
  return ParamVector(std::move(values));
}

struct AccuracyEntry {
  double alpha = 0.0;
  double accuracy = 0.0;
  friend bool operator==(const AccuracyEntry&, const AccuracyEntry&) = default;
};

inline Bytes encode_accuracies(std::span<const AccuracyEntry> entries) {
  ByteWriter w;
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.f64(e.alpha);
    w.f64(e.accuracy);
  }
  return std::move(w).take();
}

inline std::vector<AccuracyEntry> decode_accuracies(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const std::uint64_t n = in.u64();
  if (n > in.remaining() / 16) throw LedgerFormatError("entry count exceeds payload");
  std::vector<AccuracyEntry> out(n);
  for (auto& e : out) {
    e.alpha = in.f64();
    e.accuracy = in.f64();
  }
  if (!in.done()) throw LedgerFormatError("trailing bytes after accuracies");
  return out;
}

struct AlphaDecision {
  double alpha = 0.0;
  std::uint64_t grid_index = 0;
  std::uint8_t policy = 0;
  friend bool operator==(const AlphaDecision&, const AlphaDecision&) = default;
};

inline Bytes encode_alpha(const AlphaDecision& d) {
  ByteWriter w;
  w.f64(d.alpha);
  w.u64(d.grid_index);
  w.u8(d.policy);
  return std::move(w).take();
}

inline AlphaDecision decode_alpha(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  AlphaDecision d;
  d.alpha = in.f64();
  d.grid_index = in.u64();
  d.policy = in.u8();
  if (!in.done()) throw LedgerFormatError("trailing bytes after alpha decision");
  return d;
}

inline Bytes encode_nodes(std::span<const NodeId> nodes) {
  ByteWriter w;
  w.u64(nodes.size());
  for (auto n : nodes) w.u64(n);
  return std::move(w).take();
}

inline std::vector<NodeId> decode_nodes(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const std::uint64_t n = in.u64();
  if (n > in.remaining() / 8) throw LedgerFormatError("node count exceeds payload");
  std::vector<NodeId> out(n);
  for (auto& id : out) {
    const std::uint64_t v = in.u64();
    if (v > UINT32_MAX) throw LedgerFormatError("node id out of range");
    id = NodeId(v);
  }
  if (!in.done()) throw LedgerFormatError("trailing bytes after node set");
  return out;
}

}  // namespace payload

}  // namespace scei
