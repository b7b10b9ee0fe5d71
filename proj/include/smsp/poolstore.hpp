// SPDX-License-Identifier: Apache-2.0
//
// On-disk pool of pruned models. One directory per pool:
//
//   index.smpi           record table, replaced atomically on every save
//   record_<id>.smpr     one file per PrunedRecord
//
// The byte layout of both files is documented in docs/pool_format.md. All
// integers and reals are little-endian; every file ends with the 64-bit
// FNV-1a checksum of all bytes preceding it.
//
// Readers may run concurrently with each other; a single writer at a time
// is assumed.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "smsp/common.hpp"
#include "smsp/data.hpp"
#include "smsp/record.hpp"

namespace smsp {

inline constexpr std::array<char, 4> kRecordMagic{'S', 'M', 'P', 'R'};
inline constexpr std::array<char, 4> kIndexMagic{'S', 'M', 'P', 'I'};
inline constexpr std::uint32_t kPoolFormatVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void raw(std::span<const char> bytes) {
    for (char c : bytes) out_.push_back(static_cast<std::uint8_t>(c));
  }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    require(s.size() <= 0xffff, ErrorCode::invalid_argument, "string too long for pool format");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }
  /// Appends the checksum of everything written so far.
  void seal() { u64(fnv1a(out_)); }

  const std::vector<std::uint8_t>& bytes() const { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what) : in_(bytes), what_(std::move(what)) {}

  void expect_magic(const std::array<char, 4>& magic) {
    need(4);
    require(std::equal(magic.begin(), magic.end(), in_.begin() + static_cast<std::ptrdiff_t>(at_)),
            ErrorCode::bad_format, what_ + ": bad magic");
    at_ += 4;
  }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u16();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + at_), n);
    at_ += n;
    return s;
  }

  /// Verifies the trailing checksum and that it ends the buffer.
  std::uint64_t verify_seal() {
    const std::size_t body = at_;
    const auto stored = u64();
    require(at_ == in_.size(), ErrorCode::bad_format, what_ + ": trailing bytes after checksum");
    require(stored == fnv1a(in_.first(body)), ErrorCode::checksum_mismatch, what_ + ": checksum mismatch");
    return stored;
  }

  /// Checks the trailing checksum before parsing, so corrupted length
  /// fields surface as checksum failures.
  void precheck_seal() const {
    require(in_.size() >= 8, ErrorCode::bad_format, what_ + ": truncated");
    const auto body = in_.size() - 8;
    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(in_[body + i]) << (8 * i);
    require(stored == fnv1a(in_.first(body)), ErrorCode::checksum_mismatch, what_ + ": checksum mismatch");
  }

 private:
  void need(std::size_t n) const {
    require(at_ + n <= in_.size(), ErrorCode::bad_format, what_ + ": truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[at_ + i]) << (8 * i);
    at_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> in_;
  std::string what_;
  std::size_t at_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_record(const PrunedRecord& r) {
  detail::ByteWriter w;
  w.raw(kRecordMagic);
  w.u32(kPoolFormatVersion);
  w.u64(r.record_id);
  w.str(r.arch_id);
  w.u32(static_cast<std::uint32_t>(r.scores.size()));
  w.u32(static_cast<std::uint32_t>(r.class_labels.size()));
  w.f32(r.pruning_ratio);
  w.u64(r.meta.task_id);
  w.f64(r.meta.tau);
  w.f64(r.meta.lambda);
  w.u32(r.meta.iterations);
  w.u64(r.meta.seed);
  w.f64(r.meta.achieved_ratio);
  w.i64(r.meta.created_at);
  for (int c : r.class_labels) w.i32(c);
  for (float s : r.scores) w.f32(s);
  w.seal();
  return w.bytes();
}

inline PrunedRecord decode_record(std::span<const std::uint8_t> bytes, const std::string& what = "record") {
  detail::ByteReader rd(bytes, what);
  rd.precheck_seal();
  rd.expect_magic(kRecordMagic);
  const auto version = rd.u32();
  require(version == kPoolFormatVersion, ErrorCode::bad_format,
          what + ": unsupported version " + std::to_string(version));
  PrunedRecord r;
  r.record_id = rd.u64();
  r.arch_id = rd.str();
  const auto n = rd.u32();
  const auto c = rd.u32();
  r.pruning_ratio = rd.f32();
  r.meta.task_id = rd.u64();
  r.meta.tau = rd.f64();
  r.meta.lambda = rd.f64();
  r.meta.iterations = rd.u32();
  r.meta.seed = rd.u64();
  r.meta.achieved_ratio = rd.f64();
  r.meta.created_at = rd.i64();
  require(static_cast<std::size_t>(c) * 4 + static_cast<std::size_t>(n) * 4 + 8 <= bytes.size(),
          ErrorCode::bad_format, what + ": truncated");
  r.class_labels.resize(c);
  for (auto& v : r.class_labels) v = rd.i32();
  r.scores.resize(n);
  for (auto& v : r.scores) v = rd.f32();
  rd.verify_seal();
  return r;
}

struct PoolIndexEntry {
  std::uint64_t record_id = 0;
  std::string arch_id;
  std::uint32_t task_size = 0;
  float pruning_ratio = 0.0F;
  std::string file_name;
  std::uint64_t checksum = 0;

  friend bool operator==(const PoolIndexEntry&, const PoolIndexEntry&) = default;
};

struct PoolIndex {
  std::vector<PoolIndexEntry> entries;  // ascending record_id

  const PoolIndexEntry* find(std::uint64_t id) const {
    const auto it = std::lower_bound(entries.begin(), entries.end(), id,
                                     [](const PoolIndexEntry& e, std::uint64_t v) { return e.record_id < v; });
    return it != entries.end() && it->record_id == id ? &*it : nullptr;
  }
};

inline std::vector<std::uint8_t> encode_index(const PoolIndex& index) {
  detail::ByteWriter w;
  w.raw(kIndexMagic);
  w.u32(kPoolFormatVersion);
  w.u32(static_cast<std::uint32_t>(index.entries.size()));
  for (const auto& e : index.entries) {
    w.u64(e.record_id);
    w.str(e.arch_id);
    w.u32(e.task_size);
    w.f32(e.pruning_ratio);
    w.str(e.file_name);
    w.u64(e.checksum);
  }
  w.seal();
  return w.bytes();
}

inline PoolIndex decode_index(std::span<const std::uint8_t> bytes) {
  detail::ByteReader rd(bytes, "pool index");
  rd.precheck_seal();
  rd.expect_magic(kIndexMagic);
  const auto version = rd.u32();
  require(version == kPoolFormatVersion, ErrorCode::bad_format,
          "pool index: unsupported version " + std::to_string(version));
  PoolIndex index;
  const auto count = rd.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    PoolIndexEntry e;
    e.record_id = rd.u64();
    e.arch_id = rd.str();
    e.task_size = rd.u32();
    e.pruning_ratio = rd.f32();
    e.file_name = rd.str();
    e.checksum = rd.u64();
    index.entries.push_back(std::move(e));
  }
  rd.verify_seal();
  return index;
}

inline std::filesystem::path index_path(const std::filesystem::path& pool) { return pool / "index.smpi"; }

/// Reads the pool index; a missing directory or index is an empty pool.
inline PoolIndex load_index(const std::filesystem::path& pool) {
  if (!std::filesystem::exists(index_path(pool))) return {};
  return decode_index(detail::read_file(index_path(pool)));
}

/// Writes the record as a new pool entry and returns its id. The record
/// file is written first; the index is then replaced by rename, so a failed
/// save leaves the previous index intact.
inline std::uint64_t save_record(const std::filesystem::path& pool, const PrunedRecord& record) {
  validate(record);
  std::error_code ec;
  std::filesystem::create_directories(pool, ec);
  require(!ec, ErrorCode::io_failure, "cannot create pool directory " + pool.string() + ": " + ec.message());
  PoolIndex index = load_index(pool);
  const std::uint64_t id = index.entries.empty() ? 1 : index.entries.back().record_id + 1;

  PrunedRecord stored = record;
  stored.record_id = id;
  const auto bytes = encode_record(stored);
  PoolIndexEntry e;
  e.record_id = id;
  e.arch_id = stored.arch_id;
  e.task_size = static_cast<std::uint32_t>(stored.class_labels.size());
  e.pruning_ratio = stored.pruning_ratio;
  e.file_name = "record_" + std::to_string(id) + ".smpr";
  std::uint64_t sum = 0;
  for (int i = 0; i < 8; ++i) sum |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
  e.checksum = sum;

  detail::write_file_atomic(pool / e.file_name, bytes);
  index.entries.push_back(std::move(e));
  detail::write_file_atomic(index_path(pool), encode_index(index));
  return id;
}

inline PrunedRecord load_record(const std::filesystem::path& pool, std::uint64_t id) {
  const PoolIndex index = load_index(pool);
  const PoolIndexEntry* e = index.find(id);
  require(e != nullptr, ErrorCode::not_found, "record " + std::to_string(id) + " not in pool " + pool.string());
  const auto bytes = detail::read_file(pool / e->file_name);
  PrunedRecord r = decode_record(bytes, e->file_name);
  std::uint64_t sum = 0;
  for (int i = 0; i < 8; ++i) sum |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
  require(sum == e->checksum, ErrorCode::checksum_mismatch, e->file_name + ": checksum differs from index");
  require(r.record_id == id && r.arch_id == e->arch_id, ErrorCode::bad_format,
          e->file_name + ": header disagrees with index");
  validate(r);
  return r;
}

struct PoolFilter {
  std::optional<std::string> arch_id;
  std::optional<std::size_t> task_size;
  std::optional<float> pruning_ratio;
};

/// Ids of every record matching all supplied filter fields, ascending.
inline std::vector<std::uint64_t> query(const std::filesystem::path& pool, const PoolFilter& filter = {}) {
  std::vector<std::uint64_t> out;
  for (const auto& e : load_index(pool).entries) {
    if (filter.arch_id && e.arch_id != *filter.arch_id) continue;
    if (filter.task_size && e.task_size != *filter.task_size) continue;
    if (filter.pruning_ratio && std::abs(e.pruning_ratio - *filter.pruning_ratio) > 1e-6F) continue;
    out.push_back(e.record_id);
  }
  return out;
}

inline std::vector<PrunedRecord> load_records(const std::filesystem::path& pool, const PoolFilter& filter = {}) {
  std::vector<PrunedRecord> out;
  for (auto id : query(pool, filter)) out.push_back(load_record(pool, id));
  return out;
}

}  // namespace smsp
