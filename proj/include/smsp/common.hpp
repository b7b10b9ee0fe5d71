// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace smsp {

/// Error categories. The CLI prints these as the `code=` field of its
/// machine-readable error line.
enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  non_finite,
  out_of_range,
  graph_consumed,
  infeasible,
  io_failure,
  bad_format,
  checksum_mismatch,
  not_found,
  arch_mismatch,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::graph_consumed: return "graph_consumed";
    case ErrorCode::infeasible: return "infeasible";
    case ErrorCode::io_failure: return "io_failure";
    case ErrorCode::bad_format: return "bad_format";
    case ErrorCode::checksum_mismatch: return "checksum_mismatch";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::arch_mismatch: return "arch_mismatch";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

/// 64-bit FNV-1a, used for record checksums and config hashes.
class Fnv1a {
 public:
  void update(std::span<const std::uint8_t> bytes) {
    for (auto b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view text) {
    update(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

inline std::uint64_t fnv1a(std::string_view text) {
  Fnv1a h;
  h.update(text);
  return h.digest();
}

/// Derives an independent child seed from a parent seed and a stream tag
/// (splitmix64 finalizer over the combination).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  return derive_seed(seed, fnv1a(stream));
}

}  // namespace smsp
