#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace farann {

using u8 = std::uint8_t;
using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i64 = std::int64_t;

// Thrown when a caller violates a documented precondition (bad dimension,
// out-of-range id, capacity exceeded, ...).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Thrown when serialized bytes fail validation. `offset` is the byte position
// of the first inconsistent field, when known.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what, u64 offset = 0)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  u64 offset() const { return offset_; }

 private:
  u64 offset_;
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Remote-memory failures (unknown region, out-of-bounds access, injected
// faults). A failed batch applies nothing.
class FabricError : public std::runtime_error {
 public:
  explicit FabricError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const char* msg) {
  if (!cond) throw ContractError(msg);
}

// ---------------------------------------------------------------------------
// Little-endian scalar encoding. All on-the-wire and in-region integers use
// these helpers so images are byte-identical across hosts.

inline void store_u32(std::byte* dst, u32 v) {
  for (int i = 0; i < 4; ++i) dst[i] = std::byte((v >> (8 * i)) & 0xff);
}

inline void store_u64(std::byte* dst, u64 v) {
  for (int i = 0; i < 8; ++i) dst[i] = std::byte((v >> (8 * i)) & 0xff);
}

inline u32 load_u32(const std::byte* src) {
  u32 v = 0;
  for (int i = 0; i < 4; ++i) v |= u32(std::to_integer<u8>(src[i])) << (8 * i);
  return v;
}

inline u64 load_u64(const std::byte* src) {
  u64 v = 0;
  for (int i = 0; i < 8; ++i) v |= u64(std::to_integer<u8>(src[i])) << (8 * i);
  return v;
}

inline void store_f32(std::byte* dst, float v) {
  u32 bits;
  std::memcpy(&bits, &v, 4);
  store_u32(dst, bits);
}

inline float load_f32(const std::byte* src) {
  u32 bits = load_u32(src);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

// Append helpers for growing byte buffers.
inline void append_u32(std::vector<std::byte>& buf, u32 v) {
  buf.resize(buf.size() + 4);
  store_u32(buf.data() + buf.size() - 4, v);
}

inline void append_u64(std::vector<std::byte>& buf, u64 v) {
  buf.resize(buf.size() + 8);
  store_u64(buf.data() + buf.size() - 8, v);
}

inline void append_bytes(std::vector<std::byte>& buf, std::span<const std::byte> src) {
  buf.insert(buf.end(), src.begin(), src.end());
}

inline u64 round_up(u64 v, u64 align) { return (v + align - 1) / align * align; }

// ---------------------------------------------------------------------------
// Deterministic seeding. Distinct streams are derived from a base seed and a
// stream index so parallel builders never share generator state.

inline u64 mix_seed(u64 base, u64 stream) {
  // splitmix64 finalizer over the combined value
  u64 z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(u64 base, u64 stream = 0) {
  return std::mt19937_64(mix_seed(base, stream));
}

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, one per
// worker. Exceptions from workers are rethrown on the calling thread.
inline void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    std::size_t lo = w * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, w, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errs[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace farann
