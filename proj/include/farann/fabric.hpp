#pragma once

#include <mutex>
#include <unordered_map>
#include <vector>

#include "farann/common.hpp"

namespace farann {

// Latency/bandwidth model for the simulated interconnect. Charged, not slept:
// every operation adds its closed-form cost to the stats so tests can assert
// exact totals. Defaults approximate a 100 Gb/s RDMA fabric.
struct FabricCostModel {
  double rtt = 5e-6;              // seconds per round trip
  double bandwidth = 12.5e9;      // bytes per second (100 Gb/s)
  double per_op_overhead = 2e-7;  // seconds per posted work element in a batch

  void validate() const {
    require(rtt >= 0 && bandwidth > 0 && per_op_overhead >= 0,
            "FabricCostModel: rtt/per_op must be >= 0 and bandwidth > 0");
  }
};

inline double single_op_cost(const FabricCostModel& m, u64 len) {
  return m.rtt + double(len) / m.bandwidth;
}

inline double doorbell_cost(const FabricCostModel& m, std::size_t n_ops, u64 total_len) {
  return m.rtt + double(total_len) / m.bandwidth + double(n_ops) * m.per_op_overhead;
}

struct RegionHandle {
  u32 id = 0;
  u64 size = 0;
  bool valid() const { return id != 0; }
};

struct FabricStats {
  u64 reads = 0;
  u64 writes = 0;
  u64 doorbell_batches = 0;
  u64 bytes_moved = 0;
  double simulated_time_charged = 0.0;
};

// One posted work element inside a doorbell batch. Writes carry their payload;
// reads return data in the batch result at their list position.
struct FabricOp {
  enum class Kind : u8 { Read = 0, Write = 1 };
  Kind kind = Kind::Read;
  RegionHandle region;
  u64 offset = 0;
  u64 len = 0;                          // read length; for writes, payload.size() is used
  std::vector<std::byte> payload;       // writes only

  static FabricOp read(RegionHandle r, u64 offset, u64 len) { return {Kind::Read, r, offset, len, {}}; }
  static FabricOp write(RegionHandle r, u64 offset, std::vector<std::byte> bytes) {
    FabricOp op{Kind::Write, r, offset, 0, std::move(bytes)};
    op.len = op.payload.size();
    return op;
  }
};

struct TraceEntry {
  FabricOp::Kind kind;
  u32 region = 0;
  u64 offset = 0;
  u64 len = 0;
  u64 batch = 0;  // issue id: one per read/write call or per doorbell batch
};

// Host-memory stand-in for one-sided remote memory. Registered regions are
// plain byte buffers; read/write/doorbell mutate them under a single lock, so
// each issuer sees its own operations in order and batches apply atomically
// (bounds are validated for the whole batch before any byte moves).
class MemoryFabric {
 public:
  explicit MemoryFabric(FabricCostModel model = {}, u32 max_batch = 16)
      : model_(model), max_batch_(max_batch) {
    model_.validate();
    require(max_batch_ >= 1, "MemoryFabric: max_batch must be at least 1");
  }

  RegionHandle register_region(u64 size) {
    require(size > 0, "register_region: size must be positive");
    std::lock_guard lock(mu_);
    u32 id = next_region_++;
    regions_[id].assign(size, std::byte{0});
    return {id, size};
  }

  void release_region(RegionHandle h) {
    std::lock_guard lock(mu_);
    if (regions_.erase(h.id) == 0) throw FabricError("release_region: unknown region");
  }

  std::vector<std::byte> read(RegionHandle h, u64 offset, u64 len) {
    std::lock_guard lock(mu_);
    maybe_fail();
    auto& mem = region_ref(h, offset, len);
    ++stats_.reads;
    stats_.bytes_moved += len;
    stats_.simulated_time_charged += single_op_cost(model_, len);
    trace_op(FabricOp::Kind::Read, h.id, offset, len, ++issue_seq_);
    return {mem.begin() + offset, mem.begin() + offset + len};
  }

  void write(RegionHandle h, u64 offset, std::span<const std::byte> data) {
    std::lock_guard lock(mu_);
    maybe_fail();
    auto& mem = region_ref(h, offset, data.size());
    ++stats_.writes;
    stats_.bytes_moved += data.size();
    stats_.simulated_time_charged += single_op_cost(model_, data.size());
    trace_op(FabricOp::Kind::Write, h.id, offset, data.size(), ++issue_seq_);
    std::copy(data.begin(), data.end(), mem.begin() + offset);
  }

  // One round trip for the whole batch. Operations apply in list order, so a
  // read placed after a write in the same batch observes it. Any invalid
  // descriptor (or injected fault) fails the batch before any byte moves.
  std::vector<std::vector<std::byte>> doorbell(std::span<const FabricOp> ops) {
    require(!ops.empty(), "doorbell: batch must hold at least one op");
    require(ops.size() <= max_batch_, "doorbell: batch exceeds max_batch");
    std::lock_guard lock(mu_);
    maybe_fail();
    u64 total = 0;
    for (const auto& op : ops) {
      region_ref(op.region, op.offset, op.len);  // bounds check only
      total += op.len;
    }
    ++stats_.doorbell_batches;
    stats_.bytes_moved += total;
    stats_.simulated_time_charged += doorbell_cost(model_, ops.size(), total);
    u64 seq = ++issue_seq_;
    std::vector<std::vector<std::byte>> results;
    for (const auto& op : ops) {
      auto& mem = regions_.at(op.region.id);
      trace_op(op.kind, op.region.id, op.offset, op.len, seq);
      if (op.kind == FabricOp::Kind::Read) {
        ++stats_.reads;
        results.emplace_back(mem.begin() + op.offset, mem.begin() + op.offset + op.len);
      } else {
        ++stats_.writes;
        std::copy(op.payload.begin(), op.payload.end(), mem.begin() + op.offset);
      }
    }
    return results;
  }

  u32 max_batch() const { return max_batch_; }
  const FabricCostModel& model() const { return model_; }

  FabricStats stats() const {
    std::lock_guard lock(mu_);
    return stats_;
  }

  // Operation trace for audits (fetch-once checks, range attribution).
  void set_trace_enabled(bool on) {
    std::lock_guard lock(mu_);
    trace_enabled_ = on;
  }
  std::vector<TraceEntry> trace() const {
    std::lock_guard lock(mu_);
    return trace_;
  }
  void clear_trace() {
    std::lock_guard lock(mu_);
    trace_.clear();
  }

  // Fault injection: the next n operations (read/write/doorbell issues) throw
  // before touching memory.
  void fail_next(u32 n) {
    std::lock_guard lock(mu_);
    fail_next_ = n;
  }

 private:
  std::vector<std::byte>& region_ref(RegionHandle h, u64 offset, u64 len) {
    auto it = regions_.find(h.id);
    if (it == regions_.end()) throw FabricError("unknown region " + std::to_string(h.id));
    if (offset + len > it->second.size() || offset + len < offset)
      throw FabricError("out-of-bounds access: offset " + std::to_string(offset) + " len " +
                        std::to_string(len) + " region size " + std::to_string(it->second.size()));
    return it->second;
  }

  void maybe_fail() {
    if (fail_next_ > 0) {
      --fail_next_;
      throw FabricError("injected fault");
    }
  }

  void trace_op(FabricOp::Kind kind, u32 region, u64 offset, u64 len, u64 seq) {
    if (trace_enabled_) trace_.push_back({kind, region, offset, len, seq});
  }

  mutable std::mutex mu_;
  FabricCostModel model_;
  u32 max_batch_;
  u32 next_region_ = 1;
  u64 issue_seq_ = 0;
  u32 fail_next_ = 0;
  bool trace_enabled_ = true;
  std::vector<TraceEntry> trace_;
  std::unordered_map<u32, std::vector<std::byte>> regions_;
  FabricStats stats_;
};

// Splits a long op list into max_batch-sized doorbells, preserving order.
// Returns read results flattened in op order.
inline std::vector<std::vector<std::byte>> doorbell_chunked(MemoryFabric& fabric,
                                                            std::span<const FabricOp> ops) {
  std::vector<std::vector<std::byte>> results;
  for (std::size_t at = 0; at < ops.size(); at += fabric.max_batch()) {
    std::size_t take = std::min<std::size_t>(fabric.max_batch(), ops.size() - at);
    auto part = fabric.doorbell(ops.subspan(at, take));
    for (auto& r : part) results.push_back(std::move(r));
  }
  return results;
}

inline u64 chunked_round_trips(std::size_t n_ops, u32 max_batch) {
  return (n_ops + max_batch - 1) / max_batch;
}

}  // namespace farann
