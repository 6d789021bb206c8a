#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "farann/common.hpp"
#include "farann/fabric.hpp"
#include "farann/hnsw.hpp"
#include "farann/insert_engine.hpp"
#include "farann/layout.hpp"
#include "farann/partitioner.hpp"
#include "farann/query_engine.hpp"
#include "farann/vectors.hpp"

namespace farann {

enum class EpochPhase : u8 { Steady = 0, Rebuilding = 1, Switching = 2 };

inline const char* phase_name(EpochPhase p) {
  switch (p) {
    case EpochPhase::Steady: return "steady";
    case EpochPhase::Rebuilding: return "rebuilding";
    case EpochPhase::Switching: return "switching";
  }
  return "unknown";
}

struct BufferedItem {
  u64 label = 0;
  std::vector<float> vec;
};

// ---------------------------------------------------------------------------
// Side buffer for inserts that arrive while a rebuild is in flight. Items are
// kept in arrival order (the drain consumes them by watermark) and hashed
// into sign-projection buckets so searches can probe them cheaply instead of
// scanning the whole buffer.

class LshBuffer {
 public:
  LshBuffer(u32 dim, Metric metric, u32 hash_bits = 6, u64 seed = 0x6873616266756c6cull)
      : dim_(dim), metric_(metric), bits_(std::min<u32>(hash_bits, 20)) {
    require(dim_ > 0, "LshBuffer: dim must be positive");
    require(bits_ >= 1, "LshBuffer: need at least one hash bit");
    auto rng = make_rng(seed, 0x706c616e65);
    std::normal_distribution<double> gauss(0.0, 1.0);
    planes_.resize(std::size_t(bits_) * dim_);
    for (float& x : planes_) x = float(gauss(rng));
  }

  u32 dim() const { return dim_; }
  Metric metric() const { return metric_; }
  u32 bits() const { return bits_; }
  std::size_t size() const { return log_.size(); }
  const BufferedItem& item(std::size_t i) const { return log_[i]; }

  u32 key_of(std::span<const float> v) const {
    require(v.size() == dim_, "LshBuffer: dimension mismatch");
    u32 key = 0;
    for (u32 b = 0; b < bits_; ++b) {
      const float* plane = planes_.data() + std::size_t(b) * dim_;
      double dot = 0.0;
      for (u32 j = 0; j < dim_; ++j) dot += double(plane[j]) * double(v[j]);
      if (dot >= 0) key |= (1u << b);
    }
    return key;
  }

  void insert(u64 label, std::span<const float> v) {
    require(v.size() == dim_, "LshBuffer: dimension mismatch");
    std::size_t idx = log_.size();
    log_.push_back({label, std::vector<float>(v.begin(), v.end())});
    buckets_[key_of(log_.back().vec)].push_back(idx);
  }

  // Multi-probe lookup: the home bucket, plus every bucket within `radius`
  // bit flips of it. Hits carry (distance, label) with the usual tie order.
  std::vector<Hit> probe(std::span<const float> q, std::size_t k, u32 radius = 1) const {
    require(radius <= 2, "LshBuffer: probe radius above 2 defeats the bucketing");
    if (log_.empty() || k == 0) return {};
    u32 home = key_of(q);
    std::vector<u32> keys{home};
    if (radius >= 1)
      for (u32 b = 0; b < bits_; ++b) keys.push_back(home ^ (1u << b));
    if (radius >= 2)
      for (u32 a = 0; a < bits_; ++a)
        for (u32 b = a + 1; b < bits_; ++b) keys.push_back(home ^ (1u << a) ^ (1u << b));

    std::vector<Hit> hits;
    for (u32 key : keys) {
      auto it = buckets_.find(key);
      if (it == buckets_.end()) continue;
      for (std::size_t idx : it->second) {
        const BufferedItem& bi = log_[idx];
        hits.push_back({distance(bi.vec, q, metric_), bi.label});
      }
    }
    std::sort(hits.begin(), hits.end());
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

  std::vector<BufferedItem> copy_range(std::size_t lo, std::size_t hi) const {
    require(lo <= hi && hi <= log_.size(), "LshBuffer: bad copy range");
    return {log_.begin() + lo, log_.begin() + hi};
  }

 private:
  u32 dim_ = 0;
  Metric metric_ = Metric::L2;
  u32 bits_ = 6;
  std::vector<float> planes_;  // bits_ x dim_ hyperplane normals
  std::vector<BufferedItem> log_;
  std::unordered_map<u32, std::vector<std::size_t>> buckets_;
};

// ---------------------------------------------------------------------------
// Epoch lifecycle. One manager owns the layout-writer authority for the live
// epoch and shepherds the steady -> rebuilding -> switching -> steady cycle:
//
//   steady      normal serving; inserts go through the coordinator
//   rebuilding  a shadow copy is being re-partitioned; inserts divert into
//               the side buffer, searches merge buffer probes on top
//   switching   the new epoch is published; workers adopt it one by one and
//               the old region is released after the last acknowledgement
//
// Searches are never blocked in any phase, and a buffered insert either lands
// in the new epoch during the drain or comes back from take_leftovers().

struct RebuildParams {
  PartitionParams partition{.partitions = 0};  // 0 keeps the current P
  HnswParams graph;
  GapPolicy gaps;
  u32 e_meta = 64;
  u64 meta_seed = 5;
  std::size_t drain_cache_capacity = 0;  // 0 derives max(1, P/10)
};

struct RebuildReport {
  u32 new_epoch = 0;
  u32 partitions = 0;
  u64 union_vectors = 0;  // old epoch contents + buffer watermark
  u64 drained = 0;        // buffered inserts folded in before publication
  u32 drain_rounds = 0;
  u64 spilled = 0;  // drain commits that found no room; recoverable via take_leftovers
};

struct EpochSnapshot {
  u32 epoch_id = 0;
  RegionHandle region;
  GlobalMeta meta;
  std::shared_ptr<const MetaIndex> meta_index;
};

class EpochManager {
 public:
  using SwitchCallback = std::function<void(const EpochSnapshot&)>;

  EpochManager(MemoryFabric& fabric, LayoutWriter writer, MetaIndex meta_index, u32 hash_bits = 6,
               u64 lsh_seed = 0x6275666665726564ull)
      : fabric_(&fabric), hash_bits_(hash_bits), lsh_seed_(lsh_seed) {
    writer_ = std::make_unique<LayoutWriter>(std::move(writer));
    current_.epoch_id = writer_->meta().epoch;
    current_.region = writer_->region();
    current_.meta = writer_->meta();
    current_.meta_index = std::make_shared<MetaIndex>(std::move(meta_index));
  }

  EpochPhase phase() const {
    std::lock_guard lock(mu_);
    return phase_;
  }

  EpochSnapshot current() const {
    std::lock_guard lock(mu_);
    return current_;
  }

  // The live epoch's single writer. Invalidated by a successful rebuild;
  // coordinators must be rebuilt against the new epoch after the switch.
  LayoutWriter& writer() { return *writer_; }

  std::size_t buffer_size() const {
    std::lock_guard lock(mu_);
    return buffer_ ? buffer_->size() : 0;
  }

  // Workers register the action that moves them onto a published epoch
  // (typically QueryEngine::adopt_epoch plus a cache clear).
  u32 register_worker(SwitchCallback on_switch) {
    std::lock_guard lock(mu_);
    require(phase_ == EpochPhase::Steady, "register_worker: only while steady");
    workers_.push_back(std::move(on_switch));
    acked_.push_back(false);
    return u32(workers_.size() - 1);
  }

  // Arms the rebuild when capacity is actually exhausted: either an insert
  // was just rejected for lack of room, or some group's overflow arena is
  // byte-exact full. Returns whether the phase flipped to rebuilding.
  bool maybe_trigger(const GlobalMeta& meta, bool insert_rejected = false) {
    std::lock_guard lock(mu_);
    if (phase_ != EpochPhase::Steady) return false;
    bool full = insert_rejected;
    for (const GroupExtent& g : meta.groups)
      if (g.used_forward + g.used_backward >= g.overflow_len) full = true;
    if (!full) return false;
    phase_ = EpochPhase::Rebuilding;
    const HnswIndex& graph = current_.meta_index->graph;
    buffer_.emplace(graph.dim(), graph.metric(), hash_bits_, lsh_seed_);
    return true;
  }

  // Inserts arriving mid-rebuild divert here. Pre: not steady.
  void buffer_insert(u64 label, std::span<const float> v) {
    std::lock_guard lock(mu_);
    require(phase_ != EpochPhase::Steady, "buffer_insert: no rebuild in flight");
    buffer_->insert(label, v);
  }

  // Merges a worker's per-epoch results with a probe of the side buffer so
  // queries issued mid-rebuild still see buffered inserts. Pre: not steady.
  std::vector<Hit> search_during_rebuild(std::span<const float> q,
                                         std::span<const Hit> engine_hits, std::size_t k) const {
    std::lock_guard lock(mu_);
    require(phase_ != EpochPhase::Steady, "search_during_rebuild: no rebuild in flight");
    std::vector<std::vector<Hit>> parts;
    parts.emplace_back(engine_hits.begin(), engine_hits.end());
    parts.push_back(buffer_->probe(q, k, 1));
    return merge_topk(parts, k);
  }

  // The rebuild itself. Runs on the caller's thread (tests drive it from a
  // background thread while serving continues): gathers every vector of the
  // old epoch plus the buffered items up to a watermark, re-partitions the
  // union, lays the new epoch into a fresh region, then loops draining any
  // inserts that raced in. Publishes (phase -> switching) only once the
  // buffer is momentarily quiescent. Pre: rebuilding.
  RebuildReport run_rebuild(const RebuildParams& params) {
    EpochSnapshot old;
    std::size_t watermark = 0;
    {
      std::lock_guard lock(mu_);
      require(phase_ == EpochPhase::Rebuilding, "run_rebuild: phase must be rebuilding");
      old = current_;
      // current_.meta dates from the last publish; commits since then grew
      // headers and overflow extents. The writer is quiescent once the phase
      // left steady, so its committed meta is the authoritative gather view.
      old.meta = writer_->meta();
      watermark = buffer_->size();
    }

    const HnswIndex& old_graph = old.meta_index->graph;
    VectorStore all(old_graph.dim(), old_graph.metric());
    std::vector<u64> labels;
    for (u32 sub = 0; sub < old.meta.partition_count; ++sub) {
      FetchedSub fetched = fetch_sub(*fabric_, old.region, old.meta, sub);
      SplicedImage img = splice(fetched.base, fetched.overflow, old.meta, sub);
      HnswView view = HnswView::open(img.bytes);
      for (std::size_t i = 0; i < view.node_count(); ++i) {
        all.append(view.vector_of(u32(i)));
        labels.push_back(view.label_of(u32(i)));
      }
    }
    {
      std::lock_guard lock(mu_);
      for (std::size_t i = 0; i < watermark; ++i) {
        const BufferedItem& bi = buffer_->item(i);
        all.append(bi.vec);
        labels.push_back(bi.label);
      }
    }

    RebuildReport report;
    report.union_vectors = all.count();
    report.drained = watermark;

    PartitionParams pp = params.partition;
    if (pp.partitions == 0) pp.partitions = old.meta.partition_count;
    require(all.count() >= pp.partitions, "run_rebuild: fewer vectors than partitions");
    PartitionResult part = partition(all, pp);
    report.partitions = pp.partitions;

    std::vector<std::vector<std::byte>> images(pp.partitions);
    for (u32 p = 0; p < pp.partitions; ++p) {
      VectorStore members(all.dim, all.metric);
      std::vector<u64> member_labels;
      for (std::size_t i = 0; i < all.count(); ++i) {
        if (part.assignment[i] != p) continue;
        members.append(all.row(i));
        member_labels.push_back(labels[i]);
      }
      HnswParams gp = params.graph;
      gp.rng_seed = mix_seed(params.graph.rng_seed, p);
      images[p] = HnswIndex::build(std::move(members), gp, member_labels).serialize(params.gaps);
    }

    MetaIndex new_meta_index = build_meta_index(part.centroids, params.e_meta, params.meta_seed);
    u32 new_epoch = old.epoch_id + 1;
    auto new_writer =
        std::make_unique<LayoutWriter>(LayoutWriter::build(*fabric_, images, params.gaps, new_epoch));

    // Drain anything buffered after the watermark, then publish during a
    // quiescent moment. Items that still cannot land are kept aside.
    InsertCoordinator drainer(*new_writer, &new_meta_index, params.graph,
                              params.drain_cache_capacity > 0
                                  ? params.drain_cache_capacity
                                  : std::max<std::size_t>(1, pp.partitions / 10),
                              /*first_label=*/0);
    std::size_t drained = watermark;
    while (true) {
      std::vector<BufferedItem> delta;
      {
        std::lock_guard lock(mu_);
        if (buffer_->size() == drained) {
          prev_ = current_;
          current_.epoch_id = new_epoch;
          current_.region = new_writer->region();
          current_.meta = new_writer->meta();
          current_.meta_index = std::make_shared<MetaIndex>(std::move(new_meta_index));
          writer_ = std::move(new_writer);
          drained_ = drained;
          std::fill(acked_.begin(), acked_.end(), false);
          phase_ = EpochPhase::Switching;
          break;
        }
        delta = buffer_->copy_range(drained, buffer_->size());
        drained += delta.size();
      }
      ++report.drain_rounds;
      VectorStore vecs(all.dim, all.metric);
      std::vector<u64> delta_labels;
      for (const BufferedItem& bi : delta) {
        vecs.append(bi.vec);
        delta_labels.push_back(bi.label);
      }
      auto status = drainer.insert_labeled(vecs, delta_labels);
      for (std::size_t i = 0; i < status.size(); ++i) {
        if (status[i] == InsertStatus::Committed) continue;
        ++report.spilled;
        std::lock_guard lock(mu_);
        spill_.push_back(delta[i]);
      }
      report.drained += delta.size();
    }

    report.new_epoch = new_epoch;
    report.drained -= report.spilled;
    return report;
  }

  // One worker acknowledges the published epoch; its switch callback runs
  // exactly once. After the last acknowledgement the old region is released
  // and the manager returns to steady. Returns false on a duplicate ack.
  bool acknowledge_epoch(u32 worker) {
    EpochSnapshot snap;
    SwitchCallback* cb = nullptr;
    {
      std::lock_guard lock(mu_);
      require(phase_ == EpochPhase::Switching, "acknowledge_epoch: nothing published");
      require(worker < workers_.size(), "acknowledge_epoch: unknown worker");
      if (acked_[worker]) return false;
      acked_[worker] = true;
      snap = current_;
      cb = &workers_[worker];
    }
    if (*cb) (*cb)(snap);
    {
      std::lock_guard lock(mu_);
      if (std::all_of(acked_.begin(), acked_.end(), [](bool b) { return b; })) {
        if (prev_.region.valid()) fabric_->release_region(prev_.region);
        prev_ = EpochSnapshot{};
        phase_ = EpochPhase::Steady;
      }
    }
    return true;
  }

  // Items buffered after publication (plus any drain spills) were never laid
  // into the new epoch; the caller replays them through the coordinator.
  // Pre: steady, i.e. the switch has fully completed.
  std::vector<BufferedItem> take_leftovers() {
    std::lock_guard lock(mu_);
    require(phase_ == EpochPhase::Steady, "take_leftovers: switch not complete");
    std::vector<BufferedItem> out = std::move(spill_);
    if (buffer_) {
      auto tail = buffer_->copy_range(drained_, buffer_->size());
      out.insert(out.end(), tail.begin(), tail.end());
      buffer_.reset();
    }
    spill_.clear();
    drained_ = 0;
    return out;
  }

 private:
  MemoryFabric* fabric_;
  u32 hash_bits_;
  u64 lsh_seed_;
  mutable std::mutex mu_;
  EpochPhase phase_ = EpochPhase::Steady;
  EpochSnapshot current_;
  EpochSnapshot prev_;
  std::unique_ptr<LayoutWriter> writer_;
  std::optional<LshBuffer> buffer_;
  std::size_t drained_ = 0;
  std::vector<BufferedItem> spill_;
  std::vector<SwitchCallback> workers_;
  std::vector<bool> acked_;
};

}  // namespace farann
