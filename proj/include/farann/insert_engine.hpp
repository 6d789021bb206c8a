#pragma once

#include <map>
#include <numeric>
#include <optional>

#include "farann/query_engine.hpp"

namespace farann {

enum class InsertStatus : u8 {
  Committed = 0,
  RebuildRequired = 1,  // no room left; vector not persisted, rebuild needed
  Failed = 2,           // fabric failure after retry; local state rolled back
};

struct WriteOp {
  u64 remote_offset = 0;
  std::vector<std::byte> bytes;
};

// The diff between the remotely committed state of one sub and the writer's
// updated local copy, expressed as ranges a single doorbell commit can apply.
struct UpdateCommit {
  u32 sub_id = 0;
  std::vector<WriteOp> appends;     // array growth plus overflow chunk markers
  std::vector<WriteOp> overwrites;  // dirty neighbor ranges, then header fields
  WriteOp meta_slot;                // inactive meta copy
  WriteOp generation;               // the flip word; must stay last
  bool empty() const { return appends.empty() && overwrites.empty(); }
  std::size_t op_count() const { return empty() ? 0 : appends.size() + overwrites.size() + 2; }
};

// Committed-state snapshot used for diffing. Only the neighbor array mutates
// in place; everything else is append-only or lives in the header.
struct SubSnapshot {
  SubImageHeader header;
  std::vector<u32> neighbor_words;
};

inline SubSnapshot take_snapshot(const HnswIndex& idx) {
  return {idx.logical_header(), idx.neighbor_words()};
}

namespace detail {

inline u32 array_elem_bytes(ArrayKind kind) {
  switch (kind) {
    case ArrayKind::Levels:
    case ArrayKind::Neighbors:
    case ArrayKind::Vectors:
      return 4;
    case ArrayKind::Offsets:
    case ArrayKind::Labels:
      return 8;
  }
  return 4;
}

// Serializes a logical byte range of one array from the in-memory index.
inline std::vector<std::byte> array_bytes(const HnswIndex& idx, ArrayKind kind, u64 lo, u64 len) {
  u32 elem = array_elem_bytes(kind);
  u64 first = lo / elem;
  u64 last = (lo + len + elem - 1) / elem;
  std::vector<std::byte> buf((last - first) * elem);
  std::byte* at = buf.data();
  switch (kind) {
    case ArrayKind::Levels:
      for (u64 i = first; i < last; ++i, at += 4) store_u32(at, idx.levels()[i]);
      break;
    case ArrayKind::Offsets:
      for (u64 i = first; i < last; ++i, at += 8) store_u64(at, idx.offsets()[i]);
      break;
    case ArrayKind::Neighbors:
      for (u64 i = first; i < last; ++i, at += 4) store_u32(at, idx.neighbor_words()[i]);
      break;
    case ArrayKind::Vectors:
      for (u64 i = first; i < last; ++i, at += 4) store_f32(at, idx.vectors().data[i]);
      break;
    case ArrayKind::Labels:
      for (u64 i = first; i < last; ++i, at += 8) store_u64(at, idx.labels()[i]);
      break;
  }
  u64 skip = lo - first * elem;
  return {buf.begin() + skip, buf.begin() + skip + len};
}

// Word-granular diff of the neighbor array over the committed prefix, with
// nearby ranges fused so one work element covers them.
inline std::vector<std::pair<u64, u64>> dirty_byte_ranges(std::span<const u32> pre,
                                                          std::span<const u32> post,
                                                          u64 coalesce_gap_bytes) {
  std::vector<std::pair<u64, u64>> out;  // (byte offset, byte len)
  std::size_t n = std::min(pre.size(), post.size());
  std::size_t i = 0;
  while (i < n) {
    if (pre[i] == post[i]) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < n && pre[j] != post[j]) ++j;
    u64 lo = 4 * u64(i), hi = 4 * u64(j);
    if (!out.empty() && lo - (out.back().first + out.back().second) < coalesce_gap_bytes)
      out.back().second = hi - out.back().first;
    else
      out.emplace_back(lo, hi - lo);
    i = j;
  }
  return out;
}

}  // namespace detail

inline constexpr u64 kDirtyCoalesceGapBytes = 64;

// Builds the commit for one sub: changed header fields, dirty neighbor
// ranges, and array tails placed by the layout. nullopt means the layout has
// no room (RebuildRequired); in that case nothing was allocated.
inline std::optional<UpdateCommit> prepare_commit(LayoutWriter& writer, u32 sub,
                                                  const SubSnapshot& pre, const HnswIndex& post) {
  SubImageHeader post_h = post.logical_header();
  const SubImageHeader& pre_h = pre.header;

  std::vector<std::pair<ArrayKind, u64>> deltas;
  for (int k = 0; k < kArrayKinds; ++k) {
    require(post_h.size[k] >= pre_h.size[k], "prepare_commit: array shrank");
    if (post_h.size[k] > pre_h.size[k])
      deltas.emplace_back(ArrayKind(k), post_h.size[k] - pre_h.size[k]);
  }

  UpdateCommit uc;
  uc.sub_id = sub;

  auto plans = writer.try_alloc(sub, deltas);
  if (!plans) return std::nullopt;
  for (const AppendPlan& plan : *plans) {
    for (const auto& [marker_remote, marker] : plan.markers)
      uc.appends.push_back({marker_remote, {marker.begin(), marker.end()}});
    for (const Segment& seg : plan.segments)
      uc.appends.push_back(
          {seg.remote_offset, detail::array_bytes(post, plan.kind, seg.logical_offset, seg.len)});
  }

  u64 pre_words = pre_h.size[int(ArrayKind::Neighbors)] / 4;
  auto dirty = detail::dirty_byte_ranges(
      std::span<const u32>(pre.neighbor_words.data(), pre_words),
      std::span<const u32>(post.neighbor_words().data(), pre_words), kDirtyCoalesceGapBytes);
  for (auto [lo, len] : dirty) {
    for (const Segment& seg : writer.map_logical(sub, ArrayKind::Neighbors, lo, len))
      uc.overwrites.push_back({seg.remote_offset,
                               detail::array_bytes(post, ArrayKind::Neighbors, seg.logical_offset,
                                                   seg.len)});
  }

  u64 hdr_base = writer.header_remote(sub);
  auto field_u64 = [&](u64 field_off, u64 value) {
    std::vector<std::byte> b(8);
    store_u64(b.data(), value);
    uc.overwrites.push_back({hdr_base + field_off, std::move(b)});
  };
  auto field_u32 = [&](u64 field_off, u32 value) {
    std::vector<std::byte> b(4);
    store_u32(b.data(), value);
    uc.overwrites.push_back({hdr_base + field_off, std::move(b)});
  };
  if (post_h.ntotal != pre_h.ntotal) field_u64(hdr::kNtotal, post_h.ntotal);
  if (post_h.entry_point != pre_h.entry_point) field_u64(hdr::kEntryPoint, post_h.entry_point);
  if (post_h.max_level != pre_h.max_level) field_u32(hdr::kMaxLevel, post_h.max_level);
  for (int k = 0; k < kArrayKinds; ++k)
    if (post_h.size[k] != pre_h.size[k]) field_u64(hdr::size_field(ArrayKind(k)), post_h.size[k]);

  if (uc.empty()) return uc;  // nothing changed; no meta traffic either

  auto [slot_op, gen_op] = writer.meta_commit_ops();
  uc.meta_slot = {slot_op.offset, std::move(slot_op.payload)};
  uc.generation = {gen_op.offset, std::move(gen_op.payload)};
  return uc;
}

// Issues the commit as doorbell batches (chunked at the fabric's max_batch),
// appends first, then overwrites, then the meta copy, with the generation
// flip as the very last element. Each chunk retries once on failure. Returns
// the number of round trips.
inline u64 commit_update(MemoryFabric& fabric, RegionHandle region, const UpdateCommit& uc) {
  if (uc.empty()) return 0;
  std::vector<FabricOp> ops;
  ops.reserve(uc.op_count());
  auto add = [&](const WriteOp& w) { ops.push_back(FabricOp::write(region, w.remote_offset, w.bytes)); };
  for (const WriteOp& w : uc.appends) add(w);
  for (const WriteOp& w : uc.overwrites) add(w);
  add(uc.meta_slot);
  add(uc.generation);

  u64 rounds = 0;
  for (std::size_t at = 0; at < ops.size(); at += fabric.max_batch()) {
    std::size_t take = std::min<std::size_t>(fabric.max_batch(), ops.size() - at);
    auto chunk = std::span<const FabricOp>(ops).subspan(at, take);
    try {
      fabric.doorbell(chunk);
    } catch (const FabricError&) {
      fabric.doorbell(chunk);  // one retry; a second failure surfaces
    }
    ++rounds;
  }
  return rounds;
}

// ---------------------------------------------------------------------------
// The insert coordinator: the single writer for one epoch. Routes each vector
// to its nearest partition, updates a locally cached copy of that sub, and
// commits the diff. Labels are assigned from a dense counter in batch order.

class InsertCoordinator {
 public:
  InsertCoordinator(LayoutWriter& writer, const MetaIndex* meta, HnswParams build_params,
                    std::size_t cache_capacity, u64 first_label)
      : writer_(&writer),
        meta_(meta),
        params_(build_params),
        cache_(cache_capacity),
        next_label_(first_label) {}

  SubCache& cache() { return cache_; }
  u64 next_label() const { return next_label_; }
  bool rebuild_needed() const { return rebuild_needed_; }
  void clear_rebuild_flag() { rebuild_needed_ = false; }
  LayoutWriter& writer() { return *writer_; }

  std::vector<InsertStatus> insert_batch(const VectorStore& vecs) {
    std::vector<u64> labels(vecs.count());
    std::iota(labels.begin(), labels.end(), next_label_);
    next_label_ += vecs.count();  // burned even if a commit fails; ids stay unique
    return insert_labeled(vecs, labels);
  }

  // Same commit path with caller-chosen labels. Used when replaying buffered
  // inserts into a rebuilt epoch, where labels were assigned at buffer time.
  std::vector<InsertStatus> insert_labeled(const VectorStore& vecs, std::span<const u64> labels) {
    require(labels.size() == vecs.count(), "insert_labeled: one label per vector");
    std::vector<InsertStatus> status(vecs.count(), InsertStatus::Committed);
    if (vecs.count() == 0) return status;

    std::map<u32, std::vector<std::size_t>> by_sub;  // ordered: deterministic commit order
    for (std::size_t i = 0; i < vecs.count(); ++i) {
      auto targets = route(*meta_, vecs.row(i), 1);
      by_sub[targets.front()].push_back(i);
    }

    for (auto& [sub, members] : by_sub) {
      std::shared_ptr<SubEntry> entry = cache_.lookup(sub);
      if (!entry) {
        FetchedSub fetched = fetch_sub(writer_->fabric(), writer_->region(), writer_->meta(), sub);
        SplicedImage img = splice(fetched.base, fetched.overflow, writer_->meta(), sub);
        if (!writer_->knows(sub)) writer_->adopt(sub, img.remote_header, img.chunks);
        entry = SubEntry::from_spliced(sub, std::move(img));
        cache_.insert(entry);
      }
      HnswIndex& idx = entry->promote(params_);

      auto checkpoint = writer_->checkpoint(sub);
      SubSnapshot pre = take_snapshot(idx);
      for (std::size_t i : members) idx.insert(vecs.row(i), labels[i]);

      auto uc = prepare_commit(*writer_, sub, pre, idx);
      if (!uc) {
        for (std::size_t i : members) status[i] = InsertStatus::RebuildRequired;
        cache_.erase(sub);
        rebuild_needed_ = true;
        continue;
      }
      try {
        commit_update(writer_->fabric(), writer_->region(), *uc);
        if (!uc->empty()) writer_->confirm_commit();
      } catch (const FabricError&) {
        for (std::size_t i : members) status[i] = InsertStatus::Failed;
        writer_->restore(sub, checkpoint);
        cache_.erase(sub);
      }
    }
    return status;
  }

 private:
  LayoutWriter* writer_;
  const MetaIndex* meta_;
  HnswParams params_;
  SubCache cache_;
  u64 next_label_;
  bool rebuild_needed_ = false;
};

}  // namespace farann
