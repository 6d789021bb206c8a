#pragma once

#include <array>
#include <optional>

#include "farann/fabric.hpp"
#include "farann/hnsw.hpp"

namespace farann {

// ---------------------------------------------------------------------------
// Remote region geometry.
//
//   [ generation u64 | pad u64 | meta slot 0 | meta slot 1 | groups... ]
//
// The active meta slot is generation % 2. A commit writes the inactive slot
// and flips the generation with a single trailing word write, so readers only
// ever parse a fully written slot.
//
// Each group holds two sub images and a shared overflow arena:
//
//   [ sub 2g image (appends grow forward) | overflow | sub 2g+1 image ]
//
// The even sub consumes overflow from the low end in chunks of
// [kind u32 | reserved u32 | payload_len u64 | payload]; the odd sub consumes
// from the high end with the 16-byte marker written as a trailer after the
// payload, so both directions can be walked back in write order.

struct SubExtent {
  u64 base_offset = 0;
  u64 base_len = 0;
};

struct GroupExtent {
  u64 overflow_offset = 0;
  u64 overflow_len = 0;
  u64 used_forward = 0;   // bytes consumed by the even sub from the low end
  u64 used_backward = 0;  // bytes consumed by the odd sub from the high end
};

struct GlobalMeta {
  u32 partition_count = 0;
  u32 epoch = 0;
  u64 region_len = 0;
  std::vector<SubExtent> subs;
  std::vector<GroupExtent> groups;

  static u32 group_of(u32 sub) { return sub / 2; }
  static bool grows_forward(u32 sub) { return sub % 2 == 0; }
};

inline constexpr u32 kMetaMagic = 0x314d4146;  // "FAM1"
inline constexpr u64 kMetaSlotFixed = 24;      // magic, P, epoch, reserved, region_len
inline constexpr u64 kOverflowMarkerBytes = 16;

inline u64 meta_slot_bytes(u32 p) {
  return kMetaSlotFixed + 16 * u64(p) + 32 * u64((p + 1) / 2);
}

// generation word + pad + two slots, rounded so group data starts aligned
inline u64 meta_prefix_bytes(u32 p) { return round_up(16 + 2 * meta_slot_bytes(p), 64); }

inline std::vector<std::byte> serialize_meta_slot(const GlobalMeta& m) {
  std::vector<std::byte> out;
  out.reserve(meta_slot_bytes(m.partition_count));
  append_u32(out, kMetaMagic);
  append_u32(out, m.partition_count);
  append_u32(out, m.epoch);
  append_u32(out, 0);
  append_u64(out, m.region_len);
  for (const auto& s : m.subs) {
    append_u64(out, s.base_offset);
    append_u64(out, s.base_len);
  }
  for (const auto& g : m.groups) {
    append_u64(out, g.overflow_offset);
    append_u64(out, g.overflow_len);
    append_u64(out, g.used_forward);
    append_u64(out, g.used_backward);
  }
  return out;
}

inline GlobalMeta parse_meta_slot(std::span<const std::byte> bytes) {
  if (bytes.size() < kMetaSlotFixed) throw ParseError("meta slot shorter than fixed header", bytes.size());
  if (load_u32(bytes.data()) != kMetaMagic) throw ParseError("bad meta magic", 0);
  GlobalMeta m;
  m.partition_count = load_u32(bytes.data() + 4);
  m.epoch = load_u32(bytes.data() + 8);
  m.region_len = load_u64(bytes.data() + 16);
  if (bytes.size() < meta_slot_bytes(m.partition_count))
    throw ParseError("meta slot truncated", bytes.size());
  const std::byte* at = bytes.data() + kMetaSlotFixed;
  m.subs.resize(m.partition_count);
  for (auto& s : m.subs) {
    s.base_offset = load_u64(at);
    s.base_len = load_u64(at + 8);
    at += 16;
  }
  m.groups.resize((m.partition_count + 1) / 2);
  for (auto& g : m.groups) {
    g.overflow_offset = load_u64(at);
    g.overflow_len = load_u64(at + 8);
    g.used_forward = load_u64(at + 16);
    g.used_backward = load_u64(at + 24);
    if (g.used_forward + g.used_backward > g.overflow_len)
      throw ParseError("overflow usage exceeds arena", u64(at - bytes.data()));
    at += 32;
  }
  return m;
}

// Reads the active meta copy. Two reads on a cold attach (the prefix length
// depends on P); callers that know P can refresh with refresh_meta in one.
inline std::pair<GlobalMeta, u64> read_meta(MemoryFabric& fabric, RegionHandle region) {
  auto head = fabric.read(region, 0, 16 + kMetaSlotFixed);
  u64 gen = load_u64(head.data());
  u32 p = load_u32(head.data() + 16 + 4);
  if (load_u32(head.data() + 16) != kMetaMagic) throw ParseError("bad meta magic", 16);
  u64 slot_len = meta_slot_bytes(p);
  u64 slot_off = 16 + (gen % 2) * slot_len;
  auto slot = fabric.read(region, slot_off, slot_len);
  return {parse_meta_slot(slot), gen};
}

inline std::pair<GlobalMeta, u64> refresh_meta(MemoryFabric& fabric, RegionHandle region, u32 p) {
  auto prefix = fabric.read(region, 0, 16 + 2 * meta_slot_bytes(p));
  u64 gen = load_u64(prefix.data());
  u64 slot_len = meta_slot_bytes(p);
  std::span<const std::byte> slot(prefix.data() + 16 + (gen % 2) * slot_len, slot_len);
  return {parse_meta_slot(slot), gen};
}

// ---------------------------------------------------------------------------
// Fetch planning: one base range, plus the sub's overflow slice when it has
// consumed overflow bytes. Always satisfiable in a single doorbell batch.

struct FetchRange {
  u64 offset = 0;
  u64 len = 0;
};

struct FetchPlan {
  u32 sub = 0;
  FetchRange base;
  std::optional<FetchRange> overflow;
  std::size_t range_count() const { return overflow ? 2 : 1; }
  u64 total_bytes() const { return base.len + (overflow ? overflow->len : 0); }
};

inline FetchPlan plan_fetch(const GlobalMeta& meta, u32 sub) {
  require(sub < meta.partition_count, "plan_fetch: sub id out of range");
  FetchPlan plan;
  plan.sub = sub;
  plan.base = {meta.subs[sub].base_offset, meta.subs[sub].base_len};
  const GroupExtent& g = meta.groups[GlobalMeta::group_of(sub)];
  if (GlobalMeta::grows_forward(sub)) {
    if (g.used_forward > 0) plan.overflow = FetchRange{g.overflow_offset, g.used_forward};
  } else {
    if (g.used_backward > 0)
      plan.overflow =
          FetchRange{g.overflow_offset + g.overflow_len - g.used_backward, g.used_backward};
  }
  return plan;
}

struct FetchedSub {
  std::vector<std::byte> base;
  std::vector<std::byte> overflow;
};

inline FetchedSub fetch_sub(MemoryFabric& fabric, RegionHandle region, const GlobalMeta& meta,
                            u32 sub) {
  FetchPlan plan = plan_fetch(meta, sub);
  std::vector<FabricOp> ops;
  ops.push_back(FabricOp::read(region, plan.base.offset, plan.base.len));
  if (plan.overflow) ops.push_back(FabricOp::read(region, plan.overflow->offset, plan.overflow->len));
  auto results = fabric.doorbell(ops);
  FetchedSub out;
  out.base = std::move(results[0]);
  if (plan.overflow) out.overflow = std::move(results[1]);
  return out;
}

// ---------------------------------------------------------------------------
// Splice: reassemble the contiguous logical image from a base snapshot plus
// the sub's overflow slice.

struct ChunkRecord {
  ArrayKind kind = ArrayKind::Levels;
  u64 payload_len = 0;
  u64 payload_remote = 0;  // absolute region offset of the payload start
};

struct SplicedImage {
  std::vector<std::byte> bytes;      // canonical image, caps == sizes
  SubImageHeader header;             // header of `bytes`
  SubImageHeader remote_header;      // header as stored remotely (original caps)
  std::vector<ChunkRecord> chunks;   // overflow chunks in write order
};

inline SplicedImage splice(std::span<const std::byte> base_bytes,
                           std::span<const std::byte> overflow_bytes, const GlobalMeta& meta,
                           u32 sub) {
  require(sub < meta.partition_count, "splice: sub id out of range");
  const SubExtent& ext = meta.subs[sub];
  const GroupExtent& grp = meta.groups[GlobalMeta::group_of(sub)];
  bool forward = GlobalMeta::grows_forward(sub);
  u64 used = forward ? grp.used_forward : grp.used_backward;
  if (base_bytes.size() != ext.base_len)
    throw ParseError("splice: base snapshot length mismatch", base_bytes.size());
  if (overflow_bytes.size() != used)
    throw ParseError("splice: overflow snapshot length mismatch", overflow_bytes.size());

  SubImageHeader h = decode_header(base_bytes, /*allow_grown=*/true);

  // walk the overflow slice into chunk records, restoring write order
  std::vector<ChunkRecord> chunks;
  if (forward) {
    u64 pos = 0;
    u64 slice_remote = grp.overflow_offset;
    while (pos < used) {
      if (pos + kOverflowMarkerBytes > used)
        throw ParseError("splice: truncated overflow marker", pos);
      u32 kind = load_u32(overflow_bytes.data() + pos);
      u64 len = load_u64(overflow_bytes.data() + pos + 8);
      if (kind >= u32(kArrayKinds)) throw ParseError("splice: bad chunk kind", pos);
      if (pos + kOverflowMarkerBytes + len > used)
        throw ParseError("splice: chunk payload past used bytes", pos);
      chunks.push_back({ArrayKind(kind), len, slice_remote + pos + kOverflowMarkerBytes});
      pos += kOverflowMarkerBytes + len;
    }
  } else {
    // Walk down from the top; trailers sit above payloads, and the oldest
    // chunk occupies the very top, so this order is already write order.
    u64 cursor = used;
    u64 slice_remote = grp.overflow_offset + grp.overflow_len - used;
    while (cursor > 0) {
      if (cursor < kOverflowMarkerBytes) throw ParseError("splice: truncated overflow trailer", cursor);
      u32 kind = load_u32(overflow_bytes.data() + cursor - kOverflowMarkerBytes);
      u64 len = load_u64(overflow_bytes.data() + cursor - kOverflowMarkerBytes + 8);
      if (kind >= u32(kArrayKinds)) throw ParseError("splice: bad chunk kind", cursor);
      if (len + kOverflowMarkerBytes > cursor)
        throw ParseError("splice: chunk payload below slice", cursor);
      u64 payload_at = cursor - kOverflowMarkerBytes - len;
      chunks.push_back({ArrayKind(kind), len, slice_remote + payload_at});
      cursor = payload_at;
    }
  }

  // gather per array: base payload prefix, then that array's chunks in order
  std::array<std::vector<std::span<const std::byte>>, kArrayKinds> pieces;
  std::array<u64, kArrayKinds> gathered{};
  for (int k = 0; k < kArrayKinds; ++k) {
    u64 take = std::min(h.size[k], h.cap[k]);
    pieces[k].push_back(base_bytes.subspan(section_start(h, ArrayKind(k)), take));
    gathered[k] = take;
  }
  u64 slice_base_remote =
      forward ? grp.overflow_offset : grp.overflow_offset + grp.overflow_len - used;
  for (const ChunkRecord& c : chunks) {
    u64 in_slice = c.payload_remote - slice_base_remote;
    pieces[int(c.kind)].push_back(overflow_bytes.subspan(in_slice, c.payload_len));
    gathered[int(c.kind)] += c.payload_len;
  }
  for (int k = 0; k < kArrayKinds; ++k)
    if (gathered[k] != h.size[k])
      throw ParseError("splice: array bytes disagree with header size for kind " +
                       std::to_string(k), hdr::size_field(ArrayKind(k)));

  SplicedImage out;
  out.remote_header = h;
  out.header = h;
  for (int k = 0; k < kArrayKinds; ++k) out.header.cap[k] = h.size[k];
  out.bytes.assign(image_bytes(out.header), std::byte{0});
  encode_header(out.bytes.data(), out.header);
  for (int k = 0; k < kArrayKinds; ++k) {
    u64 at = section_start(out.header, ArrayKind(k));
    for (auto piece : pieces[k]) {
      std::copy(piece.begin(), piece.end(), out.bytes.begin() + at);
      at += piece.size();
    }
  }
  out.chunks = std::move(chunks);
  return out;
}

// ---------------------------------------------------------------------------
// Writer-side state: where each sub's arrays live and how much room is left.

struct Segment {
  u64 logical_offset = 0;
  u64 len = 0;
  u64 remote_offset = 0;
};

struct AppendPlan {
  ArrayKind kind = ArrayKind::Levels;
  std::vector<Segment> segments;  // payload placement, logical order
  // overflow chunk marker (header or trailer) to write alongside the payload
  std::vector<std::pair<u64, std::array<std::byte, kOverflowMarkerBytes>>> markers;
};

inline u64 required_region_bytes(std::span<const u64> image_lens, const GapPolicy& policy) {
  u32 p = u32(image_lens.size());
  u64 total = meta_prefix_bytes(p);
  for (u32 g = 0; g < (p + 1) / 2; ++g) {
    u64 a = image_lens[2 * g];
    u64 b = (2 * g + 1 < p) ? image_lens[2 * g + 1] : 0;
    total += a + b + round_up(u64(double(a + b) * policy.overflow_fraction), 8);
  }
  return total;
}

// Single-writer authority over one region's layout. Query workers never hold
// one of these; they work from GlobalMeta snapshots.
class LayoutWriter {
  struct ArrayState {
    u64 logical_size = 0;
    u64 base_cap = 0;
    u64 base_remote = 0;
    std::vector<Segment> overflow_segments;
  };

 public:
  // Lays the images into a fresh region: meta prefix, then one group per pair
  // of images with a shared overflow arena sized by overflow_fraction of the
  // pair's payload. An odd trailing image keeps a full arena to itself.
  static LayoutWriter build(MemoryFabric& fabric, std::span<const std::vector<std::byte>> images,
                            const GapPolicy& policy, u32 epoch = 0) {
    require(!images.empty(), "LayoutWriter::build: need at least one image");
    LayoutWriter w(fabric);
    u32 p = u32(images.size());
    w.meta_.partition_count = p;
    w.meta_.epoch = epoch;
    w.meta_.subs.resize(p);
    w.meta_.groups.resize((p + 1) / 2);

    u64 cursor = meta_prefix_bytes(p);
    for (u32 g = 0; g < w.meta_.groups.size(); ++g) {
      u32 a = 2 * g, b = 2 * g + 1;
      u64 len_a = images[a].size();
      u64 len_b = b < p ? images[b].size() : 0;
      u64 ovf = round_up(u64(double(len_a + len_b) * policy.overflow_fraction), 8);
      w.meta_.subs[a] = {cursor, len_a};
      w.meta_.groups[g] = {cursor + len_a, ovf, 0, 0};
      if (b < p) w.meta_.subs[b] = {cursor + len_a + ovf, len_b};
      cursor += len_a + ovf + len_b;
    }
    w.meta_.region_len = cursor;
    w.region_ = fabric.register_region(cursor);

    auto slot = serialize_meta_slot(w.meta_);
    std::vector<std::byte> prefix(meta_prefix_bytes(p), std::byte{0});
    store_u64(prefix.data(), 0);  // generation 0 -> slot 0 active
    std::copy(slot.begin(), slot.end(), prefix.begin() + 16);
    fabric.write(w.region_, 0, prefix);
    for (u32 s = 0; s < p; ++s) fabric.write(w.region_, w.meta_.subs[s].base_offset, images[s]);

    w.gen_ = 0;
    w.known_.assign(p, false);
    w.state_.resize(p);
    for (u32 s = 0; s < p; ++s) w.adopt(s, decode_header(images[s]), {});
    return w;
  }

  // Cold attach: recover meta from the region. Per-sub array state is adopted
  // lazily from the first fetch+splice of each sub.
  static LayoutWriter attach(MemoryFabric& fabric, RegionHandle region) {
    LayoutWriter w(fabric);
    auto [meta, gen] = read_meta(fabric, region);
    w.meta_ = std::move(meta);
    w.gen_ = gen;
    w.region_ = region;
    w.known_.assign(w.meta_.partition_count, false);
    w.state_.resize(w.meta_.partition_count);
    return w;
  }

  const GlobalMeta& meta() const { return meta_; }
  RegionHandle region() const { return region_; }
  u64 generation() const { return gen_; }
  MemoryFabric& fabric() { return *fabric_; }
  bool knows(u32 sub) const { return known_[sub]; }

  // Registers the committed state of a sub (from build images or a splice).
  void adopt(u32 sub, const SubImageHeader& header, std::span<const ChunkRecord> chunks) {
    require(sub < meta_.partition_count, "adopt: sub id out of range");
    auto& st = state_[sub];
    for (int k = 0; k < kArrayKinds; ++k) {
      st[k].logical_size = header.size[k];
      st[k].base_cap = header.cap[k];
      st[k].base_remote = meta_.subs[sub].base_offset + section_start(header, ArrayKind(k));
      st[k].overflow_segments.clear();
    }
    std::array<u64, kArrayKinds> logical{};
    for (int k = 0; k < kArrayKinds; ++k) logical[k] = std::min(header.size[k], header.cap[k]);
    for (const ChunkRecord& c : chunks) {
      st[int(c.kind)].overflow_segments.push_back(
          {logical[int(c.kind)], c.payload_len, c.payload_remote});
      logical[int(c.kind)] += c.payload_len;
    }
    known_[sub] = true;
  }

  void forget(u32 sub) { known_[sub] = false; }

  // Transactional placement for one commit: either every delta gets a home or
  // nothing changes and RebuildRequired is signalled via nullopt.
  std::optional<std::vector<AppendPlan>> try_alloc(
      u32 sub, std::span<const std::pair<ArrayKind, u64>> deltas) {
    require(sub < meta_.partition_count, "try_alloc: sub id out of range");
    require(known_[sub], "try_alloc: sub state not adopted yet");
    auto& st = state_[sub];
    GroupExtent& grp = meta_.groups[GlobalMeta::group_of(sub)];
    bool forward = GlobalMeta::grows_forward(sub);

    // feasibility first: overflow need across all deltas
    u64 overflow_need = 0;
    for (auto [kind, nbytes] : deltas) {
      require(nbytes > 0, "try_alloc: zero-length delta");
      const ArrayState& a = st[int(kind)];
      u64 internal_left = a.base_cap - std::min(a.logical_size, a.base_cap);
      if (nbytes > internal_left) overflow_need += kOverflowMarkerBytes + (nbytes - internal_left);
    }
    u64 overflow_free = grp.overflow_len - grp.used_forward - grp.used_backward;
    if (overflow_need > overflow_free) return std::nullopt;

    std::vector<AppendPlan> plans;
    for (auto [kind, nbytes] : deltas) {
      ArrayState& a = st[int(kind)];
      AppendPlan plan;
      plan.kind = kind;
      u64 internal_left = a.base_cap - std::min(a.logical_size, a.base_cap);
      u64 internal_take = std::min(nbytes, internal_left);
      if (internal_take > 0)
        plan.segments.push_back(
            {a.logical_size, internal_take, a.base_remote + a.logical_size});
      u64 spill = nbytes - internal_take;
      if (spill > 0) {
        std::array<std::byte, kOverflowMarkerBytes> marker{};
        store_u32(marker.data(), u32(kind));
        store_u64(marker.data() + 8, spill);
        u64 payload_remote, marker_remote;
        if (forward) {
          u64 chunk_at = grp.overflow_offset + grp.used_forward;
          marker_remote = chunk_at;
          payload_remote = chunk_at + kOverflowMarkerBytes;
          grp.used_forward += kOverflowMarkerBytes + spill;
        } else {
          u64 top = grp.overflow_offset + grp.overflow_len - grp.used_backward;
          marker_remote = top - kOverflowMarkerBytes;
          payload_remote = top - kOverflowMarkerBytes - spill;
          grp.used_backward += kOverflowMarkerBytes + spill;
        }
        plan.markers.emplace_back(marker_remote, marker);
        Segment seg{a.logical_size + internal_take, spill, payload_remote};
        plan.segments.push_back(seg);
        a.overflow_segments.push_back(seg);
      }
      a.logical_size += nbytes;
      plans.push_back(std::move(plan));
    }
    return plans;
  }

  // Maps a logical byte range of one array onto remote ranges (the base
  // section first, then overflow segments in logical order). Ranges that
  // straddle a boundary split.
  std::vector<Segment> map_logical(u32 sub, ArrayKind kind, u64 logical_offset, u64 len) const {
    require(sub < meta_.partition_count, "map_logical: sub id out of range");
    require(known_[sub], "map_logical: sub state not adopted yet");
    const ArrayState& a = state_[sub][int(kind)];
    require(logical_offset + len <= a.logical_size, "map_logical: range past logical size");
    std::vector<Segment> out;
    auto emit = [&](u64 seg_lo, u64 seg_len, u64 seg_remote) {
      u64 lo = std::max(logical_offset, seg_lo);
      u64 hi = std::min(logical_offset + len, seg_lo + seg_len);
      if (lo < hi) out.push_back({lo, hi - lo, seg_remote + (lo - seg_lo)});
    };
    emit(0, std::min(a.logical_size, a.base_cap), a.base_remote);
    for (const Segment& seg : a.overflow_segments) emit(seg.logical_offset, seg.len, seg.remote_offset);
    u64 covered = 0;
    for (const Segment& seg : out) covered += seg.len;
    require(covered == len, "map_logical: range not fully covered");
    return out;
  }

  u64 header_remote(u32 sub) const { return meta_.subs[sub].base_offset; }
  u64 base_cap(u32 sub, ArrayKind kind) const { return state_[sub][int(kind)].base_cap; }
  u64 logical_size(u32 sub, ArrayKind kind) const { return state_[sub][int(kind)].logical_size; }

  // Meta commit ops: new slot into the inactive copy, then the generation
  // flip. The flip must stay the last op of the commit's final batch.
  std::pair<FabricOp, FabricOp> meta_commit_ops() const {
    u64 gen_next = gen_ + 1;
    u64 slot_off = 16 + (gen_next % 2) * meta_slot_bytes(meta_.partition_count);
    auto slot = serialize_meta_slot(meta_);
    std::vector<std::byte> gen_word(8);
    store_u64(gen_word.data(), gen_next);
    return {FabricOp::write(region_, slot_off, std::move(slot)),
            FabricOp::write(region_, 0, std::move(gen_word))};
  }

  void confirm_commit() { ++gen_; }

  // Rollback support: commits snapshot the writer before mutating placement
  // state so a failed or infeasible commit leaves no trace.
  struct Checkpoint {
    GroupExtent group;
    std::array<ArrayState, kArrayKinds> state;
    bool known = false;
  };
  Checkpoint checkpoint(u32 sub) const {
    return {meta_.groups[GlobalMeta::group_of(sub)], state_[sub], known_[sub]};
  }
  void restore(u32 sub, const Checkpoint& cp) {
    meta_.groups[GlobalMeta::group_of(sub)] = cp.group;
    state_[sub] = cp.state;
    known_[sub] = cp.known;
  }

  // Epoch bump for rebuilds that reuse the writer (normally a rebuild makes a
  // fresh region and a fresh writer instead).
  void set_epoch(u32 epoch) { meta_.epoch = epoch; }

 private:
  explicit LayoutWriter(MemoryFabric& fabric) : fabric_(&fabric) {}

  MemoryFabric* fabric_;
  RegionHandle region_;
  GlobalMeta meta_;
  u64 gen_ = 0;
  std::vector<bool> known_;
  std::vector<std::array<ArrayState, kArrayKinds>> state_;
};

// ---------------------------------------------------------------------------
// Naive packed layout used as a comparison baseline: images back to back with
// no reserved space, all growth appended to a shared arena at the region tail.
// Every append lands in its own arena chunk, so fetching a sub that has grown
// n times costs 1 + n round trips instead of one doorbell batch.

class FragmentedLayout {
 public:
  static FragmentedLayout build(MemoryFabric& fabric,
                                std::span<const std::vector<std::byte>> images,
                                double arena_fraction = 0.5) {
    require(!images.empty(), "FragmentedLayout::build: need at least one image");
    FragmentedLayout f;
    f.fabric_ = &fabric;
    u64 cursor = 0;
    for (const auto& img : images) {
      f.bases_.push_back({cursor, img.size()});
      cursor += img.size();
    }
    f.arena_offset_ = cursor;
    u64 total = cursor;
    f.arena_len_ = round_up(u64(double(total) * arena_fraction), 8);
    f.region_ = fabric.register_region(cursor + f.arena_len_);
    for (std::size_t s = 0; s < images.size(); ++s)
      fabric.write(f.region_, f.bases_[s].base_offset, images[s]);
    f.headers_.resize(images.size());
    for (std::size_t s = 0; s < images.size(); ++s) f.headers_[s] = decode_header(images[s]);
    f.chunks_.resize(images.size());
    return f;
  }

  // Appends one array tail to the arena; separate write per append (header
  // update included), which is exactly the chattiness the grouped layout
  // avoids.
  bool append(u32 sub, ArrayKind kind, std::span<const std::byte> payload) {
    u64 need = kOverflowMarkerBytes + payload.size();
    if (arena_used_ + need > arena_len_) return false;
    u64 chunk_at = arena_offset_ + arena_used_;
    std::vector<std::byte> chunk(need);
    store_u32(chunk.data(), u32(kind));
    store_u32(chunk.data() + 4, sub);
    store_u64(chunk.data() + 8, payload.size());
    std::copy(payload.begin(), payload.end(), chunk.begin() + kOverflowMarkerBytes);
    fabric_->write(region_, chunk_at, chunk);
    arena_used_ += need;
    chunks_[sub].push_back({kind, payload.size(), chunk_at + kOverflowMarkerBytes});
    headers_[sub].size[int(kind)] += payload.size();
    std::vector<std::byte> hdr_bytes(kSubHeaderBytes);
    encode_header(hdr_bytes.data(), headers_[sub]);
    fabric_->write(region_, bases_[sub].base_offset, hdr_bytes);
    return true;
  }

  void overwrite(u32 sub, u64 offset_in_base, std::span<const std::byte> bytes) {
    fabric_->write(region_, bases_[sub].base_offset + offset_in_base,
                   std::vector<std::byte>(bytes.begin(), bytes.end()));
  }

  // Base read plus one read per chunk: the round-trip count this baseline
  // exists to demonstrate.
  std::vector<std::byte> fetch_logical(u32 sub) {
    auto base = fabric_->read(region_, bases_[sub].base_offset, bases_[sub].base_len);
    SubImageHeader h = decode_header(base, /*allow_grown=*/true);
    std::array<std::vector<std::vector<std::byte>>, kArrayKinds> extra;
    std::array<u64, kArrayKinds> gathered{};
    for (int k = 0; k < kArrayKinds; ++k) gathered[k] = std::min(h.size[k], h.cap[k]);
    for (const auto& c : chunks_[sub]) {
      extra[int(c.kind)].push_back(fabric_->read(region_, c.payload_remote, c.payload_len));
      gathered[int(c.kind)] += c.payload_len;
    }
    for (int k = 0; k < kArrayKinds; ++k)
      if (gathered[k] != h.size[k]) throw ParseError("fragmented fetch: size mismatch");
    SubImageHeader out_h = h;
    for (int k = 0; k < kArrayKinds; ++k) out_h.cap[k] = h.size[k];
    std::vector<std::byte> out(image_bytes(out_h), std::byte{0});
    encode_header(out.data(), out_h);
    for (int k = 0; k < kArrayKinds; ++k) {
      u64 at = section_start(out_h, ArrayKind(k));
      u64 base_take = std::min(h.size[k], h.cap[k]);
      auto src = std::span<const std::byte>(base).subspan(section_start(h, ArrayKind(k)), base_take);
      std::copy(src.begin(), src.end(), out.begin() + at);
      at += base_take;
      for (const auto& piece : extra[int(k)]) {
        std::copy(piece.begin(), piece.end(), out.begin() + at);
        at += piece.size();
      }
    }
    return out;
  }

  RegionHandle region() const { return region_; }
  u64 base_offset(u32 sub) const { return bases_[sub].base_offset; }
  const SubImageHeader& header(u32 sub) const { return headers_[sub]; }
  std::size_t chunk_count(u32 sub) const { return chunks_[sub].size(); }

 private:
  MemoryFabric* fabric_ = nullptr;
  RegionHandle region_;
  std::vector<SubExtent> bases_;
  std::vector<SubImageHeader> headers_;
  std::vector<std::vector<ChunkRecord>> chunks_;
  u64 arena_offset_ = 0;
  u64 arena_len_ = 0;
  u64 arena_used_ = 0;
};

}  // namespace farann
