#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <queue>
#include <span>
#include <vector>

#include "farann/vectors.hpp"

namespace farann {

// Tuning knobs for graph construction and search. `m` is the per-layer degree
// target; layer 0 keeps up to 2*m links. level_lambda <= 0 selects the usual
// 1/ln(m). max_level_cap clamps sampled levels (used by the small routing
// index, which stays at three layers or fewer); negative means uncapped.
struct HnswParams {
  u32 m = 16;
  u32 e_build = 128;
  u32 e_search = 64;
  double level_lambda = 0.0;
  u64 rng_seed = 42;
  int max_level_cap = -1;
  bool diversity_pruning = false;  // keep spread-out neighbors instead of the plain closest set

  void validate() const {
    require(m >= 2, "HnswParams: m must be at least 2");
    require(e_build >= m, "HnswParams: e_build must be at least m");
    require(e_search >= 1, "HnswParams: e_search must be at least 1");
  }
  double lambda() const { return level_lambda > 0.0 ? level_lambda : 1.0 / std::log(double(m)); }
};

// Sizing of the serialized image. Each array keeps a tail gap proportional to
// its payload so later appends can land in place; every pair of neighbouring
// subs additionally shares an overflow arena sized against their image bytes.
struct GapPolicy {
  double internal_gap_fraction = 0.2;
  double overflow_fraction = 0.25;
};

// ---------------------------------------------------------------------------
// Neighbor storage. Per node one contiguous block of u32 words:
//   [count | slot * 2m]  for layer 0, then per upper layer  [count | slot * m].
// Fixed capacities mean a link update dirties only its own block, and a block
// never moves once written.

inline u32 nbr_capacity(u32 m, int layer) { return layer == 0 ? 2 * m : m; }

inline u64 nbr_segment_word(u32 m, int layer) {
  return layer == 0 ? 0 : u64(1 + 2 * m) + u64(layer - 1) * (1 + m);
}

inline u64 nbr_block_words(u32 m, int level) {
  return u64(1 + 2 * m) + u64(level) * (1 + m);
}

// ---------------------------------------------------------------------------
// Serialized sub-index image. Fixed 120-byte header, then five arrays at fixed
// offsets: levels (u32/node), neighbor-block offsets (u64/node, in words),
// neighbor words (u32), vectors (f32*dim/node), labels (u64/node). Every array
// is stored as payload followed by `cap - size` reserved gap bytes, so the
// image can absorb growth without relocating anything.

enum class ArrayKind : u32 { Levels = 0, Offsets = 1, Neighbors = 2, Vectors = 3, Labels = 4 };
inline constexpr int kArrayKinds = 5;
inline constexpr u32 kSubImageMagic = 0x31534146;  // "FAS1"
inline constexpr u64 kSubHeaderBytes = 120;

struct SubImageHeader {
  u32 dim = 0;
  u64 ntotal = 0;
  u64 entry_point = 0;
  u32 max_level = 0;
  Metric metric = Metric::L2;
  u32 m = 0;
  u64 size[kArrayKinds] = {0, 0, 0, 0, 0};  // payload bytes per array
  u64 cap[kArrayKinds] = {0, 0, 0, 0, 0};   // reserved bytes per array (>= size)
};

// Byte offsets of header fields, shared by the serializer and by commits that
// overwrite individual fields in place.
namespace hdr {
inline constexpr u64 kMagic = 0;
inline constexpr u64 kDim = 4;
inline constexpr u64 kNtotal = 8;
inline constexpr u64 kEntryPoint = 16;
inline constexpr u64 kMaxLevel = 24;
inline constexpr u64 kMetric = 28;
inline constexpr u64 kM = 32;
inline constexpr u64 kArrayTable = 40;  // 5 x (size u64, cap u64)
inline u64 size_field(ArrayKind k) { return kArrayTable + 16 * u64(k); }
inline u64 cap_field(ArrayKind k) { return kArrayTable + 16 * u64(k) + 8; }
}  // namespace hdr

inline u64 section_start(const SubImageHeader& h, ArrayKind kind) {
  u64 off = kSubHeaderBytes;
  for (int k = 0; k < int(kind); ++k) off += h.cap[k];
  return off;
}

inline u64 image_bytes(const SubImageHeader& h) {
  u64 total = kSubHeaderBytes;
  for (u64 c : h.cap) total += c;
  return total;
}

inline void encode_header(std::byte* dst, const SubImageHeader& h) {
  store_u32(dst + hdr::kMagic, kSubImageMagic);
  store_u32(dst + hdr::kDim, h.dim);
  store_u64(dst + hdr::kNtotal, h.ntotal);
  store_u64(dst + hdr::kEntryPoint, h.entry_point);
  store_u32(dst + hdr::kMaxLevel, h.max_level);
  store_u32(dst + hdr::kMetric, u32(h.metric));
  store_u32(dst + hdr::kM, h.m);
  store_u32(dst + 36, 0);
  for (int k = 0; k < kArrayKinds; ++k) {
    store_u64(dst + hdr::size_field(ArrayKind(k)), h.size[k]);
    store_u64(dst + hdr::cap_field(ArrayKind(k)), h.cap[k]);
  }
}

// A remote base header may carry size > cap once an array has grown past its
// reserved gap (the excess lives in overflow chunks); such headers only parse
// with allow_grown set. Standalone images keep the strict rule.
inline SubImageHeader decode_header(std::span<const std::byte> bytes, bool allow_grown = false) {
  if (bytes.size() < kSubHeaderBytes) throw ParseError("sub image shorter than header", bytes.size());
  if (load_u32(bytes.data() + hdr::kMagic) != kSubImageMagic)
    throw ParseError("bad sub image magic", hdr::kMagic);
  SubImageHeader h;
  h.dim = load_u32(bytes.data() + hdr::kDim);
  h.ntotal = load_u64(bytes.data() + hdr::kNtotal);
  h.entry_point = load_u64(bytes.data() + hdr::kEntryPoint);
  h.max_level = load_u32(bytes.data() + hdr::kMaxLevel);
  u32 metric = load_u32(bytes.data() + hdr::kMetric);
  if (metric > 1) throw ParseError("unknown metric code", hdr::kMetric);
  h.metric = Metric(metric);
  h.m = load_u32(bytes.data() + hdr::kM);
  for (int k = 0; k < kArrayKinds; ++k) {
    h.size[k] = load_u64(bytes.data() + hdr::size_field(ArrayKind(k)));
    h.cap[k] = load_u64(bytes.data() + hdr::cap_field(ArrayKind(k)));
    if (!allow_grown && h.cap[k] < h.size[k])
      throw ParseError("array cap below size", hdr::cap_field(ArrayKind(k)));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Anything the search routine can walk: a mutable index or a zero-copy view
// over a serialized image.

template <typename G>
concept GraphLike = requires(const G& g, u32 id, int layer) {
  { g.node_count() } -> std::convertible_to<std::size_t>;
  { g.entry_node() } -> std::convertible_to<u32>;
  { g.top_level() } -> std::convertible_to<int>;
  { g.level_of(id) } -> std::convertible_to<int>;
  { g.neighbors_of(id, layer) } -> std::convertible_to<std::span<const u32>>;
  { g.vector_of(id) } -> std::convertible_to<std::span<const float>>;
  { g.label_of(id) } -> std::convertible_to<u64>;
  { g.dim() } -> std::convertible_to<u32>;
  { g.metric() } -> std::convertible_to<Metric>;
};

struct SearchCounters {
  u64 distance_evals = 0;
};

namespace detail {

// Best-first expansion restricted to one layer. Returns up to `ef` hits in
// ascending (dist, id) order. `stamps`/`stamp` implement the visited set;
// callers bump `stamp` between independent walks to reuse the array.
template <GraphLike G>
std::vector<Hit> search_layer(const G& g, std::span<const float> q, std::span<const Hit> entries,
                              int layer, std::size_t ef, std::vector<u32>& stamps, u32 stamp,
                              SearchCounters* cnt) {
  std::priority_queue<Hit, std::vector<Hit>, std::greater<Hit>> candidates;
  std::priority_queue<Hit> results;
  for (const Hit& e : entries) {
    if (stamps[e.id] == stamp) continue;
    stamps[e.id] = stamp;
    candidates.push(e);
    results.push(e);
    if (results.size() > ef) results.pop();
  }
  while (!candidates.empty()) {
    Hit cur = candidates.top();
    candidates.pop();
    if (results.size() >= ef && results.top() < cur) break;
    for (u32 nb : g.neighbors_of(u32(cur.id), layer)) {
      if (nb >= g.node_count()) continue;  // id past the committed prefix: ignore
      if (stamps[nb] == stamp) continue;
      stamps[nb] = stamp;
      double d = distance(g.vector_of(nb), q, g.metric());
      if (cnt) ++cnt->distance_evals;
      Hit h{d, nb};
      if (results.size() < ef || h < results.top()) {
        candidates.push(h);
        results.push(h);
        if (results.size() > ef) results.pop();
      }
    }
  }
  std::vector<Hit> out(results.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = results.top();
    results.pop();
  }
  return out;
}

}  // namespace detail

// Layered search: greedy descent through the upper layers, then an ef-wide
// sweep of layer 0. When ef covers the whole graph the search degrades to an
// exact linear scan, so k = ef = node_count reproduces brute force even on a
// graph with disconnected components. Hit ids are node-local; map through
// label_of for global identity.
template <GraphLike G>
std::vector<Hit> hnsw_search(const G& g, std::span<const float> q, std::size_t k, std::size_t ef,
                             SearchCounters* cnt = nullptr) {
  require(q.size() == g.dim() || g.node_count() == 0, "hnsw_search: dimension mismatch");
  std::size_t n = g.node_count();
  if (n == 0 || k == 0) return {};
  ef = std::max(ef, k);
  if (ef >= n) {
    std::vector<Hit> all;
    all.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      all.push_back({distance(g.vector_of(u32(i)), q, g.metric()), u64(i)});
      if (cnt) ++cnt->distance_evals;
    }
    std::size_t kk = std::min(k, n);
    std::partial_sort(all.begin(), all.begin() + kk, all.end());
    all.resize(kk);
    return all;
  }

  std::vector<u32> stamps(n, 0);
  u32 stamp = 0;
  u32 cur = g.entry_node();
  double cur_dist = distance(g.vector_of(cur), q, g.metric());
  if (cnt) ++cnt->distance_evals;
  for (int layer = g.top_level(); layer >= 1; --layer) {
    Hit entry{cur_dist, cur};
    auto best = detail::search_layer(g, q, std::span<const Hit>(&entry, 1), layer, 1, stamps,
                                     ++stamp, cnt);
    cur = u32(best.front().id);
    cur_dist = best.front().dist;
  }
  Hit entry{cur_dist, cur};
  auto res =
      detail::search_layer(g, q, std::span<const Hit>(&entry, 1), 0, ef, stamps, ++stamp, cnt);
  if (res.size() > k) res.resize(k);
  return res;
}

// ---------------------------------------------------------------------------
// Mutable in-memory index.

class HnswIndex {
 public:
  HnswIndex() = default;

  static HnswIndex build(VectorStore store, const HnswParams& params,
                         std::span<const u64> labels = {}) {
    params.validate();
    require(labels.empty() || labels.size() == store.count(),
            "HnswIndex::build: label count must match vector count");
    HnswIndex idx;
    idx.params_ = params;
    idx.vectors_ = VectorStore(store.dim, store.metric);
    idx.vectors_.reserve_rows(store.count());
    idx.level_rng_ = make_rng(params.rng_seed, 0x686e73775f6c766cull);
    for (std::size_t i = 0; i < store.count(); ++i)
      idx.insert(store.row(i), labels.empty() ? u64(i) : labels[i]);
    return idx;
  }

  // Adds one vector and wires it into every layer at or below its sampled
  // level. Returns the new node id (dense, append-only).
  u32 insert(std::span<const float> v, u64 label) {
    require(vectors_.dim != 0 || levels_.empty(), "HnswIndex::insert: store dim not set");
    if (levels_.empty() && vectors_.dim == 0) {
      require(!v.empty(), "HnswIndex::insert: empty vector");
      vectors_ = VectorStore(u32(v.size()), vectors_.metric);
    }
    require(v.size() == vectors_.dim, "HnswIndex::insert: dimension mismatch");
    int lvl = sample_level();
    u32 id = u32(levels_.size());
    levels_.push_back(u32(lvl));
    labels_.push_back(label);
    offsets_.push_back(neighbors_.size());
    neighbors_.resize(neighbors_.size() + nbr_block_words(params_.m, lvl), 0);
    vectors_.append(v);
    if (id == 0) {
      entry_ = 0;
      max_level_ = lvl;
      return id;
    }

    std::vector<u32> stamps(node_count(), 0);
    u32 stamp = 0;
    u32 cur = u32(entry_);
    double cur_dist = distance(vector_of(cur), v, metric());
    for (int layer = max_level_; layer > lvl; --layer) {
      Hit e{cur_dist, cur};
      auto best =
          detail::search_layer(*this, v, std::span<const Hit>(&e, 1), layer, 1, stamps, ++stamp, nullptr);
      cur = u32(best.front().id);
      cur_dist = best.front().dist;
    }
    for (int layer = std::min(lvl, max_level_); layer >= 0; --layer) {
      Hit e{cur_dist, cur};
      auto cands = detail::search_layer(*this, v, std::span<const Hit>(&e, 1), layer,
                                        params_.e_build, stamps, ++stamp, nullptr);
      auto selected = select_targets(v, cands, params_.m);
      for (u32 s : selected) {
        add_link(id, s, layer);
        add_link(s, id, layer);
      }
      cur = u32(cands.front().id);
      cur_dist = cands.front().dist;
    }
    if (lvl > max_level_) {
      max_level_ = lvl;
      entry_ = id;
    }
    return id;
  }

  // GraphLike surface -------------------------------------------------------
  std::size_t node_count() const { return levels_.size(); }
  u32 entry_node() const { return u32(entry_); }
  int top_level() const { return max_level_; }
  int level_of(u32 id) const { return int(levels_[id]); }
  u32 dim() const { return vectors_.dim; }
  Metric metric() const { return vectors_.metric; }
  u64 label_of(u32 id) const { return labels_[id]; }
  std::span<const float> vector_of(u32 id) const { return vectors_.row(id); }

  std::span<const u32> neighbors_of(u32 id, int layer) const {
    if (layer > level_of(id)) return {};
    u64 w = offsets_[id] + nbr_segment_word(params_.m, layer);
    u32 cnt = std::min(neighbors_[w], nbr_capacity(params_.m, layer));
    return {neighbors_.data() + w + 1, cnt};
  }

  // Raw array access for diff-based commits and serialization.
  const std::vector<u32>& levels() const { return levels_; }
  const std::vector<u64>& offsets() const { return offsets_; }
  const std::vector<u32>& neighbor_words() const { return neighbors_; }
  const std::vector<u64>& labels() const { return labels_; }
  const VectorStore& vectors() const { return vectors_; }
  const HnswParams& params() const { return params_; }
  void set_runtime_params(const HnswParams& p) {
    p.validate();
    require(p.m == params_.m, "set_runtime_params: m is fixed by the stored layout");
    u64 keep_seed = params_.rng_seed;
    params_ = p;
    params_.rng_seed = keep_seed;
  }

  // Header describing the current logical arrays (caps equal sizes; the
  // remote copy keeps its own caps).
  SubImageHeader logical_header() const {
    SubImageHeader h;
    h.dim = vectors_.dim;
    h.ntotal = node_count();
    h.entry_point = entry_;
    h.max_level = u32(std::max(max_level_, 0));
    h.metric = vectors_.metric;
    h.m = params_.m;
    h.size[int(ArrayKind::Levels)] = 4 * u64(levels_.size());
    h.size[int(ArrayKind::Offsets)] = 8 * u64(offsets_.size());
    h.size[int(ArrayKind::Neighbors)] = 4 * u64(neighbors_.size());
    h.size[int(ArrayKind::Vectors)] = 4 * u64(vectors_.data.size());
    h.size[int(ArrayKind::Labels)] = 8 * u64(labels_.size());
    for (int k = 0; k < kArrayKinds; ++k) h.cap[k] = h.size[k];
    return h;
  }

  // Emits header + arrays, each array padded with a reserved gap of
  // floor(size * internal_gap_fraction) bytes rounded up to a 4-byte boundary
  // (keeps every section 4-aligned). A zero fraction yields exactly
  // header + payload bytes.
  std::vector<std::byte> serialize(const GapPolicy& gaps) const {
    SubImageHeader h = logical_header();
    for (int k = 0; k < kArrayKinds; ++k) {
      u64 gap = u64(double(h.size[k]) * gaps.internal_gap_fraction);
      h.cap[k] = h.size[k] + round_up(gap, 4);
    }
    std::vector<std::byte> out(image_bytes(h), std::byte{0});
    encode_header(out.data(), h);
    std::byte* base = out.data();
    u64 off = section_start(h, ArrayKind::Levels);
    for (u32 v : levels_) store_u32(base + off, v), off += 4;
    off = section_start(h, ArrayKind::Offsets);
    for (u64 v : offsets_) store_u64(base + off, v), off += 8;
    off = section_start(h, ArrayKind::Neighbors);
    for (u32 v : neighbors_) store_u32(base + off, v), off += 4;
    off = section_start(h, ArrayKind::Vectors);
    for (float v : vectors_.data) store_f32(base + off, v), off += 4;
    off = section_start(h, ArrayKind::Labels);
    for (u64 v : labels_) store_u64(base + off, v), off += 8;
    return out;
  }

  static HnswIndex deserialize(std::span<const std::byte> image);  // defined after HnswView

 private:
  int sample_level() {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    double u = uni(level_rng_);
    if (u <= 0.0) u = std::numeric_limits<double>::min();
    int lvl = int(std::floor(-std::log(u) * params_.lambda()));
    lvl = std::min(lvl, 30);
    if (params_.max_level_cap >= 0) lvl = std::min(lvl, params_.max_level_cap);
    return lvl;
  }

  // Closest-first selection; with diversity_pruning a candidate is dropped
  // when it sits closer to an already chosen neighbor than to the base point.
  std::vector<u32> select_targets(std::span<const float> base, std::span<const Hit> cands,
                                  u32 m) const {
    std::vector<u32> out;
    out.reserve(std::min<std::size_t>(m, cands.size()));
    if (!params_.diversity_pruning) {
      for (const Hit& c : cands) {
        if (out.size() >= m) break;
        out.push_back(u32(c.id));
      }
      return out;
    }
    for (const Hit& c : cands) {
      if (out.size() >= m) break;
      bool keep = true;
      for (u32 chosen : out) {
        if (distance(vector_of(u32(c.id)), vector_of(chosen), metric()) < c.dist) {
          keep = false;
          break;
        }
      }
      if (keep) out.push_back(u32(c.id));
    }
    return out;
  }

  void add_link(u32 from, u32 to, int layer) {
    u64 w = offsets_[from] + nbr_segment_word(params_.m, layer);
    u32 cap = nbr_capacity(params_.m, layer);
    u32 cnt = neighbors_[w];
    u32* slots = neighbors_.data() + w + 1;
    for (u32 i = 0; i < cnt; ++i)
      if (slots[i] == to) return;
    if (cnt < cap) {
      slots[cnt] = to;
      neighbors_[w] = cnt + 1;
      return;
    }
    // full block: rank current links plus the newcomer and keep the best cap
    std::vector<Hit> cands;
    cands.reserve(cnt + 1);
    auto from_vec = vector_of(from);
    for (u32 i = 0; i < cnt; ++i)
      cands.push_back({distance(vector_of(slots[i]), from_vec, metric()), slots[i]});
    cands.push_back({distance(vector_of(to), from_vec, metric()), to});
    std::sort(cands.begin(), cands.end());
    auto selected = select_targets(from_vec, cands, cap);
    neighbors_[w] = u32(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) slots[i] = selected[i];
    for (std::size_t i = selected.size(); i < cap; ++i) slots[i] = 0;
  }

  friend class HnswView;

  HnswParams params_;
  VectorStore vectors_;
  std::vector<u32> levels_;
  std::vector<u64> offsets_;
  std::vector<u32> neighbors_;
  std::vector<u64> labels_;
  u64 entry_ = 0;
  int max_level_ = -1;
  std::mt19937_64 level_rng_ = make_rng(42, 0x686e73775f6c766cull);
};

// ---------------------------------------------------------------------------
// Zero-copy read-only view over a serialized image. The buffer must stay
// alive for the lifetime of the view and start 4-byte aligned (vector-backed
// buffers always do).

class HnswView {
 public:
  static HnswView open(std::span<const std::byte> image) {
    SubImageHeader h = decode_header(image);
    if (reinterpret_cast<std::uintptr_t>(image.data()) % 4 != 0)
      throw ParseError("sub image buffer must be 4-byte aligned");
    if (image_bytes(h) > image.size())
      throw ParseError("sub image truncated: header claims more bytes", image.size());
    if (h.ntotal > 0 && h.dim == 0) throw ParseError("sub image has nodes but zero dim", hdr::kDim);
    if (h.m < 2 && h.ntotal > 0) throw ParseError("sub image m below 2", hdr::kM);
    auto expect = [&](ArrayKind k, u64 bytes) {
      if (h.size[int(k)] != bytes)
        throw ParseError("array size inconsistent with node count", hdr::size_field(k));
    };
    expect(ArrayKind::Levels, 4 * h.ntotal);
    expect(ArrayKind::Offsets, 8 * h.ntotal);
    expect(ArrayKind::Labels, 8 * h.ntotal);
    expect(ArrayKind::Vectors, 4 * h.ntotal * h.dim);
    if (h.size[int(ArrayKind::Neighbors)] % 4 != 0)
      throw ParseError("neighbor bytes not word-aligned", hdr::size_field(ArrayKind::Neighbors));
    if (h.ntotal > 0 && h.entry_point >= h.ntotal)
      throw ParseError("entry point out of range", hdr::kEntryPoint);

    HnswView v;
    v.image_ = image;
    v.h_ = h;
    for (int k = 0; k < kArrayKinds; ++k) v.sect_[k] = image.data() + section_start(h, ArrayKind(k));
    u64 words = h.size[int(ArrayKind::Neighbors)] / 4;
    for (u64 i = 0; i < h.ntotal; ++i) {
      u64 off = v.offset_of(u32(i));
      int lvl = v.level_of(u32(i));
      if (off + nbr_block_words(h.m, lvl) > words)
        throw ParseError("neighbor block out of range for node " + std::to_string(i),
                         section_start(h, ArrayKind::Offsets) + 8 * i);
    }
    return v;
  }

  std::size_t node_count() const { return h_.ntotal; }
  u32 entry_node() const { return u32(h_.entry_point); }
  int top_level() const { return int(h_.max_level); }
  u32 dim() const { return h_.dim; }
  Metric metric() const { return h_.metric; }
  const SubImageHeader& header() const { return h_; }
  std::span<const std::byte> raw() const { return image_; }

  int level_of(u32 id) const { return int(load_u32(sect_[0] + 4 * u64(id))); }
  u64 offset_of(u32 id) const { return load_u64(sect_[1] + 8 * u64(id)); }
  u64 label_of(u32 id) const { return load_u64(sect_[4] + 8 * u64(id)); }

  std::span<const u32> neighbors_of(u32 id, int layer) const {
    if (layer > level_of(id)) return {};
    u64 w = offset_of(id) + nbr_segment_word(h_.m, layer);
    const std::byte* p = sect_[2] + 4 * w;
    u32 cnt = std::min(load_u32(p), nbr_capacity(h_.m, layer));
    return {reinterpret_cast<const u32*>(p + 4), cnt};
  }

  std::span<const float> vector_of(u32 id) const {
    const std::byte* p = sect_[3] + 4 * u64(id) * h_.dim;
    return {reinterpret_cast<const float*>(p), h_.dim};
  }

  // Full copy into a mutable index (the promotion step before inserts).
  HnswIndex materialize(const HnswParams& runtime) const {
    HnswParams p = runtime;
    p.m = h_.m;
    p.validate();
    HnswIndex idx;
    idx.params_ = p;
    idx.level_rng_ = make_rng(p.rng_seed, mix_seed(h_.ntotal, 0x6d617465ull));
    idx.vectors_ = VectorStore(h_.dim, h_.metric);
    idx.vectors_.data.resize(h_.ntotal * u64(h_.dim));
    idx.levels_.resize(h_.ntotal);
    idx.offsets_.resize(h_.ntotal);
    idx.labels_.resize(h_.ntotal);
    idx.neighbors_.resize(h_.size[int(ArrayKind::Neighbors)] / 4);
    for (u64 i = 0; i < h_.ntotal; ++i) {
      idx.levels_[i] = u32(level_of(u32(i)));
      idx.offsets_[i] = offset_of(u32(i));
      idx.labels_[i] = label_of(u32(i));
    }
    for (u64 i = 0; i < idx.neighbors_.size(); ++i) idx.neighbors_[i] = load_u32(sect_[2] + 4 * i);
    for (u64 i = 0; i < idx.vectors_.data.size(); ++i)
      idx.vectors_.data[i] = load_f32(sect_[3] + 4 * i);
    idx.entry_ = h_.entry_point;
    idx.max_level_ = h_.ntotal == 0 ? -1 : int(h_.max_level);
    return idx;
  }

 private:
  std::span<const std::byte> image_;
  SubImageHeader h_;
  const std::byte* sect_[kArrayKinds] = {};
};

inline HnswIndex HnswIndex::deserialize(std::span<const std::byte> image) {
  HnswView v = HnswView::open(image);
  HnswParams p;
  p.m = std::max<u32>(v.header().m, 2);
  p.e_build = std::max(p.e_build, p.m);
  return v.materialize(p);
}

// Structural comparison across any two graph representations. Returns an empty
// string when equal, otherwise a description of the first mismatch.
template <GraphLike A, GraphLike B>
std::string graphs_diff(const A& a, const B& b) {
  auto fail = [](const std::string& s) { return s; };
  if (a.node_count() != b.node_count()) return fail("node_count differs");
  if (a.node_count() == 0) return "";
  if (a.dim() != b.dim()) return fail("dim differs");
  if (a.metric() != b.metric()) return fail("metric differs");
  if (a.entry_node() != b.entry_node()) return fail("entry point differs");
  if (a.top_level() != b.top_level()) return fail("top level differs");
  for (u32 i = 0; i < a.node_count(); ++i) {
    if (a.level_of(i) != b.level_of(i)) return fail("level differs at node " + std::to_string(i));
    if (a.label_of(i) != b.label_of(i)) return fail("label differs at node " + std::to_string(i));
    auto va = a.vector_of(i), vb = b.vector_of(i);
    for (u32 j = 0; j < a.dim(); ++j) {
      u32 ba, bb;
      std::memcpy(&ba, &va[j], 4);
      std::memcpy(&bb, &vb[j], 4);
      if (ba != bb) return fail("vector differs at node " + std::to_string(i));
    }
    for (int layer = 0; layer <= a.level_of(i); ++layer) {
      auto na = a.neighbors_of(i, layer), nb = b.neighbors_of(i, layer);
      if (na.size() != nb.size() || !std::equal(na.begin(), na.end(), nb.begin()))
        return fail("neighbors differ at node " + std::to_string(i) + " layer " +
                    std::to_string(layer));
    }
  }
  return "";
}

template <GraphLike A, GraphLike B>
bool graphs_equal(const A& a, const B& b) {
  return graphs_diff(a, b).empty();
}

}  // namespace farann
