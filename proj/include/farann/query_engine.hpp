#pragma once

#include <condition_variable>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "farann/layout.hpp"

namespace farann {

// Simulated compute costs, the search-side counterpart of FabricCostModel.
// Search time scales with distance evaluations times dimension; deserialize
// time scales with image bytes. Calibratable, never measured from wall time,
// so metrics are bit-reproducible.
struct ComputeCostModel {
  double per_distance_element = 1e-9;  // seconds per float within one distance eval
  double per_byte_deser = 1e-10;       // seconds per spliced image byte
};

// ---------------------------------------------------------------------------
// Routing index: a small graph over the P partition centroids, kept at three
// layers or fewer by clamping sampled levels. Node id == partition id.

struct MetaIndex {
  HnswIndex graph;
  u32 e_meta = 64;
};

inline MetaIndex build_meta_index(const VectorStore& centroids, u32 e_meta, u64 seed) {
  HnswParams p;
  p.m = 8;
  p.e_build = 32;
  p.e_search = e_meta;
  p.rng_seed = seed;
  p.max_level_cap = 2;
  return {HnswIndex::build(centroids, p), e_meta};
}

inline std::vector<u32> route(const MetaIndex& meta, std::span<const float> q, u32 r,
                              SearchCounters* cnt = nullptr) {
  require(r <= meta.graph.node_count(), "route: R exceeds partition count");
  auto hits = hnsw_search(meta.graph, q, r, std::max<std::size_t>(meta.e_meta, r), cnt);
  std::vector<u32> out;
  out.reserve(hits.size());
  for (const Hit& h : hits) out.push_back(u32(h.id));
  return out;
}

// ---------------------------------------------------------------------------
// A resident deserialized sub-index. Entries own their spliced bytes; the
// view points into them (heap addresses stay put once allocated). The insert
// path promotes the view to a mutable index in place.

struct SubEntry {
  u32 sub_id = 0;
  SplicedImage image;
  std::optional<HnswView> view;
  std::unique_ptr<HnswIndex> index;  // set once promoted for inserts

  static std::shared_ptr<SubEntry> from_spliced(u32 sub, SplicedImage spliced) {
    auto e = std::make_shared<SubEntry>();
    e->sub_id = sub;
    e->image = std::move(spliced);
    e->view = HnswView::open(e->image.bytes);
    return e;
  }

  static std::shared_ptr<SubEntry> from_index(u32 sub, HnswIndex idx) {
    auto e = std::make_shared<SubEntry>();
    e->sub_id = sub;
    e->index = std::make_unique<HnswIndex>(std::move(idx));
    return e;
  }

  std::size_t node_count() const { return index ? index->node_count() : view->node_count(); }

  std::vector<Hit> search(std::span<const float> q, std::size_t k, std::size_t ef,
                          SearchCounters* cnt) const {
    return index ? hnsw_search(*index, q, k, ef, cnt) : hnsw_search(*view, q, k, ef, cnt);
  }

  u64 label_of(u32 local_id) const {
    return index ? index->label_of(local_id) : view->label_of(local_id);
  }

  HnswIndex& promote(const HnswParams& runtime) {
    if (!index) index = std::make_unique<HnswIndex>(view->materialize(runtime));
    return *index;
  }
};

// LRU set of resident sub-indexes, capacity counted in subs.
class SubCache {
 public:
  explicit SubCache(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

  std::shared_ptr<SubEntry> lookup(u32 sub) {
    std::lock_guard lock(mu_);
    auto it = map_.find(sub);
    if (it == map_.end()) {
      ++misses_;
      return nullptr;
    }
    ++hits_;
    order_.splice(order_.begin(), order_, it->second);
    return *it->second;
  }

  bool contains(u32 sub) const {
    std::lock_guard lock(mu_);
    return map_.count(sub) > 0;
  }

  void insert(std::shared_ptr<SubEntry> entry) {
    std::lock_guard lock(mu_);
    u32 sub = entry->sub_id;
    auto it = map_.find(sub);
    if (it != map_.end()) {
      *it->second = std::move(entry);
      order_.splice(order_.begin(), order_, it->second);
      return;
    }
    order_.push_front(std::move(entry));
    map_[sub] = order_.begin();
    while (order_.size() > capacity_) {
      map_.erase(order_.back()->sub_id);
      order_.pop_back();
    }
  }

  void erase(u32 sub) {
    std::lock_guard lock(mu_);
    auto it = map_.find(sub);
    if (it == map_.end()) return;
    order_.erase(it->second);
    map_.erase(it);
  }

  void clear() {
    std::lock_guard lock(mu_);
    order_.clear();
    map_.clear();
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return order_.size();
  }
  std::size_t capacity() const { return capacity_; }
  u64 hits() const {
    std::lock_guard lock(mu_);
    return hits_;
  }
  u64 misses() const {
    std::lock_guard lock(mu_);
    return misses_;
  }

  std::vector<u32> resident_ids() const {  // MRU first
    std::lock_guard lock(mu_);
    std::vector<u32> ids;
    for (const auto& e : order_) ids.push_back(e->sub_id);
    return ids;
  }

 private:
  mutable std::mutex mu_;
  std::size_t capacity_;
  std::list<std::shared_ptr<SubEntry>> order_;
  std::unordered_map<u32, std::list<std::shared_ptr<SubEntry>>::iterator> map_;
  u64 hits_ = 0;
  u64 misses_ = 0;
};

// ---------------------------------------------------------------------------
// Batch planning: route every admitted query, dedupe sub demands, split into
// cached and to-fetch lists, order fetches by descending demand so the subs
// serving the most queries enter the pipeline first.

struct BatchPlan {
  std::vector<u32> included;  // indices into the submitted batch, arrival order
  std::vector<u32> deferred;  // indices truncated by the wait budget
  std::vector<std::vector<u32>> routes;              // per included query
  std::unordered_map<u32, std::vector<u32>> demand;  // sub -> included positions
  std::vector<u32> fetch_list;  // uncached subs, demand descending, ties ascending id
  std::vector<u32> ready_list;  // cached subs, same ordering rule
  std::vector<std::shared_ptr<SubEntry>> ready_entries;  // pinned, parallels ready_list
  SearchCounters meta_counters;
};

inline BatchPlan plan_batch(const QueryBatch& batch, const MetaIndex& meta, SubCache& cache,
                            double slo_wait) {
  std::size_t n = batch.queries.count();
  require(n > 0, "plan_batch: batch must not be empty");
  bool timed = !batch.arrival_times.empty();
  require(!timed || batch.arrival_times.size() == n,
          "plan_batch: arrival_times must match query count");
  BatchPlan plan;
  for (u32 i = 0; i < n; ++i) {
    if (timed && i > 0 && batch.arrival_times[i] - batch.arrival_times[0] > slo_wait) {
      for (u32 j = i; j < n; ++j) plan.deferred.push_back(j);
      break;
    }
    plan.included.push_back(i);
  }

  u32 r = std::min<u32>(batch.r, u32(meta.graph.node_count()));
  for (u32 pos = 0; pos < plan.included.size(); ++pos) {
    auto q = batch.queries.row(plan.included[pos]);
    plan.routes.push_back(route(meta, q, r, &plan.meta_counters));
    for (u32 sub : plan.routes.back()) plan.demand[sub].push_back(pos);
  }

  std::vector<u32> subs;
  subs.reserve(plan.demand.size());
  for (const auto& [sub, positions] : plan.demand) subs.push_back(sub);
  std::sort(subs.begin(), subs.end(), [&](u32 a, u32 b) {
    std::size_t da = plan.demand.at(a).size(), db = plan.demand.at(b).size();
    if (da != db) return da > db;
    return a < b;
  });
  for (u32 sub : subs) {
    if (auto entry = cache.lookup(sub)) {
      plan.ready_list.push_back(sub);
      plan.ready_entries.push_back(std::move(entry));
    } else {
      plan.fetch_list.push_back(sub);
    }
  }
  return plan;
}

// Global k smallest by (distance, id); duplicate ids keep their best entry.
// Set-valued, so merge grouping and order cannot change the answer.
inline std::vector<Hit> merge_topk(std::span<const std::vector<Hit>> partials, std::size_t k) {
  std::vector<Hit> all;
  for (const auto& p : partials) all.insert(all.end(), p.begin(), p.end());
  std::sort(all.begin(), all.end());
  std::vector<Hit> out;
  std::unordered_set<u64> seen;
  for (const Hit& h : all) {
    if (out.size() >= k) break;
    if (!seen.insert(h.id).second) continue;
    out.push_back(h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Execution metrics. The CSV column set is fixed; recall stays blank when no
// ground truth was supplied.

struct ExecutionMetrics {
  u64 batch_id = 0;
  u32 batch_size = 0;  // admitted queries
  u32 fetched = 0;     // subs loaded from the fabric
  u32 cache_hits = 0;  // subs served from cache
  double t_meta = 0;
  double t_net = 0;
  double t_deser = 0;
  double t_comp = 0;
  double t_pipeline = 0;
  double recall = -1.0;
  // extra fields, not part of the CSV contract
  double t_sequential = 0;
  u32 deferred = 0;
  u32 degraded_subs = 0;
};

inline std::string metrics_csv_header() {
  return "batch_id,B,fetched,cache_hits,t_meta,t_net,t_deser,t_comp,t_pipeline,recall";
}

inline std::string to_csv_row(const ExecutionMetrics& m) {
  std::ostringstream os;
  os.precision(9);
  os << m.batch_id << ',' << m.batch_size << ',' << m.fetched << ',' << m.cache_hits << ','
     << m.t_meta << ',' << m.t_net << ',' << m.t_deser << ',' << m.t_comp << ',' << m.t_pipeline
     << ',';
  if (m.recall >= 0) os << m.recall;
  return os.str();
}

struct QueryResult {
  std::vector<Hit> hits;  // (distance, global label)
  bool degraded = false;  // a routed sub could not be fetched
  bool deferred = false;  // pushed past the wait budget into the next batch
};

struct BatchResult {
  std::vector<QueryResult> per_query;  // aligned with the submitted batch
  ExecutionMetrics metrics;
};

struct EngineParams {
  u32 e_sub = 96;                  // candidate width inside each sub
  std::size_t cache_capacity = 0;  // subs; 0 derives max(1, P/10)
  u32 search_workers = 1;
  double slo_wait = std::numeric_limits<double>::infinity();
  bool refresh_meta_each_batch = true;
  bool pipelined = true;  // false runs the sequential reference executor
  ComputeCostModel compute;
};

namespace detail {

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t cap) : cap_(std::max<std::size_t>(cap, 1)) {}

  void push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < cap_; });
    items_.push_back(std::move(item));
    not_empty_.notify_one();
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

 private:
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
  std::list<T> items_;
  std::size_t cap_;
  bool closed_ = false;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// The serving engine for one worker: owns a cache and executes planned
// batches with three concurrent stage roles (fetch -> deserialize -> search)
// joined by bounded FIFO queues. Reported times come from the cost models,
// never from wall clocks, so runs are reproducible; the real threads keep the
// hand-off logic honest.

class QueryEngine {
 public:
  QueryEngine(MemoryFabric& fabric, RegionHandle region, GlobalMeta meta, MetaIndex meta_index,
              EngineParams params)
      : fabric_(&fabric),
        region_(region),
        meta_(std::move(meta)),
        meta_index_(std::move(meta_index)),
        params_(params),
        cache_(params.cache_capacity > 0 ? params.cache_capacity
                                         : std::max<std::size_t>(1, meta_.partition_count / 10)) {}

  SubCache& cache() { return cache_; }
  const GlobalMeta& meta() const { return meta_; }
  const MetaIndex& meta_index() const { return meta_index_; }
  EngineParams& params() { return params_; }
  RegionHandle region() const { return region_; }

  // Epoch switch: new region, new meta, new routing index, cold cache.
  void adopt_epoch(RegionHandle region, GlobalMeta meta, MetaIndex meta_index) {
    region_ = region;
    meta_ = std::move(meta);
    meta_index_ = std::move(meta_index);
    cache_.clear();
  }

  // Runs one batch end to end. Queries deferred by the wait budget are held
  // and lead the next call's batch. `gt` (optional) holds per-query true
  // top-k labels aligned with the submitted batch, for recall accounting.
  BatchResult run_batch(QueryBatch batch, const std::vector<std::vector<u64>>* gt = nullptr) {
    std::vector<std::vector<u64>> gt_rows;
    if (gt) gt_rows = *gt;
    if (carry_.queries.count() > 0) {
      require(carry_.queries.dim == batch.queries.dim, "run_batch: carried dim mismatch");
      VectorStore joined = carry_.queries;
      joined.data.insert(joined.data.end(), batch.queries.data.begin(), batch.queries.data.end());
      batch.queries = std::move(joined);
      if (!carry_.arrival_times.empty() || !batch.arrival_times.empty()) {
        require(!carry_.arrival_times.empty() && !batch.arrival_times.empty(),
                "run_batch: carried and new batches must both carry arrival times, or neither");
        std::vector<double> arrivals = carry_.arrival_times;
        arrivals.insert(arrivals.end(), batch.arrival_times.begin(), batch.arrival_times.end());
        batch.arrival_times = std::move(arrivals);
      }
      if (gt) {
        std::vector<std::vector<u64>> joined_gt = carry_gt_;
        joined_gt.insert(joined_gt.end(), gt_rows.begin(), gt_rows.end());
        gt_rows = std::move(joined_gt);
      }
      carry_ = QueryBatch{};
      carry_gt_.clear();
    }

    if (params_.refresh_meta_each_batch) {
      auto [meta, gen] = refresh_meta(*fabric_, region_, meta_.partition_count);
      (void)gen;
      meta_ = std::move(meta);
    }

    BatchPlan plan = plan_batch(batch, meta_index_, cache_, params_.slo_wait);
    BatchResult result = execute_plan(plan, batch, gt ? &gt_rows : nullptr);

    if (!plan.deferred.empty()) {
      carry_.queries = VectorStore(batch.queries.dim, batch.queries.metric);
      for (u32 qi : plan.deferred) {
        carry_.queries.append(batch.queries.row(qi));
        if (!batch.arrival_times.empty()) carry_.arrival_times.push_back(batch.arrival_times[qi]);
        if (gt) carry_gt_.push_back(gt_rows[qi]);
      }
      carry_.k = batch.k;
      carry_.r = batch.r;
    }
    return result;
  }

  // Executes an already-built plan against the given batch. Exposed so tests
  // can drive planning and execution separately.
  BatchResult execute_plan(const BatchPlan& plan, const QueryBatch& batch,
                           const std::vector<std::vector<u64>>* gt = nullptr) {
    std::vector<SubTask> tasks;
    tasks.reserve(plan.ready_list.size() + plan.fetch_list.size());
    for (std::size_t i = 0; i < plan.ready_list.size(); ++i)
      tasks.push_back({plan.ready_entries[i], plan.ready_list[i], true, 0, 0, 0});
    const std::size_t fetched_base = tasks.size();
    for (u32 sub : plan.fetch_list) tasks.push_back({nullptr, sub, false, 0, 0, 0});

    PartialMap partials;
    std::mutex partials_mu;

    if (params_.pipelined) {
      const std::size_t queue_cap = 2 * cache_.capacity();
      detail::BoundedQueue<FetchItem> fetch_q(queue_cap);
      detail::BoundedQueue<std::size_t> work_q(queue_cap);

      u32 workers = std::max<u32>(params_.search_workers, 1);
      std::vector<std::thread> searchers;
      for (u32 w = 0; w < workers; ++w)
        searchers.emplace_back([&] {
          while (auto idx = work_q.pop()) {
            SubTask& task = tasks[*idx];
            if (task.entry) search_task(task, plan, batch, partials, partials_mu);
          }
        });

      std::thread deserializer([&] {
        std::size_t at = fetched_base;
        while (auto item = fetch_q.pop()) {
          SubTask& task = tasks[at];
          if (!item->failed) {
            task.t_fetch = item->t_fetch;
            task.t_deser = params_.compute.per_byte_deser *
                           double(item->bytes.base.size() + item->bytes.overflow.size());
            task.entry = deserialize_one(std::move(*item));
          }
          work_q.push(at);
          ++at;
        }
        work_q.close();
      });

      // cached subs need no fetch or deserialize; they enter the search stage
      // directly (the fetch role seeds them so the queue closes exactly once)
      std::thread fetcher([&] {
        for (std::size_t i = 0; i < fetched_base; ++i) work_q.push(i);
        for (u32 sub : plan.fetch_list) fetch_q.push(fetch_one(sub));
        fetch_q.close();
      });

      fetcher.join();
      deserializer.join();
      for (auto& t : searchers) t.join();
    } else {
      for (std::size_t i = 0; i < fetched_base; ++i)
        search_task(tasks[i], plan, batch, partials, partials_mu);
      for (std::size_t i = fetched_base; i < tasks.size(); ++i) {
        FetchItem item = fetch_one(tasks[i].sub);
        if (item.failed) continue;
        tasks[i].t_fetch = item.t_fetch;
        tasks[i].t_deser = params_.compute.per_byte_deser *
                           double(item.bytes.base.size() + item.bytes.overflow.size());
        tasks[i].entry = deserialize_one(std::move(item));
        search_task(tasks[i], plan, batch, partials, partials_mu);
      }
    }

    // ---- results ----
    BatchResult out;
    out.per_query.resize(batch.queries.count());
    for (u32 qi : plan.deferred) out.per_query[qi].deferred = true;

    u32 degraded_subs = 0;
    std::vector<char> degraded(plan.included.size(), 0);
    for (std::size_t t = fetched_base; t < tasks.size(); ++t) {
      if (tasks[t].entry) continue;
      ++degraded_subs;
      auto it = plan.demand.find(tasks[t].sub);
      if (it != plan.demand.end())
        for (u32 pos : it->second) degraded[pos] = 1;
    }
    for (std::size_t pos = 0; pos < plan.included.size(); ++pos) {
      u32 qi = plan.included[pos];
      auto it = partials.find(u32(pos));
      if (it != partials.end()) out.per_query[qi].hits = merge_topk(it->second, batch.k);
      out.per_query[qi].degraded = degraded[pos] != 0;
    }

    // ---- simulated timing ----
    ExecutionMetrics& m = out.metrics;
    m.batch_id = batch_seq_++;
    m.batch_size = u32(plan.included.size());
    m.fetched = u32(plan.fetch_list.size());
    m.cache_hits = u32(plan.ready_list.size());
    m.deferred = u32(plan.deferred.size());
    m.degraded_subs = degraded_subs;
    m.t_meta = params_.compute.per_distance_element * double(plan.meta_counters.distance_evals) *
               double(meta_index_.graph.dim());
    for (const SubTask& t : tasks) {
      m.t_net += t.t_fetch;
      m.t_deser += t.t_deser;
      m.t_comp += t.t_search;
    }
    m.t_sequential = m.t_net + m.t_deser + m.t_comp;
    m.t_pipeline = params_.pipelined ? pipeline_makespan(tasks, fetched_base) : m.t_sequential;

    if (gt) {
      double acc = 0;
      std::size_t counted = 0;
      for (std::size_t pos = 0; pos < plan.included.size(); ++pos) {
        u32 qi = plan.included[pos];
        if (qi >= gt->size() || (*gt)[qi].empty()) continue;
        const auto& truth = (*gt)[qi];
        std::unordered_set<u64> want(truth.begin(), truth.end());
        std::size_t got = 0;
        for (const Hit& h : out.per_query[qi].hits)
          if (want.count(h.id)) ++got;
        acc += double(got) / double(want.size());
        ++counted;
      }
      if (counted > 0) m.recall = acc / double(counted);
    }
    return out;
  }

 private:
  struct SubTask {
    std::shared_ptr<SubEntry> entry;  // null when the fetch failed for good
    u32 sub = 0;
    bool cached = false;
    double t_fetch = 0, t_deser = 0, t_search = 0;
  };
  struct FetchItem {
    u32 sub = 0;
    FetchedSub bytes;
    bool failed = false;
    double t_fetch = 0;
  };
  using PartialMap = std::unordered_map<u32, std::vector<std::vector<Hit>>>;

  FetchItem fetch_one(u32 sub) {
    FetchItem item;
    item.sub = sub;
    for (int attempt = 0; attempt < 2; ++attempt) {
      try {
        FetchPlan fp = plan_fetch(meta_, sub);
        item.bytes = fetch_sub(*fabric_, region_, meta_, sub);
        item.t_fetch = doorbell_cost(fabric_->model(), fp.range_count(), fp.total_bytes());
        item.failed = false;
        return item;
      } catch (const FabricError&) {
        item.failed = true;
      }
    }
    return item;
  }

  std::shared_ptr<SubEntry> deserialize_one(FetchItem item) {
    SplicedImage img = splice(item.bytes.base, item.bytes.overflow, meta_, item.sub);
    auto entry = SubEntry::from_spliced(item.sub, std::move(img));
    cache_.insert(entry);
    return entry;
  }

  // Searches one resident sub for every query that demands it; the simulated
  // compute time follows the distance-eval count.
  void search_task(SubTask& task, const BatchPlan& plan, const QueryBatch& batch,
                   PartialMap& partials, std::mutex& mu) {
    auto it = plan.demand.find(task.sub);
    if (it == plan.demand.end()) return;
    SearchCounters cnt;
    std::vector<std::pair<u32, std::vector<Hit>>> local;
    for (u32 pos : it->second) {
      auto q = batch.queries.row(plan.included[pos]);
      auto hits =
          task.entry->search(q, batch.k, std::max<std::size_t>(params_.e_sub, batch.k), &cnt);
      for (Hit& h : hits) h.id = task.entry->label_of(u32(h.id));
      local.emplace_back(pos, std::move(hits));
    }
    task.t_search = params_.compute.per_distance_element * double(cnt.distance_evals) *
                    double(batch.queries.dim);
    std::lock_guard lock(mu);
    for (auto& [pos, hits] : local) partials[pos].push_back(std::move(hits));
  }

  // Event-driven makespan of the stage lanes: one fetch lane in plan order,
  // one deserialize lane consuming fetches, search_workers parallel search
  // lanes taking cached subs at time zero and fetched subs as they land
  // (greedy earliest-free assignment).
  double pipeline_makespan(const std::vector<SubTask>& tasks, std::size_t fetched_base) const {
    std::vector<std::pair<double, std::size_t>> ready;  // (available time, task)
    for (std::size_t i = 0; i < fetched_base; ++i) ready.push_back({0.0, i});
    double fetch_done = 0, deser_done = 0;
    for (std::size_t i = fetched_base; i < tasks.size(); ++i) {
      if (!tasks[i].entry) continue;  // failed: never reached the search stage
      fetch_done += tasks[i].t_fetch;
      deser_done = std::max(deser_done, fetch_done) + tasks[i].t_deser;
      ready.push_back({deser_done, i});
    }
    std::vector<double> lane_free(std::max<u32>(params_.search_workers, 1), 0.0);
    double makespan = 0;
    for (auto [avail, idx] : ready) {
      auto lane = std::min_element(lane_free.begin(), lane_free.end());
      double done = std::max(*lane, avail) + tasks[idx].t_search;
      *lane = done;
      makespan = std::max(makespan, done);
    }
    return makespan;
  }

  MemoryFabric* fabric_;
  RegionHandle region_;
  GlobalMeta meta_;
  MetaIndex meta_index_;
  EngineParams params_;
  SubCache cache_;
  u64 batch_seq_ = 0;
  QueryBatch carry_;
  std::vector<std::vector<u64>> carry_gt_;
};

}  // namespace farann
