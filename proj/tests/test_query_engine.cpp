#include <gtest/gtest.h>

#include <set>
#include <unordered_map>

#include "farann/query_engine.hpp"
#include "farann/synthetic.hpp"
#include "test_support.hpp"

using namespace farann;
using farann::testing::build_system;
using farann::testing::BuiltSystem;
using farann::testing::true_topk_labels;

namespace {

VectorStore line_centroids(std::initializer_list<float> xs) {
  VectorStore s(2, Metric::L2);
  for (float x : xs) {
    std::vector<float> v{x, 0.0f};
    s.append(v);
  }
  return s;
}

QueryBatch line_queries(std::initializer_list<float> xs, u32 k, u32 r) {
  QueryBatch b;
  b.queries = VectorStore(2, Metric::L2);
  for (float x : xs) {
    std::vector<float> v{x, 0.0f};
    b.queries.append(v);
  }
  b.k = k;
  b.r = r;
  return b;
}

HnswParams small_graph() {
  HnswParams gp;
  gp.m = 8;
  gp.e_build = 48;
  return gp;
}

}  // namespace

TEST(MetaIndexTest, StaysShallowAndRoutesExactly) {
  MixtureSpec spec{.count = 60, .dim = 8, .components = 6, .seed = 11};
  VectorStore centroids = make_mixture(spec);
  MetaIndex meta = build_meta_index(centroids, /*e_meta=*/64, /*seed=*/5);
  EXPECT_EQ(meta.graph.node_count(), 60u);
  EXPECT_LE(meta.graph.top_level(), 2);  // never more than three layers

  // with e_meta at the node count routing is an exhaustive scan, so the
  // result must equal the brute-force nearest centroids
  MetaIndex wide = build_meta_index(centroids, /*e_meta=*/60, /*seed=*/5);
  VectorStore queries = make_mixture_queries(spec, 20);
  for (std::size_t qi = 0; qi < queries.count(); ++qi) {
    auto got = route(wide, queries.row(qi), 4);
    auto want = brute_force_topk(centroids, queries.row(qi), 4);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t j = 0; j < got.size(); ++j) EXPECT_EQ(got[j], u32(want[j].id));
  }
  EXPECT_THROW(route(wide, queries.row(0), 61), ContractError);
}

TEST(PlanBatch, DemandOrderingAndCacheSplit) {
  VectorStore centroids = line_centroids({0, 10, 20, 30});
  MetaIndex meta = build_meta_index(centroids, /*e_meta=*/8, /*seed=*/3);
  SubCache cache(8);

  // routes with R=2: q0 -> {0,1}, q1 -> {1,2}, q2 -> {1,0}, q3 -> {2,3}
  QueryBatch batch = line_queries({1, 11, 9, 21}, /*k=*/1, /*r=*/2);
  BatchPlan plan = plan_batch(batch, meta, cache, 1.0);
  ASSERT_EQ(plan.included.size(), 4u);
  EXPECT_TRUE(plan.deferred.empty());
  ASSERT_EQ(plan.routes.size(), 4u);
  EXPECT_EQ(plan.routes[0], (std::vector<u32>{0, 1}));
  EXPECT_EQ(plan.routes[1], (std::vector<u32>{1, 2}));
  EXPECT_EQ(plan.routes[3], (std::vector<u32>{2, 3}));

  // demand: sub1 x3, sub0 x2, sub2 x2, sub3 x1; ties break on ascending id
  EXPECT_EQ(plan.fetch_list, (std::vector<u32>{1, 0, 2, 3}));
  EXPECT_EQ(plan.demand.at(1), (std::vector<u32>{0, 1, 2}));
  EXPECT_TRUE(plan.ready_list.empty());

  // a cached sub moves to the ready list; relative order stays demand-major
  VectorStore one(2, Metric::L2);
  std::vector<float> v{0.0f, 0.0f};
  one.append(v);
  cache.insert(SubEntry::from_index(0, HnswIndex::build(one, small_graph())));
  BatchPlan split = plan_batch(batch, meta, cache, 1.0);
  EXPECT_EQ(split.ready_list, (std::vector<u32>{0}));
  EXPECT_EQ(split.fetch_list, (std::vector<u32>{1, 2, 3}));
  ASSERT_EQ(split.ready_entries.size(), 1u);
  EXPECT_EQ(split.ready_entries[0]->sub_id, 0u);
}

TEST(PlanBatch, WaitBudgetTruncatesTail) {
  VectorStore centroids = line_centroids({0, 10});
  MetaIndex meta = build_meta_index(centroids, 8, 3);
  SubCache cache(2);

  QueryBatch batch = line_queries({1, 2, 3, 4}, 1, 1);
  batch.arrival_times = {0.0, 0.5, 1.0, 1.0625};
  BatchPlan plan = plan_batch(batch, meta, cache, /*slo_wait=*/1.0);
  EXPECT_EQ(plan.included, (std::vector<u32>{0, 1, 2}));  // exactly 1.0 still admitted
  EXPECT_EQ(plan.deferred, (std::vector<u32>{3}));

  // everything after the first over-budget query defers, even if early
  batch.arrival_times = {0.0, 1.5, 0.2, 0.3};
  BatchPlan tail = plan_batch(batch, meta, cache, 1.0);
  EXPECT_EQ(tail.included, (std::vector<u32>{0}));
  EXPECT_EQ(tail.deferred, (std::vector<u32>{1, 2, 3}));

  batch.arrival_times = {0.0, 0.1};
  EXPECT_THROW(plan_batch(batch, meta, cache, 1.0), ContractError);  // size mismatch
}

TEST(MergeTopk, DeduplicatesAndOrders) {
  std::vector<std::vector<Hit>> partials{{{1.0, 5}, {2.0, 7}}, {{1.5, 5}, {0.5, 9}}};
  auto out = merge_topk(partials, 3);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].id, 9u);
  EXPECT_DOUBLE_EQ(out[0].dist, 0.5);
  EXPECT_EQ(out[1].id, 5u);
  EXPECT_DOUBLE_EQ(out[1].dist, 1.0);  // duplicate id 5 kept its best distance
  EXPECT_EQ(out[2].id, 7u);

  auto all = merge_topk(partials, 10);
  EXPECT_EQ(all.size(), 3u);  // only three distinct ids exist

  // merging is set-valued: partial order and grouping cannot matter
  std::vector<std::vector<Hit>> regrouped{{{0.5, 9}}, {{2.0, 7}, {1.5, 5}}, {{1.0, 5}}};
  auto out2 = merge_topk(regrouped, 3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].id, out2[i].id);
    EXPECT_DOUBLE_EQ(out[i].dist, out2[i].dist);
  }
}

TEST(SubCacheTest, LruEvictionAndCounters) {
  VectorStore one(2, Metric::L2);
  std::vector<float> v{0.0f, 0.0f};
  one.append(v);
  auto entry = [&](u32 id) { return SubEntry::from_index(id, HnswIndex::build(one, small_graph())); };

  SubCache cache(2);
  EXPECT_EQ(cache.capacity(), 2u);
  EXPECT_EQ(SubCache(0).capacity(), 1u);  // floor of one resident sub

  cache.insert(entry(1));
  cache.insert(entry(2));
  EXPECT_TRUE(cache.lookup(1) != nullptr);  // refreshes 1 to MRU
  cache.insert(entry(3));                   // evicts LRU = 2
  EXPECT_TRUE(cache.contains(1));
  EXPECT_FALSE(cache.contains(2));
  EXPECT_TRUE(cache.contains(3));
  EXPECT_EQ(cache.resident_ids(), (std::vector<u32>{3, 1}));

  EXPECT_EQ(cache.hits(), 1u);
  EXPECT_TRUE(cache.lookup(2) == nullptr);
  EXPECT_EQ(cache.misses(), 1u);

  cache.erase(3);
  EXPECT_EQ(cache.size(), 1u);
  cache.clear();
  EXPECT_EQ(cache.size(), 0u);
}

TEST(QueryEngineTest, ExhaustiveConfigMatchesBruteForceExactly) {
  MemoryFabric fab;
  MixtureSpec spec{.count = 400, .dim = 8, .components = 6, .seed = 21};
  VectorStore base = make_mixture(spec);
  BuiltSystem sys = build_system(fab, base, /*partitions=*/5, small_graph(), GapPolicy{0.1, 0.25});

  EngineParams ep;
  ep.e_sub = u32(sys.max_sub_size);  // exhaustive inside every sub
  ep.cache_capacity = 5;
  QueryEngine engine(fab, sys.region(), sys.meta(), sys.meta_index, ep);

  QueryBatch batch;
  batch.queries = make_mixture_queries(spec, 25);
  batch.k = 10;
  batch.r = 5;  // probe every partition
  BatchResult res = engine.run_batch(batch);

  for (std::size_t qi = 0; qi < batch.queries.count(); ++qi) {
    auto want = brute_force_topk(base, batch.queries.row(qi), batch.k);
    const auto& got = res.per_query[qi].hits;
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t j = 0; j < want.size(); ++j) {
      EXPECT_EQ(got[j].id, want[j].id) << "query " << qi << " rank " << j;
      EXPECT_DOUBLE_EQ(got[j].dist, want[j].dist);
    }
    EXPECT_FALSE(res.per_query[qi].degraded);
  }
  EXPECT_EQ(res.metrics.batch_size, 25u);
  EXPECT_EQ(res.metrics.fetched + res.metrics.cache_hits, 5u);
}

TEST(QueryEngineTest, EachRoutedSubFetchedOncePerBatch) {
  MemoryFabric fab;
  MixtureSpec spec{.count = 300, .dim = 8, .components = 8, .seed = 31};
  VectorStore base = make_mixture(spec);
  BuiltSystem sys = build_system(fab, base, /*partitions=*/8, small_graph(), GapPolicy{0.1, 0.25});

  EngineParams ep;
  ep.cache_capacity = 8;
  ep.refresh_meta_each_batch = false;  // keep the trace to fetch traffic only
  QueryEngine engine(fab, sys.region(), sys.meta(), sys.meta_index, ep);

  QueryBatch batch;
  batch.queries = make_mixture_queries(spec, 32);
  batch.k = 5;
  batch.r = 3;

  fab.set_trace_enabled(true);
  fab.clear_trace();
  BatchResult first = engine.run_batch(batch);
  auto trace = fab.trace();

  // demanded subs overlap heavily across 32 queries, yet each distinct sub
  // costs one doorbell; base offsets identify which sub a read touched
  std::set<u64> batch_ids;
  std::unordered_map<u64, int> base_reads;
  for (const auto& e : trace) {
    batch_ids.insert(e.batch);
    for (u32 s = 0; s < sys.meta().partition_count; ++s)
      if (e.offset == sys.meta().subs[s].base_offset) ++base_reads[s];
  }
  EXPECT_EQ(batch_ids.size(), std::size_t(first.metrics.fetched));
  EXPECT_GT(first.metrics.fetched, 0u);
  EXPECT_EQ(base_reads.size(), std::size_t(first.metrics.fetched));
  for (const auto& [sub, n] : base_reads) EXPECT_EQ(n, 1) << "sub " << sub << " fetched twice";

  // the same batch again is served entirely from cache: zero fabric traffic
  fab.clear_trace();
  BatchResult second = engine.run_batch(batch);
  EXPECT_EQ(second.metrics.fetched, 0u);
  EXPECT_EQ(second.metrics.cache_hits, first.metrics.fetched);
  EXPECT_TRUE(fab.trace().empty());
  EXPECT_DOUBLE_EQ(second.metrics.t_net, 0.0);
  for (std::size_t qi = 0; qi < batch.queries.count(); ++qi) {
    ASSERT_EQ(second.per_query[qi].hits.size(), first.per_query[qi].hits.size());
    for (std::size_t j = 0; j < first.per_query[qi].hits.size(); ++j)
      EXPECT_EQ(second.per_query[qi].hits[j].id, first.per_query[qi].hits[j].id);
  }
}

TEST(QueryEngineTest, DeferredQueriesLeadTheNextBatch) {
  MemoryFabric fab;
  MixtureSpec spec{.count = 200, .dim = 8, .components = 4, .seed = 41};
  VectorStore base = make_mixture(spec);
  BuiltSystem sys = build_system(fab, base, /*partitions=*/4, small_graph(), GapPolicy{0.1, 0.25});

  EngineParams ep;
  ep.e_sub = u32(sys.max_sub_size);
  ep.cache_capacity = 4;
  ep.slo_wait = 1.0;
  QueryEngine engine(fab, sys.region(), sys.meta(), sys.meta_index, ep);

  QueryBatch batch;
  batch.queries = make_mixture_queries(spec, 3);
  batch.k = 5;
  batch.r = 4;
  batch.arrival_times = {0.0, 0.2, 7.5};  // the last misses the wait budget

  BatchResult res = engine.run_batch(batch);
  EXPECT_EQ(res.metrics.batch_size, 2u);
  EXPECT_EQ(res.metrics.deferred, 1u);
  EXPECT_TRUE(res.per_query[2].deferred);
  EXPECT_TRUE(res.per_query[2].hits.empty());
  EXPECT_FALSE(res.per_query[0].deferred);

  // the held query leads the next batch under its original arrival time, so
  // a much later fresh query defers rather than stretch the held one's wait
  QueryBatch next;
  next.queries = make_mixture_queries(MixtureSpec{.count = 0, .dim = 8, .components = 4, .seed = 43}, 1);
  next.k = 5;
  next.r = 4;
  next.arrival_times = {100.0};
  BatchResult res2 = engine.run_batch(next);
  ASSERT_EQ(res2.per_query.size(), 2u);
  EXPECT_EQ(res2.metrics.batch_size, 1u);
  EXPECT_TRUE(res2.per_query[1].deferred);
  auto want = brute_force_topk(base, batch.queries.row(2), 5);
  const auto& got = res2.per_query[0].hits;
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t j = 0; j < want.size(); ++j) EXPECT_EQ(got[j].id, want[j].id);

  // a third call arriving within the budget of the now-carried query joins it
  QueryBatch third;
  third.queries = make_mixture_queries(MixtureSpec{.count = 0, .dim = 8, .components = 4, .seed = 47}, 1);
  third.k = 5;
  third.r = 4;
  third.arrival_times = {100.5};
  BatchResult res3 = engine.run_batch(third);
  ASSERT_EQ(res3.per_query.size(), 2u);
  EXPECT_EQ(res3.metrics.batch_size, 2u);
  auto want2 = brute_force_topk(base, next.queries.row(0), 5);
  const auto& got2 = res3.per_query[0].hits;
  ASSERT_EQ(got2.size(), want2.size());
  for (std::size_t j = 0; j < want2.size(); ++j) EXPECT_EQ(got2[j].id, want2[j].id);
}

TEST(QueryEngineTest, FailedFetchDegradesOnlyAffectedQueries) {
  MemoryFabric fab;
  MixtureSpec spec{.count = 240, .dim = 8, .components = 4, .seed = 51};
  VectorStore base = make_mixture(spec);
  BuiltSystem sys = build_system(fab, base, /*partitions=*/4, small_graph(), GapPolicy{0.1, 0.25});

  EngineParams ep;
  ep.e_sub = u32(sys.max_sub_size);
  ep.cache_capacity = 4;
  ep.refresh_meta_each_batch = false;
  QueryEngine engine(fab, sys.region(), sys.meta(), sys.meta_index, ep);

  QueryBatch batch;
  batch.queries = make_mixture_queries(spec, 1);
  batch.k = 5;
  batch.r = 2;

  // the first planned fetch fails twice (initial try plus the retry); the
  // second sub loads fine, so the query degrades but still answers
  BatchPlan plan = plan_batch(batch, engine.meta_index(), engine.cache(), ep.slo_wait);
  ASSERT_EQ(plan.fetch_list.size(), 2u);
  u32 failed_sub = plan.fetch_list[0];
  u32 ok_sub = plan.fetch_list[1];
  fab.fail_next(2);
  BatchResult res = engine.run_batch(batch);
  EXPECT_EQ(res.metrics.degraded_subs, 1u);
  EXPECT_TRUE(res.per_query[0].degraded);
  EXPECT_FALSE(res.per_query[0].hits.empty());
  EXPECT_FALSE(engine.cache().contains(failed_sub));
  EXPECT_TRUE(engine.cache().contains(ok_sub));

  // answers equal an exhaustive scan of the surviving sub alone
  VectorStore survivor(base.dim, base.metric);
  std::vector<u64> survivor_labels;
  for (std::size_t i = 0; i < base.count(); ++i)
    if (sys.parts.assignment[i] == ok_sub) {
      survivor.append(base.row(i));
      survivor_labels.push_back(u64(i));
    }
  auto want = brute_force_topk(survivor, batch.queries.row(0), 5);
  const auto& got = res.per_query[0].hits;
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t j = 0; j < want.size(); ++j)
    EXPECT_EQ(got[j].id, survivor_labels[std::size_t(want[j].id)]);

  // the fabric healed, so the next batch recovers the failed sub
  BatchResult res2 = engine.run_batch(batch);
  EXPECT_EQ(res2.metrics.degraded_subs, 0u);
  EXPECT_FALSE(res2.per_query[0].degraded);
}

TEST(QueryEngineTest, PipelineMatchesSequentialResultsAndNeverSlower) {
  MemoryFabric fab;
  MixtureSpec spec{.count = 600, .dim = 16, .components = 10, .seed = 61};
  VectorStore base = make_mixture(spec);
  BuiltSystem sys = build_system(fab, base, /*partitions=*/10, small_graph(), GapPolicy{0.1, 0.25});

  QueryBatch batch;
  batch.queries = make_mixture_queries(spec, 40);
  batch.k = 10;
  batch.r = 4;

  EngineParams pipelined;
  pipelined.cache_capacity = 10;
  EngineParams sequential = pipelined;
  sequential.pipelined = false;

  QueryEngine eng_p(fab, sys.region(), sys.meta(), sys.meta_index, pipelined);
  QueryEngine eng_s(fab, sys.region(), sys.meta(), sys.meta_index, sequential);
  BatchResult rp = eng_p.run_batch(batch);
  BatchResult rs = eng_s.run_batch(batch);

  for (std::size_t qi = 0; qi < batch.queries.count(); ++qi) {
    ASSERT_EQ(rp.per_query[qi].hits.size(), rs.per_query[qi].hits.size());
    for (std::size_t j = 0; j < rp.per_query[qi].hits.size(); ++j) {
      EXPECT_EQ(rp.per_query[qi].hits[j].id, rs.per_query[qi].hits[j].id);
      EXPECT_DOUBLE_EQ(rp.per_query[qi].hits[j].dist, rs.per_query[qi].hits[j].dist);
    }
  }
  // stage totals are interleaving-independent, only the makespan differs
  EXPECT_DOUBLE_EQ(rp.metrics.t_net, rs.metrics.t_net);
  EXPECT_DOUBLE_EQ(rp.metrics.t_deser, rs.metrics.t_deser);
  EXPECT_DOUBLE_EQ(rp.metrics.t_comp, rs.metrics.t_comp);
  EXPECT_DOUBLE_EQ(rs.metrics.t_pipeline, rs.metrics.t_sequential);
  ASSERT_GE(rp.metrics.fetched, 2u);
  EXPECT_LT(rp.metrics.t_pipeline, rs.metrics.t_pipeline);
  EXPECT_GE(rp.metrics.t_pipeline,
            std::max({rp.metrics.t_net, rp.metrics.t_deser, rp.metrics.t_comp}));
}

TEST(QueryEngineTest, WorkerCountDoesNotChangeAnswers) {
  MemoryFabric fab;
  MixtureSpec spec{.count = 300, .dim = 8, .components = 6, .seed = 71};
  VectorStore base = make_mixture(spec);
  BuiltSystem sys = build_system(fab, base, /*partitions=*/6, small_graph(), GapPolicy{0.1, 0.25});

  QueryBatch batch;
  batch.queries = make_mixture_queries(spec, 30);
  batch.k = 8;
  batch.r = 3;

  EngineParams one;
  one.cache_capacity = 6;
  EngineParams four = one;
  four.search_workers = 4;
  QueryEngine e1(fab, sys.region(), sys.meta(), sys.meta_index, one);
  QueryEngine e4(fab, sys.region(), sys.meta(), sys.meta_index, four);
  BatchResult r1 = e1.run_batch(batch);
  BatchResult r4 = e4.run_batch(batch);
  for (std::size_t qi = 0; qi < batch.queries.count(); ++qi) {
    ASSERT_EQ(r1.per_query[qi].hits.size(), r4.per_query[qi].hits.size());
    for (std::size_t j = 0; j < r1.per_query[qi].hits.size(); ++j)
      EXPECT_EQ(r1.per_query[qi].hits[j].id, r4.per_query[qi].hits[j].id);
  }
}

TEST(QueryEngineTest, RecallAccountingAndEpochAdoption) {
  MemoryFabric fab;
  MixtureSpec spec{.count = 200, .dim = 8, .components = 4, .seed = 81};
  VectorStore base = make_mixture(spec);
  BuiltSystem sys = build_system(fab, base, /*partitions=*/4, small_graph(), GapPolicy{0.1, 0.25});

  EngineParams ep;
  ep.e_sub = u32(sys.max_sub_size);
  ep.cache_capacity = 4;
  QueryEngine engine(fab, sys.region(), sys.meta(), sys.meta_index, ep);

  QueryBatch batch;
  batch.queries = make_mixture_queries(spec, 10);
  batch.k = 5;
  batch.r = 4;
  auto gt = true_topk_labels(base, {}, batch.queries, batch.k);
  BatchResult res = engine.run_batch(batch, &gt);
  EXPECT_DOUBLE_EQ(res.metrics.recall, 1.0);  // exhaustive config, R = P

  std::string row = to_csv_row(res.metrics);
  EXPECT_EQ(metrics_csv_header(),
            "batch_id,B,fetched,cache_hits,t_meta,t_net,t_deser,t_comp,t_pipeline,recall");
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 9);
  EXPECT_EQ(row.substr(row.size() - 2), ",1");  // recall printed

  ExecutionMetrics blank;
  std::string no_gt = to_csv_row(blank);
  EXPECT_EQ(no_gt.back(), ',');  // recall column empty without ground truth

  EXPECT_GT(engine.cache().size(), 0u);
  engine.adopt_epoch(sys.region(), sys.meta(), build_meta_index(sys.parts.centroids, 64, 9));
  EXPECT_EQ(engine.cache().size(), 0u);  // epoch switch cold-starts the cache
}

TEST(QueryEngineTest, DefaultCacheCapacityDerivesFromPartitionCount) {
  MemoryFabric fab;
  MixtureSpec spec{.count = 150, .dim = 4, .components = 3, .seed = 91};
  VectorStore base = make_mixture(spec);
  BuiltSystem sys = build_system(fab, base, /*partitions=*/3, small_graph(), GapPolicy{0.1, 0.25});

  EngineParams ep;  // cache_capacity 0 derives max(1, P/10)
  QueryEngine small(fab, sys.region(), sys.meta(), sys.meta_index, ep);
  EXPECT_EQ(small.cache().capacity(), 1u);

  GlobalMeta wide_meta = sys.meta();
  wide_meta.partition_count = 50;  // capacity probe only, never dereferenced
  wide_meta.subs.resize(50);
  QueryEngine wide(fab, sys.region(), wide_meta, build_meta_index(sys.parts.centroids, 64, 9), ep);
  EXPECT_EQ(wide.cache().capacity(), 5u);
}
