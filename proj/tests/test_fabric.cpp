#include <gtest/gtest.h>

#include <thread>

#include "farann/fabric.hpp"

using namespace farann;

namespace {

std::vector<std::byte> bytes_of(std::initializer_list<int> xs) {
  std::vector<std::byte> out;
  for (int x : xs) out.push_back(std::byte(x));
  return out;
}

}  // namespace

TEST(CostModel, SingleOpAndDoorbellFormulas) {
  FabricCostModel m;  // rtt 5us, 12.5 GB/s, 0.2us per op
  EXPECT_DOUBLE_EQ(single_op_cost(m, 0), 5e-6);
  EXPECT_DOUBLE_EQ(single_op_cost(m, 12500), 5e-6 + 12500 / 12.5e9);
  EXPECT_DOUBLE_EQ(doorbell_cost(m, 4, 1000), 5e-6 + 1000 / 12.5e9 + 4 * 2e-7);
  // one round trip amortized across ops: batching n small ops always beats n
  // singles when rtt exceeds the per-op overhead
  double n_singles = 8 * single_op_cost(m, 64);
  double batched = doorbell_cost(m, 8, 8 * 64);
  EXPECT_LT(batched, n_singles);
  EXPECT_THROW(FabricCostModel({-1.0, 1.0, 0.0}).validate(), ContractError);
}

TEST(Fabric, RegisterReadWriteRoundtrip) {
  MemoryFabric fab;
  RegionHandle r = fab.register_region(256);
  EXPECT_TRUE(r.valid());
  EXPECT_EQ(r.size, 256u);
  // fresh regions read back zeroed
  auto zeros = fab.read(r, 0, 16);
  for (auto b : zeros) EXPECT_EQ(std::to_integer<int>(b), 0);

  auto payload = bytes_of({1, 2, 3, 4});
  fab.write(r, 100, payload);
  EXPECT_EQ(fab.read(r, 100, 4), payload);
  EXPECT_EQ(fab.read(r, 99, 1), bytes_of({0}));
}

TEST(Fabric, BoundsAndUnknownRegionErrors) {
  MemoryFabric fab;
  RegionHandle r = fab.register_region(64);
  EXPECT_THROW(fab.read(r, 60, 8), FabricError);
  EXPECT_THROW(fab.read({r.id + 7, 64}, 0, 8), FabricError);
  EXPECT_THROW(fab.write(r, 64, bytes_of({1})), FabricError);
  fab.release_region(r);
  EXPECT_THROW(fab.read(r, 0, 1), FabricError);
  EXPECT_THROW(fab.release_region(r), FabricError);
}

TEST(Fabric, StatsChargeExactModelTime) {
  FabricCostModel m;
  MemoryFabric fab(m);
  RegionHandle r = fab.register_region(4096);
  fab.read(r, 0, 1000);
  fab.write(r, 0, std::vector<std::byte>(500));
  std::vector<FabricOp> ops;
  ops.push_back(FabricOp::read(r, 0, 200));
  ops.push_back(FabricOp::write(r, 300, bytes_of({1, 2})));
  fab.doorbell(ops);

  FabricStats s = fab.stats();
  EXPECT_EQ(s.reads, 2u);
  EXPECT_EQ(s.writes, 2u);
  EXPECT_EQ(s.doorbell_batches, 1u);
  EXPECT_EQ(s.bytes_moved, 1000u + 500u + 202u);
  double want = single_op_cost(m, 1000) + single_op_cost(m, 500) + doorbell_cost(m, 2, 202);
  EXPECT_DOUBLE_EQ(s.simulated_time_charged, want);
}

TEST(Fabric, TraceRecordsIssueOrder) {
  MemoryFabric fab;
  RegionHandle r = fab.register_region(128);
  fab.write(r, 0, bytes_of({1}));
  fab.read(r, 4, 2);
  std::vector<FabricOp> ops;
  ops.push_back(FabricOp::read(r, 8, 8));
  ops.push_back(FabricOp::write(r, 16, bytes_of({2, 3})));
  fab.doorbell(ops);

  auto trace = fab.trace();
  ASSERT_EQ(trace.size(), 4u);
  EXPECT_EQ(trace[0].kind, FabricOp::Kind::Write);
  EXPECT_EQ(trace[1].kind, FabricOp::Kind::Read);
  EXPECT_EQ(trace[1].offset, 4u);
  // both doorbell ops share one batch id, distinct from the singles
  EXPECT_EQ(trace[2].batch, trace[3].batch);
  EXPECT_NE(trace[1].batch, trace[2].batch);

  fab.clear_trace();
  EXPECT_TRUE(fab.trace().empty());
  fab.set_trace_enabled(false);
  fab.read(r, 0, 1);
  EXPECT_TRUE(fab.trace().empty());
}

TEST(Doorbell, AppliesInListOrder) {
  MemoryFabric fab;
  RegionHandle r = fab.register_region(64);
  std::vector<FabricOp> ops;
  ops.push_back(FabricOp::write(r, 0, bytes_of({7, 8, 9})));
  ops.push_back(FabricOp::read(r, 0, 3));  // sees the write from the same batch
  auto results = fab.doorbell(ops);
  ASSERT_EQ(results.size(), 1u);  // one result per read
  EXPECT_EQ(results[0], bytes_of({7, 8, 9}));
}

TEST(Doorbell, AtomicOnInvalidDescriptor) {
  MemoryFabric fab;
  RegionHandle r = fab.register_region(64);
  std::vector<FabricOp> ops;
  ops.push_back(FabricOp::write(r, 0, bytes_of({1, 1, 1})));
  ops.push_back(FabricOp::write(r, 62, bytes_of({2, 2, 2})));  // out of bounds
  EXPECT_THROW(fab.doorbell(ops), FabricError);
  // nothing from the batch landed
  EXPECT_EQ(fab.read(r, 0, 3), bytes_of({0, 0, 0}));
}

TEST(Doorbell, EnforcesBatchLimits) {
  MemoryFabric fab(FabricCostModel{}, 4);
  RegionHandle r = fab.register_region(64);
  std::vector<FabricOp> ops;
  EXPECT_THROW(fab.doorbell(ops), ContractError);
  for (int i = 0; i < 5; ++i) ops.push_back(FabricOp::read(r, 0, 1));
  EXPECT_THROW(fab.doorbell(ops), ContractError);

  // the chunked helper splits and preserves order
  ops.clear();
  for (int i = 0; i < 10; ++i) ops.push_back(FabricOp::write(r, u64(i), bytes_of({i})));
  for (int i = 0; i < 10; ++i) ops.push_back(FabricOp::read(r, u64(i), 1));
  auto results = doorbell_chunked(fab, ops);
  ASSERT_EQ(results.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(results[i], bytes_of({i}));
  EXPECT_EQ(fab.stats().doorbell_batches, 5u);
  EXPECT_EQ(chunked_round_trips(20, 4), 5u);
}

TEST(FaultInjection, FailsBeforeMutation) {
  MemoryFabric fab;
  RegionHandle r = fab.register_region(64);
  fab.write(r, 0, bytes_of({5}));
  fab.fail_next(2);
  EXPECT_THROW(fab.write(r, 0, bytes_of({9})), FabricError);
  std::vector<FabricOp> ops;
  ops.push_back(FabricOp::write(r, 0, bytes_of({9})));
  EXPECT_THROW(fab.doorbell(ops), FabricError);
  // after the armed failures drain, the region is untouched and usable
  EXPECT_EQ(fab.read(r, 0, 1), bytes_of({5}));
  fab.write(r, 0, bytes_of({9}));
  EXPECT_EQ(fab.read(r, 0, 1), bytes_of({9}));
}

TEST(Fabric, ConcurrentWritersStayConsistent) {
  MemoryFabric fab;
  RegionHandle r = fab.register_region(2048);
  auto worker = [&](int base) {
    for (int i = 0; i < 64; ++i) fab.write(r, u64(base + i), bytes_of({(base + i) % 251}));
  };
  std::thread a(worker, 0), b(worker, 1024);
  a.join();
  b.join();
  for (int i = 0; i < 64; ++i) {
    EXPECT_EQ(fab.read(r, u64(i), 1), bytes_of({i % 251}));
    EXPECT_EQ(fab.read(r, u64(1024 + i), 1), bytes_of({(1024 + i) % 251}));
  }
}
