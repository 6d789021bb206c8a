#include <gtest/gtest.h>

#include <cmath>

#include "farann/synthetic.hpp"
#include "farann/vectors.hpp"
#include "test_support.hpp"

using namespace farann;

TEST(Codecs, ScalarRoundtrip) {
  std::vector<std::byte> buf(16);
  store_u32(buf.data(), 0xdeadbeefu);
  EXPECT_EQ(load_u32(buf.data()), 0xdeadbeefu);
  store_u64(buf.data() + 1, 0x0123456789abcdefull);  // unaligned on purpose
  EXPECT_EQ(load_u64(buf.data() + 1), 0x0123456789abcdefull);
  store_f32(buf.data(), -1.5f);
  EXPECT_EQ(load_f32(buf.data()), -1.5f);

  // little-endian byte order is part of the format
  store_u32(buf.data(), 0x01020304u);
  EXPECT_EQ(std::to_integer<int>(buf[0]), 0x04);
  EXPECT_EQ(std::to_integer<int>(buf[3]), 0x01);
}

TEST(Codecs, AppendHelpers) {
  std::vector<std::byte> buf;
  append_u32(buf, 7);
  append_u64(buf, 9);
  ASSERT_EQ(buf.size(), 12u);
  EXPECT_EQ(load_u32(buf.data()), 7u);
  EXPECT_EQ(load_u64(buf.data() + 4), 9u);
}

TEST(Codecs, RoundUp) {
  EXPECT_EQ(round_up(0, 4), 0u);
  EXPECT_EQ(round_up(1, 4), 4u);
  EXPECT_EQ(round_up(4, 4), 4u);
  EXPECT_EQ(round_up(13, 8), 16u);
  EXPECT_EQ(round_up(63, 64), 64u);
}

TEST(Seeding, StreamsAreIndependent) {
  EXPECT_NE(mix_seed(1, 0), mix_seed(1, 1));
  EXPECT_NE(mix_seed(1, 0), mix_seed(2, 0));
  EXPECT_EQ(mix_seed(42, 3), mix_seed(42, 3));
  auto a = make_rng(5, 0), b = make_rng(5, 0), c = make_rng(5, 1);
  EXPECT_EQ(a(), b());
  EXPECT_NE(a(), c());
}

TEST(ParallelFor, CoversEveryIndexOnce) {
  std::vector<int> touched(1000, 0);
  parallel_for(touched.size(), 4, [&](std::size_t i) { touched[i] += 1; });
  for (int t : touched) EXPECT_EQ(t, 1);
}

TEST(ParallelFor, RethrowsWorkerException) {
  EXPECT_THROW(parallel_for(100, 4,
                            [&](std::size_t i) {
                              if (i == 57) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Distance, L2IsSquaredEuclidean) {
  std::vector<float> a{1.0f, 2.0f}, b{4.0f, 6.0f};
  EXPECT_DOUBLE_EQ(distance_l2sq(a, b), 25.0);
  EXPECT_DOUBLE_EQ(distance_l2sq(a, a), 0.0);
}

TEST(Distance, AngularIsOneMinusCosine) {
  std::vector<float> x{1.0f, 0.0f}, y{0.0f, 1.0f}, nx{-1.0f, 0.0f}, x2{2.0f, 0.0f};
  EXPECT_DOUBLE_EQ(distance_angular(x, y), 1.0);
  EXPECT_DOUBLE_EQ(distance_angular(x, nx), 2.0);
  EXPECT_NEAR(distance_angular(x, x2), 0.0, 1e-12);
  // zero vectors carry no direction; treated as orthogonal to everything
  std::vector<float> z{0.0f, 0.0f};
  EXPECT_DOUBLE_EQ(distance_angular(x, z), 1.0);
}

TEST(Distance, DimensionMismatchThrows) {
  std::vector<float> a{1.0f, 2.0f}, b{1.0f};
  EXPECT_THROW(distance(a, b, Metric::L2), ContractError);
}

TEST(Hits, OrderIsDistanceThenId) {
  Hit a{1.0, 5}, b{1.0, 7}, c{2.0, 0};
  EXPECT_LT(a, b);
  EXPECT_LT(b, c);
  EXPECT_FALSE(b < a);
}

TEST(BruteForce, ExactWithDeterministicTies) {
  VectorStore s(2, Metric::L2);
  s.append(std::vector<float>{0, 1});   // id 0, dist 1
  s.append(std::vector<float>{1, 0});   // id 1, dist 1 (tie with id 0)
  s.append(std::vector<float>{0, 0});   // id 2, dist 0
  s.append(std::vector<float>{3, 0});   // id 3, dist 9
  std::vector<float> q{0, 0};
  auto hits = brute_force_topk(s, q, 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].id, 2u);
  EXPECT_EQ(hits[1].id, 0u);  // tie broken by smaller id
  EXPECT_EQ(hits[2].id, 1u);

  auto all = brute_force_topk(s, q, 99);
  EXPECT_EQ(all.size(), 4u);
}

TEST(VectorStore, RowAccessAndAppend) {
  VectorStore s(3, Metric::L2);
  EXPECT_EQ(s.count(), 0u);
  s.append(std::vector<float>{1, 2, 3});
  s.append(std::vector<float>{4, 5, 6});
  ASSERT_EQ(s.count(), 2u);
  EXPECT_EQ(s.row(1)[0], 4.0f);
  EXPECT_THROW(s.append(std::vector<float>{1, 2}), ContractError);
}

TEST(VecsIo, FvecsRoundtrip) {
  farann::testing::TempDir dir("fvecs");
  VectorStore s(4, Metric::Angular);
  auto rng = make_rng(3);
  std::uniform_real_distribution<float> u(-1, 1);
  for (int i = 0; i < 37; ++i) {
    std::vector<float> row(4);
    for (auto& x : row) x = u(rng);
    s.append(row);
  }
  auto path = dir.path() / "data.fvecs";
  save_fvecs(path, s);
  VectorStore back = load_fvecs(path, Metric::Angular);
  ASSERT_EQ(back.count(), s.count());
  ASSERT_EQ(back.dim, s.dim);
  EXPECT_EQ(back.data, s.data);  // bitwise
}

TEST(VecsIo, IvecsRoundtrip) {
  farann::testing::TempDir dir("ivecs");
  std::vector<std::vector<u32>> rows{{1, 2, 3}, {}, {9}};
  auto path = dir.path() / "gt.ivecs";
  save_ivecs(path, rows);
  EXPECT_EQ(load_ivecs(path), rows);
}

TEST(VecsIo, TruncatedRecordThrowsWithOffset) {
  farann::testing::TempDir dir("badvecs");
  auto path = dir.path() / "bad.fvecs";
  {
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    std::int32_t d = 8;
    std::fwrite(&d, sizeof d, 1, f);
    float x = 1.0f;
    std::fwrite(&x, sizeof x, 1, f);  // 1 of 8 payload floats
    std::fclose(f);
  }
  try {
    load_fvecs(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(VecsIo, InconsistentDimThrows) {
  farann::testing::TempDir dir("mixdim");
  auto path = dir.path() / "mix.fvecs";
  {
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    std::int32_t d1 = 2;
    float payload[2] = {1, 2};
    std::fwrite(&d1, sizeof d1, 1, f);
    std::fwrite(payload, sizeof(float), 2, f);
    std::int32_t d2 = 3;
    std::fwrite(&d2, sizeof d2, 1, f);
    std::fwrite(payload, sizeof(float), 2, f);
    std::fclose(f);
  }
  EXPECT_THROW(load_fvecs(path), ParseError);
}

TEST(Synthetic, DeterministicPerSeed) {
  MixtureSpec spec;
  spec.count = 200;
  spec.dim = 8;
  spec.seed = 11;
  auto a = make_mixture(spec);
  auto b = make_mixture(spec);
  EXPECT_EQ(a.data, b.data);
  spec.seed = 12;
  auto c = make_mixture(spec);
  EXPECT_NE(a.data, c.data);
}

TEST(Synthetic, QueriesShareBlobsButNotSamples) {
  MixtureSpec spec;
  spec.count = 500;
  spec.dim = 8;
  spec.seed = 4;
  auto data = make_mixture(spec);
  auto queries = make_mixture_queries(spec, 100);
  ASSERT_EQ(queries.count(), 100u);
  ASSERT_EQ(queries.dim, data.dim);
  EXPECT_NE(std::vector<float>(queries.data.begin(), queries.data.begin() + 8),
            std::vector<float>(data.data.begin(), data.data.begin() + 8));
  // same underlying mixture: nearest data point should sit well inside the
  // cloud rather than a spread-length away
  double worst = 0;
  for (std::size_t qi = 0; qi < queries.count(); ++qi) {
    auto nn = brute_force_topk(data, queries.row(qi), 1);
    worst = std::max(worst, nn[0].dist);
  }
  EXPECT_LT(std::sqrt(worst), 1.5);
}

TEST(QueryBatchDefaults, KAndR) {
  QueryBatch b;
  EXPECT_EQ(b.k, 10u);
  EXPECT_EQ(b.r, 4u);
}
