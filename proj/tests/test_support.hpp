#pragma once

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "farann/layout.hpp"
#include "farann/partitioner.hpp"
#include "farann/query_engine.hpp"
#include "farann/vectors.hpp"

namespace farann::testing {

// Fresh scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("farann_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// True top-k labels per query via exhaustive scan.
inline std::vector<std::vector<u64>> true_topk_labels(const VectorStore& base,
                                                      std::span<const u64> labels,
                                                      const VectorStore& queries, std::size_t k) {
  std::vector<std::vector<u64>> out(queries.count());
  for (std::size_t qi = 0; qi < queries.count(); ++qi) {
    auto hits = brute_force_topk(base, queries.row(qi), k);
    out[qi].reserve(hits.size());
    for (const Hit& h : hits)
      out[qi].push_back(labels.empty() ? h.id : labels[std::size_t(h.id)]);
  }
  return out;
}

inline double recall_against(const std::vector<Hit>& got, const std::vector<u64>& truth) {
  if (truth.empty()) return 1.0;
  std::set<u64> want(truth.begin(), truth.end());
  std::size_t found = 0;
  for (const Hit& h : got)
    if (want.count(h.id)) ++found;
  return double(found) / double(want.size());
}

inline double mean_recall(const std::vector<std::vector<Hit>>& got,
                          const std::vector<std::vector<u64>>& truth) {
  if (got.empty()) return 1.0;
  double sum = 0;
  for (std::size_t i = 0; i < got.size(); ++i) sum += recall_against(got[i], truth[i]);
  return sum / double(got.size());
}

// A full serving setup over one fabric region: partitioned base vectors, one
// graph per partition labeled with global row ids, the grouped layout, and
// the routing index. Shared by the engine, insert, rebuild, and acceptance
// suites.
struct BuiltSystem {
  std::unique_ptr<LayoutWriter> writer;
  MetaIndex meta_index;
  PartitionResult parts;
  std::size_t max_sub_size = 0;

  RegionHandle region() const { return writer->region(); }
  const GlobalMeta& meta() const { return writer->meta(); }
};

inline BuiltSystem build_system(MemoryFabric& fabric, const VectorStore& base,
                                const PartitionParams& pp, const HnswParams& graph,
                                const GapPolicy& gaps, u32 e_meta = 64) {
  u32 partitions = pp.partitions;
  BuiltSystem sys;
  sys.parts = partition(base, pp);

  std::vector<VectorStore> stores(partitions, VectorStore(base.dim, base.metric));
  std::vector<std::vector<u64>> labels(partitions);
  for (std::size_t i = 0; i < base.count(); ++i) {
    u32 p = sys.parts.assignment[i];
    stores[p].append(base.row(i));
    labels[p].push_back(u64(i));
  }
  std::vector<std::vector<std::byte>> images;
  images.reserve(partitions);
  for (u32 p = 0; p < partitions; ++p) {
    HnswParams gp = graph;
    gp.rng_seed = mix_seed(graph.rng_seed, p);
    HnswIndex idx = HnswIndex::build(stores[p], gp, labels[p]);
    sys.max_sub_size = std::max(sys.max_sub_size, idx.node_count());
    images.push_back(idx.serialize(gaps));
  }
  sys.writer = std::make_unique<LayoutWriter>(LayoutWriter::build(fabric, images, gaps));
  sys.meta_index = build_meta_index(sys.parts.centroids, e_meta, mix_seed(pp.seed, 0x6d657461u));
  return sys;
}

inline BuiltSystem build_system(MemoryFabric& fabric, const VectorStore& base, u32 partitions,
                                const HnswParams& graph, const GapPolicy& gaps, u32 e_meta = 64,
                                u64 part_seed = 7) {
  PartitionParams pp;
  pp.partitions = partitions;
  pp.seed = part_seed;
  return build_system(fabric, base, pp, graph, gaps, e_meta);
}

}  // namespace farann::testing
