#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "farann/common.hpp"

namespace farann {

enum class Metric : u32 {
  L2 = 0,       // squared euclidean distance
  Angular = 1,  // 1 - cosine similarity
};

inline const char* metric_name(Metric m) { return m == Metric::L2 ? "l2" : "angular"; }

// Distances accumulate in double regardless of the float payload so that
// result ordering is stable across compilers and vector widths.
inline double distance_l2sq(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return acc;
}

inline double distance_angular(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  double denom = std::sqrt(na) * std::sqrt(nb);
  if (denom == 0.0) return 1.0;  // zero vector: no direction, maximally dissimilar
  return 1.0 - dot / denom;
}

inline double distance(std::span<const float> a, std::span<const float> b, Metric m) {
  require(a.size() == b.size(), "distance: dimension mismatch");
  return m == Metric::L2 ? distance_l2sq(a, b) : distance_angular(a, b);
}

// Row-major float matrix. `count` is derived from the payload so the
// data-length invariant can never be violated by a stale field.
struct VectorStore {
  u32 dim = 0;
  Metric metric = Metric::L2;
  std::vector<float> data;

  VectorStore() = default;
  VectorStore(u32 d, Metric m) : dim(d), metric(m) {}

  std::size_t count() const { return dim == 0 ? 0 : data.size() / dim; }

  std::span<const float> row(std::size_t i) const {
    require(i < count(), "VectorStore::row: index out of range");
    return {data.data() + i * dim, dim};
  }

  std::span<float> row_mut(std::size_t i) {
    require(i < count(), "VectorStore::row_mut: index out of range");
    return {data.data() + i * dim, dim};
  }

  void append(std::span<const float> v) {
    require(dim != 0, "VectorStore::append: dim not set");
    require(v.size() == dim, "VectorStore::append: dimension mismatch");
    data.insert(data.end(), v.begin(), v.end());
  }

  void reserve_rows(std::size_t n) { data.reserve(n * std::size_t(dim)); }
};

// A scored hit. Ordering is (distance, id) ascending everywhere so that ties
// resolve identically in every code path.
struct Hit {
  double dist = 0.0;
  u64 id = 0;
  friend bool operator<(const Hit& a, const Hit& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.id < b.id;
  }
  friend bool operator>(const Hit& a, const Hit& b) { return b < a; }
  friend bool operator==(const Hit& a, const Hit& b) { return a.dist == b.dist && a.id == b.id; }
};

// Exact top-k by linear scan. The oracle for every approximate path.
inline std::vector<Hit> brute_force_topk(const VectorStore& store, std::span<const float> q,
                                         std::size_t k) {
  require(q.size() == store.dim, "brute_force_topk: dimension mismatch");
  std::vector<Hit> all;
  all.reserve(store.count());
  for (std::size_t i = 0; i < store.count(); ++i)
    all.push_back({distance(store.row(i), q, store.metric), u64(i)});
  std::size_t kk = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + kk, all.end());
  all.resize(kk);
  return all;
}

// A group of queries handled as one unit by the serving path. arrival_times
// (seconds, ascending, optional) let the planner truncate a batch that would
// otherwise hold its earliest query past the wait budget.
struct QueryBatch {
  VectorStore queries;
  u32 k = 10;
  u32 r = 4;  // partitions probed per query
  std::vector<double> arrival_times;
};

// ---------------------------------------------------------------------------
// *vecs file IO: each record is <dim:i32><payload:dim elements>. fvecs holds
// f32, ivecs i32. The de-facto interchange format for ANN datasets.

namespace detail {

class FileCloser {
 public:
  explicit FileCloser(std::FILE* f) : f_(f) {}
  ~FileCloser() {
    if (f_) std::fclose(f_);
  }
  std::FILE* get() const { return f_; }

 private:
  std::FILE* f_;
};

}  // namespace detail

inline VectorStore load_fvecs(const std::filesystem::path& path, Metric metric = Metric::L2) {
  detail::FileCloser f(std::fopen(path.string().c_str(), "rb"));
  if (!f.get()) throw IoError("load_fvecs: cannot open " + path.string());
  VectorStore store;
  store.metric = metric;
  u64 offset = 0;
  while (true) {
    std::int32_t d = 0;
    std::size_t got = std::fread(&d, sizeof d, 1, f.get());
    if (got == 0) break;  // clean EOF between records
    if (d <= 0) throw ParseError("load_fvecs: non-positive dimension", offset);
    if (store.dim == 0) {
      store.dim = u32(d);
    } else if (u32(d) != store.dim) {
      throw ParseError("load_fvecs: inconsistent dimension", offset);
    }
    offset += 4;
    std::vector<float> row(static_cast<std::size_t>(d), 0.0f);
    if (std::fread(row.data(), sizeof(float), row.size(), f.get()) != row.size())
      throw ParseError("load_fvecs: truncated record", offset);
    offset += row.size() * 4;
    store.data.insert(store.data.end(), row.begin(), row.end());
  }
  return store;
}

inline void save_fvecs(const std::filesystem::path& path, const VectorStore& store) {
  detail::FileCloser f(std::fopen(path.string().c_str(), "wb"));
  if (!f.get()) throw IoError("save_fvecs: cannot open " + path.string());
  std::int32_t d = std::int32_t(store.dim);
  for (std::size_t i = 0; i < store.count(); ++i) {
    auto row = store.row(i);
    if (std::fwrite(&d, sizeof d, 1, f.get()) != 1 ||
        std::fwrite(row.data(), sizeof(float), row.size(), f.get()) != row.size())
      throw IoError("save_fvecs: short write to " + path.string());
  }
}

inline std::vector<std::vector<u32>> load_ivecs(const std::filesystem::path& path) {
  detail::FileCloser f(std::fopen(path.string().c_str(), "rb"));
  if (!f.get()) throw IoError("load_ivecs: cannot open " + path.string());
  std::vector<std::vector<u32>> rows;
  u64 offset = 0;
  while (true) {
    std::int32_t d = 0;
    if (std::fread(&d, sizeof d, 1, f.get()) == 0) break;
    if (d < 0) throw ParseError("load_ivecs: negative dimension", offset);
    offset += 4;
    std::vector<u32> row(static_cast<std::size_t>(d), 0u);
    if (std::fread(row.data(), sizeof(u32), row.size(), f.get()) != row.size())
      throw ParseError("load_ivecs: truncated record", offset);
    offset += row.size() * 4;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void save_ivecs(const std::filesystem::path& path, const std::vector<std::vector<u32>>& rows) {
  detail::FileCloser f(std::fopen(path.string().c_str(), "wb"));
  if (!f.get()) throw IoError("save_ivecs: cannot open " + path.string());
  for (const auto& row : rows) {
    std::int32_t d = std::int32_t(row.size());
    if (std::fwrite(&d, sizeof d, 1, f.get()) != 1 ||
        (d > 0 && std::fwrite(row.data(), sizeof(u32), row.size(), f.get()) != row.size()))
      throw IoError("save_ivecs: short write to " + path.string());
  }
}

}  // namespace farann
