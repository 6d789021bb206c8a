#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <random>

#include "farann/vectors.hpp"

namespace farann {

struct PartitionParams {
  u32 partitions = 1;
  u32 i_max = 20;     // assignment/update rounds
  u32 top_l = 3;      // preferred centroids considered per vector
  u32 c_sample = 8;   // seeding candidates per center
  u64 seed = 7;
  unsigned workers = 1;
};

struct PartitionResult {
  std::vector<u32> assignment;       // per vector, in [0, P)
  VectorStore centroids;             // P x d
  std::vector<u32> sizes;            // per partition
  std::vector<double> objective_log; // sum of assigned distances after each round
};

namespace detail {

// Seeding with distance-weighted candidate sampling: each new center draws
// c_sample indices with probability proportional to the squared distance to
// the closest chosen center, and the farthest-from-chosen candidate wins.
inline std::vector<u32> kmeanspp_init_ids(const VectorStore& store, u32 p, u32 c_sample,
                                          u64 seed) {
  std::size_t n = store.count();
  require(p >= 1 && p <= n, "kmeanspp_init: need 1 <= P <= N");
  require(c_sample >= 1, "kmeanspp_init: c_sample must be at least 1");
  auto rng = make_rng(seed, 0x6b6d2b2b5f696e69ull);

  std::vector<u32> centers;
  centers.reserve(p);
  std::vector<char> chosen(n, 0);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  u32 c0 = u32(first(rng));
  centers.push_back(c0);
  chosen[c0] = 1;

  // d2[i): squared distance to the nearest chosen center (the metric's own
  // distance for angular stores; still non-negative, still zero at centers).
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = distance(store.row(i), store.row(c0), store.metric);

  std::vector<double> cum(n);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  while (centers.size() < p) {
    std::partial_sum(d2.begin(), d2.end(), cum.begin());
    double total = cum.back();
    u32 best = std::numeric_limits<u32>::max();
    if (total <= 0.0) {
      // all remaining mass is on duplicates of chosen centers: take the
      // smallest unchosen index so P distinct indices always come out
      for (u32 i = 0; i < n; ++i)
        if (!chosen[i]) {
          best = i;
          break;
        }
    } else {
      double best_d2 = -1.0;
      for (u32 c = 0; c < c_sample; ++c) {
        double r = uni(rng) * total;
        std::size_t idx = std::lower_bound(cum.begin(), cum.end(), r) - cum.begin();
        if (idx >= n) idx = n - 1;
        if (chosen[idx]) continue;  // zero-mass index hit only via fp rounding
        if (d2[idx] > best_d2 || (d2[idx] == best_d2 && idx < best)) {
          best_d2 = d2[idx];
          best = u32(idx);
        }
      }
      if (best == std::numeric_limits<u32>::max()) {
        // every draw landed on a chosen index; fall back to the max-d2 point
        best = u32(std::max_element(d2.begin(), d2.end()) - d2.begin());
      }
    }
    centers.push_back(best);
    chosen[best] = 1;
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], distance(store.row(i), store.row(best), store.metric));
  }
  return centers;
}

struct CentroidOrder {
  std::vector<u32> order;    // n x p centroid ids, ascending (dist, id)
  std::vector<double> dist;  // n x p distances matching `order`
  u32 p = 0;
};

inline CentroidOrder rank_centroids(const VectorStore& store, const VectorStore& centroids,
                                    unsigned workers) {
  std::size_t n = store.count();
  u32 p = u32(centroids.count());
  CentroidOrder out;
  out.p = p;
  out.order.resize(n * p);
  out.dist.resize(n * p);
  parallel_for(n, workers, [&](std::size_t i) {
    std::vector<Hit> hits(p);
    for (u32 c = 0; c < p; ++c)
      hits[c] = {distance(store.row(i), centroids.row(c), store.metric), c};
    std::sort(hits.begin(), hits.end());
    for (u32 c = 0; c < p; ++c) {
      out.order[i * p + c] = u32(hits[c].id);
      out.dist[i * p + c] = hits[c].dist;
    }
  });
  return out;
}

}  // namespace detail

inline VectorStore kmeanspp_init(const VectorStore& store, u32 p, u32 c_sample, u64 seed) {
  auto ids = detail::kmeanspp_init_ids(store, p, c_sample, seed);
  VectorStore centers(store.dim, store.metric);
  centers.reserve_rows(p);
  for (u32 id : ids) centers.append(store.row(id));
  return centers;
}

// Capacity-constrained assignment. Every vector prefers its top_l closest
// centroids; a global priority queue hands out slots to the vector with the
// largest regret first, where regret is the cost gap between its best and
// second-best still-open choices (infinite when only one remains). Entries
// with stale keys are re-queued instead of rescanned, so each fill event
// costs at most one extra pop per affected vector. Vectors whose whole
// preference list is full take the nearest centroid with room.
inline std::vector<u32> balanced_assign(const VectorStore& store, const VectorStore& centroids,
                                        u32 top_l, u64 cap, unsigned workers = 1) {
  std::size_t n = store.count();
  u32 p = u32(centroids.count());
  require(p >= 1, "balanced_assign: need at least one centroid");
  require(top_l >= 1, "balanced_assign: top_l must be at least 1");
  require(cap * u64(p) >= n, "balanced_assign: cap * P must cover N");
  std::vector<u32> assignment(n, 0);
  if (n == 0) return assignment;

  detail::CentroidOrder ranked = detail::rank_centroids(store, centroids, workers);
  u32 l = std::min(top_l, p);
  std::vector<u64> fill(p, 0);

  // best open choice within the preference list; (regret, best, second_ok)
  auto evaluate = [&](std::size_t i) {
    double best_d = 0, second_d = 0;
    u32 best = std::numeric_limits<u32>::max();
    bool have_second = false;
    for (u32 c = 0; c < l; ++c) {
      u32 cid = ranked.order[i * ranked.p + c];
      if (fill[cid] >= cap) continue;
      if (best == std::numeric_limits<u32>::max()) {
        best = cid;
        best_d = ranked.dist[i * ranked.p + c];
      } else {
        second_d = ranked.dist[i * ranked.p + c];
        have_second = true;
        break;
      }
    }
    double regret = best == std::numeric_limits<u32>::max()
                        ? -1.0  // nothing open in the preference list
                        : (have_second ? second_d - best_d
                                       : std::numeric_limits<double>::infinity());
    return std::tuple<double, u32>(regret, best);
  };

  struct Entry {
    double regret;
    u64 id;
    // max-regret first, ties to the smaller vector id
    bool operator<(const Entry& o) const {
      if (regret != o.regret) return regret < o.regret;
      return id > o.id;
    }
  };
  std::priority_queue<Entry> queue;
  for (std::size_t i = 0; i < n; ++i) {
    auto [regret, best] = evaluate(i);
    queue.push({regret, u64(i)});
  }

  std::size_t assigned = 0;
  std::vector<char> done(n, 0);
  while (!queue.empty()) {
    Entry e = queue.top();
    queue.pop();
    std::size_t i = std::size_t(e.id);
    if (done[i]) continue;
    auto [regret, best] = evaluate(i);
    if (best == std::numeric_limits<u32>::max()) {
      // preference list exhausted: nearest centroid with room, full scan
      u32 pick = std::numeric_limits<u32>::max();
      for (u32 c = 0; c < ranked.p; ++c) {
        u32 cid = ranked.order[i * ranked.p + c];
        if (fill[cid] < cap) {
          pick = cid;
          break;
        }
      }
      require(pick != std::numeric_limits<u32>::max(), "balanced_assign: no open partition");
      assignment[i] = pick;
      ++fill[pick];
      done[i] = 1;
      ++assigned;
      continue;
    }
    if (regret != e.regret) {
      queue.push({regret, e.id});  // key went stale since the last evaluation
      continue;
    }
    assignment[i] = best;
    ++fill[best];
    done[i] = 1;
    ++assigned;
  }
  require(assigned == n, "balanced_assign: incomplete assignment");
  return assignment;
}

// Full balancer: seeded centers, then i_max rounds of capacity-constrained
// assignment and centroid recomputation. Partitions never exceed ceil(N/P).
inline PartitionResult partition(const VectorStore& store, const PartitionParams& params) {
  std::size_t n = store.count();
  u32 p = params.partitions;
  require(params.i_max >= 1, "partition: i_max must be at least 1");
  require(p >= 1 && p <= n, "partition: need 1 <= P <= N");
  u64 cap = (n + p - 1) / p;

  PartitionResult res;
  res.centroids = kmeanspp_init(store, p, params.c_sample, params.seed);
  for (u32 iter = 0; iter < params.i_max; ++iter) {
    res.assignment = balanced_assign(store, res.centroids, params.top_l, cap, params.workers);
    res.sizes.assign(p, 0);
    for (u32 a : res.assignment) ++res.sizes[a];

    double objective = 0;
    for (std::size_t i = 0; i < n; ++i)
      objective += distance(store.row(i), res.centroids.row(res.assignment[i]), store.metric);
    res.objective_log.push_back(objective);

    // recompute means (renormalized for angular stores)
    std::vector<double> acc(std::size_t(p) * store.dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = store.row(i);
      double* dst = acc.data() + std::size_t(res.assignment[i]) * store.dim;
      for (u32 j = 0; j < store.dim; ++j) dst[j] += row[j];
    }
    for (u32 c = 0; c < p; ++c) {
      if (res.sizes[c] == 0) continue;  // handled by repair below
      auto dst = res.centroids.row_mut(c);
      const double* src = acc.data() + std::size_t(c) * store.dim;
      for (u32 j = 0; j < store.dim; ++j) dst[j] = float(src[j] / res.sizes[c]);
      if (store.metric == Metric::Angular) {
        double norm = 0;
        for (u32 j = 0; j < store.dim; ++j) norm += double(dst[j]) * dst[j];
        norm = std::sqrt(norm);
        if (norm > 0)
          for (u32 j = 0; j < store.dim; ++j) dst[j] = float(dst[j] / norm);
      }
    }

    // empty partitions (possible when capacity forces spill) reseed from the
    // largest partition's farthest member; skipped after the final round so
    // centroids always describe the returned assignment
    if (iter + 1 < params.i_max) {
      for (u32 c = 0; c < p; ++c) {
        if (res.sizes[c] != 0) continue;
        u32 donor = u32(std::max_element(res.sizes.begin(), res.sizes.end()) - res.sizes.begin());
        double far_d = -1;
        std::size_t far_i = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (res.assignment[i] != donor) continue;
          double d = distance(store.row(i), res.centroids.row(donor), store.metric);
          if (d > far_d) {
            far_d = d;
            far_i = i;
          }
        }
        auto dst = res.centroids.row_mut(c);
        auto src = store.row(far_i);
        std::copy(src.begin(), src.end(), dst.begin());
      }
    }
  }
  return res;
}

// Plain Lloyd iterations with the same seeding, no capacity constraint. The
// reference point for balance comparisons.
inline PartitionResult lloyd_kmeans(const VectorStore& store, u32 p, u32 i_max, u64 seed,
                                    unsigned workers = 1) {
  std::size_t n = store.count();
  require(p >= 1 && p <= n, "lloyd_kmeans: need 1 <= P <= N");
  PartitionResult res;
  res.centroids = kmeanspp_init(store, p, 8, seed);
  for (u32 iter = 0; iter < std::max(i_max, 1u); ++iter) {
    res.assignment.assign(n, 0);
    parallel_for(n, workers, [&](std::size_t i) {
      double best_d = std::numeric_limits<double>::infinity();
      u32 best = 0;
      for (u32 c = 0; c < p; ++c) {
        double d = distance(store.row(i), res.centroids.row(c), store.metric);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      res.assignment[i] = best;
    });
    res.sizes.assign(p, 0);
    for (u32 a : res.assignment) ++res.sizes[a];
    double objective = 0;
    for (std::size_t i = 0; i < n; ++i)
      objective += distance(store.row(i), res.centroids.row(res.assignment[i]), store.metric);
    res.objective_log.push_back(objective);
    std::vector<double> acc(std::size_t(p) * store.dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = store.row(i);
      double* dst = acc.data() + std::size_t(res.assignment[i]) * store.dim;
      for (u32 j = 0; j < store.dim; ++j) dst[j] += row[j];
    }
    for (u32 c = 0; c < p; ++c) {
      if (res.sizes[c] == 0) continue;
      auto dst = res.centroids.row_mut(c);
      const double* src = acc.data() + std::size_t(c) * store.dim;
      for (u32 j = 0; j < store.dim; ++j) dst[j] = float(src[j] / res.sizes[c]);
    }
  }
  return res;
}

}  // namespace farann
