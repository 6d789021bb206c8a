#pragma once

#include <algorithm>
#include <cmath>

#include "farann/common.hpp"

namespace farann {

// Analytical cost model for index construction and batch serving. Asymptotic
// terms become concrete via two calibration scalars (per distance element and
// per deserialized byte), fitted from one measured run. All logs are natural.
struct ModelParams {
  double n = 1e6;          // stored vectors
  double dim = 128;        // d
  double partitions = 64;  // P
  double k = 10;
  double e_build = 128;
  double e_meta = 64;
  double e_sub = 96;
  double batch = 64;   // B, queries per batch
  double r = 4;        // subs probed per query
  double sub_bytes = double(1 << 20);  // S, average serialized sub size
  double p_fetch = 16;                 // subs actually fetched for the batch
  double w_net = 12.5e9;               // bytes/second
  double n_threads = 1;
  double i_max = 20;
  double c_sample = 8;
  double top_l = 3;
  // calibration
  double per_distance_element = 1e-9;
  double per_byte_deser = 1e-10;
  // clustering keeps its assignment-queue term only when this is nonzero
  // (the derivation drops it assuming P*d dominates log N)
  double per_queue_op = 0.0;

  void validate() const {
    require(n > 0 && dim > 0 && partitions > 0 && batch > 0, "ModelParams: sizes must be positive");
    require(p_fetch >= 0 && p_fetch <= partitions, "ModelParams: need 0 <= P_fetch <= P");
    require(w_net > 0 && n_threads >= 1, "ModelParams: w_net > 0, n_threads >= 1");
  }
};

struct BuildBreakdown {
  double t_init = 0;
  double t_cluster = 0;
  double t_sub = 0;
  double t_meta_build = 0;
  double t_build = 0;
};

struct BatchBreakdown {
  double t_meta = 0;
  double t_net = 0;
  double t_deser = 0;
  double t_comp = 0;
  double t_pipeline = 0;
  double t_total = 0;
};

namespace detail {
inline double ln_at_least_2(double x) { return std::log(std::max(x, 2.0)); }
}

inline BuildBreakdown predict_build(const ModelParams& p) {
  p.validate();
  BuildBreakdown b;
  double kappa = p.per_distance_element;
  // seeding: every new center scores c_sample candidates against chosen centers
  b.t_init = kappa * p.partitions * p.partitions * p.c_sample * p.dim;
  // clustering: i_max rounds of N x P distance evaluations
  b.t_cluster = kappa * p.i_max * p.n * p.partitions * p.dim;
  if (p.per_queue_op > 0)
    b.t_cluster += p.per_queue_op * p.i_max * p.n * std::log(std::max(p.n, 2.0));
  // per-sub graph build, P subs spread over n_threads
  double per_sub = kappa * (p.n / p.partitions) * detail::ln_at_least_2(p.n / p.partitions) *
                   p.e_build * p.dim;
  b.t_sub = std::ceil(p.partitions / p.n_threads) * per_sub;
  // centroid pass over all vectors plus the small routing graph
  b.t_meta_build = kappa * (p.n * p.dim + p.partitions * detail::ln_at_least_2(p.partitions) *
                                              p.e_build * p.dim);
  b.t_build = b.t_init + b.t_cluster + b.t_sub + b.t_meta_build;
  return b;
}

// Serving model. The pipeline bound is the slowest stage total plus the fill
// and drain of one task through the three stages (deserialize counted twice:
// once filling behind the first fetch, once draining before the last search).
inline BatchBreakdown predict_batch(const ModelParams& p) {
  p.validate();
  BatchBreakdown b;
  double kappa = p.per_distance_element;
  b.t_meta = kappa * (p.batch / p.n_threads) * p.dim * p.e_meta *
             detail::ln_at_least_2(p.partitions);
  b.t_net = p.p_fetch * p.sub_bytes / p.w_net;
  b.t_deser = p.per_byte_deser * p.p_fetch * p.sub_bytes;
  b.t_comp = kappa * (p.batch * p.r) * p.dim * p.e_sub *
             detail::ln_at_least_2(p.n / p.partitions);
  if (p.p_fetch < 1) {
    b.t_pipeline = b.t_comp;  // nothing crosses the wire; compute only
  } else {
    double fill_fetch = b.t_net / p.p_fetch;
    double fill_deser = b.t_deser / p.p_fetch;
    double fill_search = b.t_comp / p.p_fetch;
    b.t_pipeline = std::max({b.t_net, b.t_deser, b.t_comp}) + fill_fetch + 2 * fill_deser +
                   fill_search;
  }
  b.t_total = b.t_meta + b.t_pipeline;
  return b;
}

}  // namespace farann
