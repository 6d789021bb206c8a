#pragma once

#include <random>

#include "farann/vectors.hpp"

namespace farann {

// Gaussian mixture test data: `components` isotropic blobs with centers drawn
// uniformly from [-1, 1]^dim and per-component sigma drawn from
// [0.05, 0.05 + spread]. Deterministic for a given seed.
struct MixtureSpec {
  std::size_t count = 0;
  u32 dim = 0;
  u32 components = 8;
  double spread = 0.15;
  u64 seed = 1;
  Metric metric = Metric::L2;
};

namespace detail {

struct MixtureShape {
  std::vector<float> centers;  // components x dim
  std::vector<double> sigmas;
};

// The shape (centers and widths) depends only on the seed, so points and
// queries sampled in separate calls come from the same distribution.
inline MixtureShape mixture_shape(const MixtureSpec& spec) {
  auto rng = make_rng(spec.seed, 0x6d69785f73686170ull);
  std::uniform_real_distribution<double> center_dist(-1.0, 1.0);
  std::uniform_real_distribution<double> sigma_dist(0.05, 0.05 + spec.spread);
  MixtureShape shape;
  shape.centers.resize(std::size_t(spec.components) * spec.dim);
  shape.sigmas.resize(spec.components);
  for (auto& c : shape.centers) c = float(center_dist(rng));
  for (auto& s : shape.sigmas) s = sigma_dist(rng);
  return shape;
}

inline VectorStore sample_mixture(const MixtureSpec& spec, std::size_t n, u64 stream) {
  require(spec.dim > 0, "make_mixture: dim must be positive");
  require(spec.components > 0, "make_mixture: components must be positive");
  MixtureShape shape = mixture_shape(spec);
  auto rng = make_rng(spec.seed, stream);
  VectorStore store(spec.dim, spec.metric);
  store.reserve_rows(n);
  std::uniform_int_distribution<u32> pick(0, spec.components - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    u32 c = pick(rng);
    for (u32 j = 0; j < spec.dim; ++j) {
      double v = double(shape.centers[std::size_t(c) * spec.dim + j]) + shape.sigmas[c] * noise(rng);
      store.data.push_back(float(v));
    }
  }
  return store;
}

}  // namespace detail

inline VectorStore make_mixture(const MixtureSpec& spec) {
  return detail::sample_mixture(spec, spec.count, 0x6d69785f64617461ull);
}

// Same blobs, fresh noise: queries land near the data manifold without
// duplicating any stored vector.
inline VectorStore make_mixture_queries(const MixtureSpec& spec, std::size_t n_queries) {
  return detail::sample_mixture(spec, n_queries, 0x6d69785f71727973ull);
}

}  // namespace farann
