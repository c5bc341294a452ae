#pragma once

// Discriminative perturbation sampling. The server expands candidate seeds,
// scores each direction against the previous round's aggregated gradient and
// dispatches only the best-aligned seeds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "fwdfed/error.hpp"
#include "fwdfed/fwdgrad.hpp"
#include "fwdfed/log.hpp"
#include "fwdfed/rng.hpp"
#include "fwdfed/vector_ops.hpp"

namespace fwdfed {

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require_same_size(a, b, "cosine_similarity");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw UndefinedSimilarityError("cosine of a zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

struct SamplerConfig {
  double keep_ratio = 1.0;
  // Candidates generated per surviving seed; 0 means 1 / keep_ratio.
  double oversample_factor = 0.0;
  // Rank by signed cosine instead of |cos|.
  bool signed_similarity = false;

  double effective_oversample() const {
    return oversample_factor > 0.0 ? oversample_factor : 1.0 / keep_ratio;
  }

  void validate() const {
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
      throw ConfigError("sampler.keep_ratio", "must lie in (0, 1]");
    }
    if (oversample_factor != 0.0 && !(oversample_factor >= 1.0)) {
      throw ConfigError("sampler.oversample_factor", "must be >= 1");
    }
    if (keep_ratio * effective_oversample() < 1.0 - 1e-12) {
      throw ConfigError("sampler.oversample_factor",
                        "keep_ratio * oversample_factor must be >= 1");
    }
  }
};

inline std::size_t candidate_count(std::size_t requested, const SamplerConfig& config) {
  const double want = static_cast<double>(requested) * config.effective_oversample();
  return std::max(requested, static_cast<std::size_t>(std::ceil(want - 1e-9)));
}

// Seeds (stream_base, i) for the dispatched perturbations, in index order.
//
// Round 0 (no previous gradient), keep_ratio = 1 and a zero previous gradient
// all return the first `requested` candidates untouched.
inline std::vector<PerturbationSeed> filter_seeds(const std::optional<ParamVector>& g_prev,
                                                  std::size_t requested,
                                                  const SamplerConfig& config, std::size_t dim,
                                                  std::uint64_t seed_stream_base) {
  if (requested == 0) throw ConfigError("requested", "must be >= 1");
  auto first_n = [&](std::size_t n) {
    std::vector<PerturbationSeed> seeds;
    seeds.reserve(n);
    for (std::size_t i = 0; i < n; ++i) seeds.push_back({seed_stream_base, i});
    return seeds;
  };
  if (!g_prev || config.keep_ratio >= 1.0) return first_n(requested);
  if (g_prev->size() != dim) throw ShapeError("filter_seeds: g_prev length != dim");
  const double g_norm = norm2(*g_prev);
  if (g_norm == 0.0) {
    log::info("filter_seeds: zero previous gradient, dispatching unfiltered seeds");
    return first_n(requested);
  }

  struct Scored {
    double score;
    std::uint64_t index;
  };
  const std::size_t n_candidates = candidate_count(requested, config);
  std::vector<Scored> scored;
  scored.reserve(n_candidates);
  for (std::size_t i = 0; i < n_candidates; ++i) {
    const ParamVector v = gen_perturbation({seed_stream_base, i}, dim);
    const double nv = norm2(v);
    const double c = nv == 0.0 ? 0.0 : dot(v, *g_prev) / (nv * g_norm);
    scored.push_back({config.signed_similarity ? c : std::abs(c), i});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  std::vector<PerturbationSeed> out;
  out.reserve(requested);
  for (std::size_t k = 0; k < requested; ++k) out.push_back({seed_stream_base, scored[k].index});
  std::sort(out.begin(), out.end());
  return out;
}

// Fraction of random directions whose |cos| with a fixed random unit vector
// falls below `threshold`.
inline double orthogonality_census(std::size_t dim, std::size_t n_samples, double threshold,
                                   std::uint64_t seed = 0) {
  if (n_samples < 1000) throw ConfigError("n_samples", "census needs at least 1000 samples");
  if (dim < 2) throw ConfigError("dim", "census needs dim >= 2");
  ParamVector ref = gen_perturbation({rng::derive(seed, "census-reference"), 0}, dim);
  const double rn = norm2(ref);
  for (double& x : ref) x /= rn;
  const std::uint64_t base = rng::derive(seed, "census-samples");
  std::size_t below = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const ParamVector v = gen_perturbation({base, i}, dim);
    const double c = dot(v, ref) / norm2(v);
    below += std::abs(c) < threshold;
  }
  return static_cast<double>(below) / static_cast<double>(n_samples);
}

}  // namespace fwdfed
