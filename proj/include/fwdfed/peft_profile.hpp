#pragma once

// Offline similarity-aware PEFT profiler: one forward-gradient iteration per
// candidate mask, scored by cosine similarity with the backprop gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fwdfed/error.hpp"
#include "fwdfed/fwdgrad.hpp"
#include "fwdfed/log.hpp"
#include "fwdfed/objective.hpp"
#include "fwdfed/peft.hpp"
#include "fwdfed/rng.hpp"
#include "fwdfed/sampling.hpp"

namespace fwdfed {

struct ProfileEntry {
  TrainableMask mask;
  std::size_t trainable_dim = 0;
  double score = 0.0;
};

// Candidates sorted by score (descending); scores within 1e-9 of each other
// rank the smaller trainable_dim first. Candidates of equal dimension share
// one seed set.
inline std::vector<ProfileEntry> peft_profile(const ModelSpec& model,
                                              std::span<const double> frozen,
                                              const std::vector<TrainableMask>& candidates,
                                              const Batch& public_batch,
                                              std::size_t n_perturbations,
                                              std::uint64_t master_seed,
                                              const DerivativeMode& mode = Analytic{}) {
  if (candidates.empty()) throw ConfigError("profile.candidates", "no candidate masks");
  if (n_perturbations < 1) throw ConfigError("profile.n_perturbations", "must be >= 1");
  std::vector<ProfileEntry> entries;
  for (const TrainableMask& mask : candidates) {
    const std::size_t dim = trainable_dim(mask, model);
    const ParamVector theta = initial_trainable(mask, model, frozen, master_seed);
    const MaskedObjective objective(model, frozen, mask, public_batch);
    const std::uint64_t base = rng::derive(master_seed, "profile", dim);
    std::vector<PerturbationSeed> seeds;
    seeds.reserve(n_perturbations);
    for (std::size_t i = 0; i < n_perturbations; ++i) seeds.push_back({base, i});
    const auto result = client_round_compute(objective, theta, seeds, mode);
    const ParamVector estimate = mean_forward_gradient(result.records, dim);
    const ParamVector exact = objective.gradient(theta);
    double score = 0.0;
    try {
      score = cosine_similarity(estimate, exact);
    } catch (const UndefinedSimilarityError&) {
      log::info("peft_profile: zero gradient for ", describe(mask), ", score set to 0");
    }
    entries.push_back({mask, dim, score});
  }
  // Insertion sort: the tolerant comparator is not a strict weak order.
  auto before = [](const ProfileEntry& a, const ProfileEntry& b) {
    if (std::abs(a.score - b.score) > 1e-9) return a.score > b.score;
    return a.trainable_dim < b.trainable_dim;
  };
  for (std::size_t i = 1; i < entries.size(); ++i) {
    for (std::size_t j = i; j > 0 && before(entries[j], entries[j - 1]); --j) {
      std::swap(entries[j], entries[j - 1]);
    }
  }
  return entries;
}

}  // namespace fwdfed
