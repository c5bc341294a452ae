#pragma once

// Variance-controlled pacing of the global perturbation budget.
//
// The server keeps collecting forward gradients until the half-split variance
// statistic D falls to the threshold. Budget grows by adding devices first,
// then perturbations per device. The allocation carries over between rounds.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fwdfed/error.hpp"
#include "fwdfed/fwdgrad.hpp"
#include "fwdfed/vector_ops.hpp"

namespace fwdfed {

enum class VarianceForm {
  kElementwise,  // || 1/2 [ (g1-g)^2 + (g2-g)^2 ] ||  with elementwise squares
  kScalar,       // 1/2 [ ||g1-g||^2 + ||g2-g||^2 ]
};

struct PacingConfig {
  bool enabled = true;
  double variance_threshold = 0.3;
  std::size_t max_devices = 32;
  std::size_t max_perturbations_per_device = 16;
  std::size_t min_records_for_variance = 4;
  std::size_t initial_devices = 2;
  std::size_t initial_perturbations = 1;
  VarianceForm form = VarianceForm::kElementwise;

  void validate() const {
    if (!(variance_threshold > 0.0)) {
      throw ConfigError("pacing.variance_threshold", "must be > 0");
    }
    if (max_devices < 1) throw ConfigError("pacing.max_devices", "must be >= 1");
    if (max_perturbations_per_device < 1) {
      throw ConfigError("pacing.max_perturbations_per_device", "must be >= 1");
    }
    if (min_records_for_variance < 4) {
      throw ConfigError("pacing.min_records_for_variance", "must be >= 4");
    }
    if (initial_devices < 1 || initial_devices > max_devices) {
      throw ConfigError("pacing.initial_devices", "must lie in [1, max_devices]");
    }
    if (initial_perturbations < 1 || initial_perturbations > max_perturbations_per_device) {
      throw ConfigError("pacing.initial_perturbations",
                        "must lie in [1, max_perturbations_per_device]");
    }
  }
};

struct Allocation {
  std::size_t active_devices = 1;
  std::size_t perturbations_per_device = 1;

  std::size_t global_ps() const { return active_devices * perturbations_per_device; }
  friend bool operator==(const Allocation&, const Allocation&) = default;
};

inline Allocation initial_allocation(const PacingConfig& c) {
  return {c.initial_devices, c.initial_perturbations};
}

// D over already-reconstructed gradients, in the given (arrival) order. An odd
// count puts the extra gradient in the first half. Needs at least 2 gradients.
inline double gradient_variance(std::span<const ParamVector> grads,
                                VarianceForm form = VarianceForm::kElementwise) {
  if (grads.size() < 2) throw ShapeError("gradient_variance needs at least 2 gradients");
  const std::size_t dim = grads.front().size();
  const std::size_t n1 = (grads.size() + 1) / 2;
  ParamVector m1(dim, 0.0), m2(dim, 0.0), m(dim, 0.0);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require_same_size(grads[i], m, "gradient_variance");
    axpy(1.0, grads[i], i < n1 ? m1 : m2);
    axpy(1.0, grads[i], m);
  }
  for (std::size_t j = 0; j < dim; ++j) {
    m1[j] /= static_cast<double>(n1);
    m2[j] /= static_cast<double>(grads.size() - n1);
    m[j] /= static_cast<double>(grads.size());
  }
  if (form == VarianceForm::kScalar) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      s1 += (m1[j] - m[j]) * (m1[j] - m[j]);
      s2 += (m2[j] - m[j]) * (m2[j] - m[j]);
    }
    return 0.5 * (s1 + s2);
  }
  double sq = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double d1 = m1[j] - m[j];
    const double d2 = m2[j] - m[j];
    const double e = 0.5 * (d1 * d1 + d2 * d2);
    sq += e * e;
  }
  return std::sqrt(sq);
}

// D over records in the order given. Returns nullopt (keep collecting) when
// fewer than `min_records` are available.
inline std::optional<double> gradient_variance(std::span<const ForwardGradientRecord> records,
                                               std::size_t dim, std::size_t min_records = 4,
                                               VarianceForm form = VarianceForm::kElementwise) {
  if (records.size() < std::max<std::size_t>(min_records, 2)) return std::nullopt;
  std::vector<ParamVector> grads;
  grads.reserve(records.size());
  for (const auto& r : records) grads.push_back(reconstruct(r, dim));
  return gradient_variance(std::span<const ParamVector>(grads), form);
}

enum class PacingAction { kStopAndAggregate, kAddDevices, kAddPerturbations };

struct PacingDecision {
  PacingAction action = PacingAction::kStopAndAggregate;
  std::size_t target = 0;  // new device count or new perturbations per device
  bool budget_exhausted = false;

  friend bool operator==(const PacingDecision&, const PacingDecision&) = default;
};

inline std::string describe(const PacingDecision& d) {
  switch (d.action) {
    case PacingAction::kStopAndAggregate:
      return d.budget_exhausted ? "stop_exhausted" : "stop";
    case PacingAction::kAddDevices:
      return "add_devices";
    case PacingAction::kAddPerturbations:
      return "add_perturbations";
  }
  return "?";
}

// Devices double (capped) first; then perturbations per device grow by 50%,
// rounded up (capped). Pass +infinity for D when there is not enough data yet.
inline PacingDecision pacing_decision(double variance, const PacingConfig& config,
                                      const Allocation& alloc) {
  if (variance <= config.variance_threshold) return {PacingAction::kStopAndAggregate, 0, false};
  if (alloc.active_devices < config.max_devices) {
    return {PacingAction::kAddDevices, std::min(config.max_devices, 2 * alloc.active_devices),
            false};
  }
  if (alloc.perturbations_per_device < config.max_perturbations_per_device) {
    const std::size_t grown = (3 * alloc.perturbations_per_device + 1) / 2;
    return {PacingAction::kAddPerturbations,
            std::min(config.max_perturbations_per_device,
                     std::max(grown, alloc.perturbations_per_device + 1)),
            false};
  }
  return {PacingAction::kStopAndAggregate, 0, true};
}

// Peak device memory: model bytes plus two trainable-sized buffers
// (current weights and one perturbation alive at a time).
inline std::uint64_t memory_estimate(std::uint64_t model_bytes,
                                     std::uint64_t trainable_param_count,
                                     std::uint64_t bytes_per_param) {
  return model_bytes + 2 * trainable_param_count * bytes_per_param;
}

struct PacingEvent {
  std::uint64_t round = 0;
  std::size_t records_seen = 0;
  double variance = 0.0;  // +inf while below min_records
  PacingDecision decision;
  Allocation alloc;  // allocation in force when the decision was taken
};

inline std::string pacing_events_csv_header() {
  return "round,records_seen,D,decision,devices,perts_per_device";
}

}  // namespace fwdfed
