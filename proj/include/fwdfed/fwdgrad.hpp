#pragma once

// Forward gradients: perturbation directions expanded from seeds, directional
// derivatives from perturbed forward passes, and the client-side batch of
// records that replaces a backward pass.

#include <cmath>
#include <compare>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "fwdfed/error.hpp"
#include "fwdfed/objective.hpp"
#include "fwdfed/rng.hpp"
#include "fwdfed/vector_ops.hpp"

namespace fwdfed {

struct PerturbationSeed {
  std::uint64_t base_seed = 0;
  std::uint64_t index = 0;

  friend auto operator<=>(const PerturbationSeed&, const PerturbationSeed&) = default;
};

// dim i.i.d. N(0,1) entries keyed by (base_seed, index, coordinate).
inline ParamVector gen_perturbation(PerturbationSeed seed, std::size_t dim) {
  ParamVector v(dim);
  for (std::size_t pair = 0; 2 * pair < dim; ++pair) {
    const auto block = rng::philox4x32_10(rng::make_counter(seed.index, pair), seed.base_seed);
    const auto [z0, z1] = rng::normal_pair(block);
    v[2 * pair] = z0;
    if (2 * pair + 1 < dim) v[2 * pair + 1] = z1;
  }
  return v;
}

struct ForwardDiff {
  double h = 0.0;
};
struct CentralDiff {
  double h = 0.0;
};
// Exact grad . v through the backprop oracle; tests and baselines only.
struct Analytic {};

using DerivativeMode = std::variant<ForwardDiff, CentralDiff, Analytic>;

inline std::string describe(const DerivativeMode& mode) {
  return std::visit(
      [](const auto& m) -> std::string {
        using M = std::decay_t<decltype(m)>;
        std::ostringstream os;
        if constexpr (std::is_same_v<M, ForwardDiff>) {
          os << "ForwardDiff(h=" << m.h << ")";
        } else if constexpr (std::is_same_v<M, CentralDiff>) {
          os << "CentralDiff(h=" << m.h << ")";
        } else {
          os << "Analytic";
        }
        return os.str();
      },
      mode);
}

// Default finite-difference step, relative to the parameter scale.
inline double relative_step(std::span<const double> theta, double scale = 1e-3) {
  return scale * (1.0 + norm_inf(theta));
}

namespace detail {

inline ParamVector shifted(const ParamVector& theta, double h, const ParamVector& v) {
  ParamVector out = theta;
  axpy(h, v, out);
  return out;
}

inline void check_step(double h) {
  if (!(h > 0.0) || !std::isfinite(h)) {
    throw NumericError("finite-difference step must be positive, got " + std::to_string(h));
  }
}

}  // namespace detail

// Slope of the objective at theta along v.
//
// ForwardDiff reuses `base_loss` (which must equal f(theta)) when supplied and
// then costs one forward pass; CentralDiff always costs two.
template <Objective F>
double directional_derivative(const F& f, const ParamVector& theta, const ParamVector& v,
                              const DerivativeMode& mode,
                              std::optional<double> base_loss = std::nullopt) {
  require_same_size(theta, v, "directional_derivative");
  const double dd = std::visit(
      [&](const auto& m) -> double {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ForwardDiff>) {
          detail::check_step(m.h);
          const double f0 = base_loss ? *base_loss : f.loss(theta);
          return (f.loss(detail::shifted(theta, m.h, v)) - f0) / m.h;
        } else if constexpr (std::is_same_v<M, CentralDiff>) {
          detail::check_step(m.h);
          const double up = f.loss(detail::shifted(theta, m.h, v));
          return (up - f.loss(detail::shifted(theta, -m.h, v))) / (2.0 * m.h);
        } else {
          if constexpr (DifferentiableObjective<F>) {
            return dot(f.gradient(theta), v);
          } else {
            throw NumericError("Analytic mode needs an objective with an exact gradient");
          }
        }
      },
      mode);
  if (!std::isfinite(dd)) {
    throw NumericError("non-finite directional derivative in mode " + describe(mode));
  }
  return dd;
}

// Forward gradient dd * v.
inline ParamVector assemble_forward_gradient(double dd, std::span<const double> v) {
  if (!std::isfinite(dd)) throw NumericError("non-finite directional derivative");
  return scaled(v, dd);
}

// Upload unit: the perturbation is identified by its seed, never sent as a vector.
struct ForwardGradientRecord {
  std::uint32_t client_id = 0;
  PerturbationSeed seed;
  double dd = 0.0;
  std::uint32_t batch_size = 1;

  friend bool operator==(const ForwardGradientRecord&, const ForwardGradientRecord&) = default;
};

inline ParamVector reconstruct(const ForwardGradientRecord& record, std::size_t dim) {
  return assemble_forward_gradient(record.dd, gen_perturbation(record.seed, dim));
}

// Ordering applied before any floating-point reduction over records.
inline bool record_order(const ForwardGradientRecord& a, const ForwardGradientRecord& b) {
  if (a.client_id != b.client_id) return a.client_id < b.client_id;
  return a.seed < b.seed;
}

enum class FailurePolicy { kPropagate, kDrop };

struct ClientComputeResult {
  std::vector<ForwardGradientRecord> records;  // in seed order
  std::uint64_t passes_used = 0;
  std::optional<double> base_loss;  // f(theta), cached for follow-up requests
  std::vector<PerturbationSeed> failed;
};

namespace detail {

template <Objective F>
class CountingObjective {
 public:
  CountingObjective(const F& inner, std::uint64_t& passes) : inner_(&inner), passes_(&passes) {}

  double loss(const ParamVector& theta) const {
    ++*passes_;
    return inner_->loss(theta);
  }

  ParamVector gradient(const ParamVector& theta) const
    requires DifferentiableObjective<F>
  {
    return inner_->gradient(theta);
  }

 private:
  const F* inner_;
  std::uint64_t* passes_;
};

}  // namespace detail

// One client's work for a list of seeds on one minibatch.
//
// ForwardDiff evaluates f(theta) once (or reuses `cached_base_loss`) and then
// one perturbed pass per seed, so N seeds cost N+1 passes instead of 2N.
template <Objective F>
ClientComputeResult client_round_compute(const F& f, const ParamVector& theta,
                                         const std::vector<PerturbationSeed>& seeds,
                                         const DerivativeMode& mode, std::uint32_t client_id = 0,
                                         std::uint32_t batch_size = 1,
                                         std::optional<double> cached_base_loss = std::nullopt,
                                         FailurePolicy policy = FailurePolicy::kPropagate) {
  if (seeds.empty()) throw ShapeError("client_round_compute needs at least one seed");
  ClientComputeResult out;
  detail::CountingObjective<F> counted(f, out.passes_used);
  out.base_loss = cached_base_loss;
  if (std::holds_alternative<ForwardDiff>(mode) && !out.base_loss) {
    try {
      out.base_loss = counted.loss(theta);
      if (!std::isfinite(*out.base_loss)) throw NumericError("non-finite base loss");
    } catch (const NumericError&) {
      if (policy == FailurePolicy::kPropagate) throw;
      out.failed = seeds;
      out.base_loss.reset();
      return out;
    }
  }
  for (const PerturbationSeed& seed : seeds) {
    const ParamVector v = gen_perturbation(seed, theta.size());
    try {
      const double dd = directional_derivative(counted, theta, v, mode, out.base_loss);
      out.records.push_back({client_id, seed, dd, batch_size});
    } catch (const NumericError&) {
      if (policy == FailurePolicy::kPropagate) throw;
      out.failed.push_back(seed);
    }
  }
  return out;
}

// Model-level convenience overload.
inline ClientComputeResult client_round_compute(const ModelSpec& model,
                                                std::span<const double> frozen,
                                                const TrainableMask& mask,
                                                const ParamVector& theta, const Batch& batch,
                                                const std::vector<PerturbationSeed>& seeds,
                                                const DerivativeMode& mode,
                                                PassCounter* counter = nullptr) {
  const MaskedObjective objective(model, frozen, mask, batch, counter);
  return client_round_compute(objective, theta, seeds, mode, 0,
                              static_cast<std::uint32_t>(batch.size()));
}

// Mean of the reconstructed forward gradients, summed in record_order.
inline ParamVector mean_forward_gradient(std::vector<ForwardGradientRecord> records,
                                         std::size_t dim) {
  if (records.empty()) throw ShapeError("mean_forward_gradient needs records");
  std::sort(records.begin(), records.end(), record_order);
  ParamVector mean(dim, 0.0);
  for (const auto& r : records) axpy(r.dd, gen_perturbation(r.seed, dim), mean);
  for (double& x : mean) x /= static_cast<double>(records.size());
  return mean;
}

}  // namespace fwdfed
