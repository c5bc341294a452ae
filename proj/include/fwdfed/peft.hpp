#pragma once

// Trainable-parameter masks for parameter-efficient fine-tuning.
//
// Trainable layouts, per dense layer in order:
//   Full      : the full parameter vector itself
//   BiasOnly  : bias (out)
//   LowRank r : A (r x in, row-major), B (out x r, row-major), bias delta (out)
// LowRank materializes W = W0 + B*A and b = b0 + delta.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fwdfed/error.hpp"
#include "fwdfed/model.hpp"
#include "fwdfed/rng.hpp"
#include "fwdfed/vector_ops.hpp"

namespace fwdfed {

enum class PeftScheme { kFull, kBiasOnly, kLowRank };

struct TrainableMask {
  PeftScheme scheme = PeftScheme::kFull;
  std::size_t rank = 0;  // LowRank only

  static TrainableMask full() { return {PeftScheme::kFull, 0}; }
  static TrainableMask bias_only() { return {PeftScheme::kBiasOnly, 0}; }
  static TrainableMask low_rank(std::size_t r) { return {PeftScheme::kLowRank, r}; }

  friend bool operator==(const TrainableMask&, const TrainableMask&) = default;
};

inline std::string describe(const TrainableMask& mask) {
  switch (mask.scheme) {
    case PeftScheme::kFull:
      return "full";
    case PeftScheme::kBiasOnly:
      return "bias_only";
    case PeftScheme::kLowRank:
      return "low_rank:" + std::to_string(mask.rank);
  }
  return "?";
}

// Inverse of describe(): "full", "bias_only", "low_rank:<r>".
inline TrainableMask parse_mask(const std::string& text) {
  if (text == "full") return TrainableMask::full();
  if (text == "bias_only") return TrainableMask::bias_only();
  const std::string prefix = "low_rank:";
  if (text.rfind(prefix, 0) == 0) {
    const std::string digits = text.substr(prefix.size());
    if (!digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos) {
      return TrainableMask::low_rank(std::stoul(digits));
    }
  }
  throw ConfigError("mask", "unknown mask '" + text + "' (full | bias_only | low_rank:<r>)");
}

inline std::size_t trainable_dim(const TrainableMask& mask, const ModelSpec& spec) {
  std::size_t n = 0;
  for (const LayerView& v : layer_views(spec)) {
    switch (mask.scheme) {
      case PeftScheme::kFull:
        n += v.in * v.out + v.out;
        break;
      case PeftScheme::kBiasOnly:
        n += v.out;
        break;
      case PeftScheme::kLowRank:
        if (mask.rank < 1 || mask.rank >= std::min(v.in, v.out)) {
          throw ConfigError("mask.rank", "rank " + std::to_string(mask.rank) +
                                             " invalid for a " + std::to_string(v.out) + "x" +
                                             std::to_string(v.in) + " layer");
        }
        n += mask.rank * (v.in + v.out) + v.out;
        break;
    }
  }
  return n;
}

namespace detail {

inline void check_mask_dims(const TrainableMask& mask, const ModelSpec& spec,
                            std::span<const double> frozen, std::span<const double> trainable) {
  if (frozen.size() != param_count(spec)) {
    throw ShapeError("frozen length " + std::to_string(frozen.size()) + " != " +
                     std::to_string(param_count(spec)));
  }
  const std::size_t want = trainable_dim(mask, spec);
  if (trainable.size() != want) {
    throw ShapeError("trainable length " + std::to_string(trainable.size()) + " != " +
                     std::to_string(want) + " for mask " + describe(mask));
  }
}

}  // namespace detail

// Full parameter vector seen by the model for given frozen and trainable parts.
inline ParamVector materialize(const TrainableMask& mask, const ModelSpec& spec,
                               std::span<const double> frozen,
                               std::span<const double> trainable) {
  detail::check_mask_dims(mask, spec, frozen, trainable);
  if (mask.scheme == PeftScheme::kFull) return ParamVector(trainable.begin(), trainable.end());

  ParamVector full(frozen.begin(), frozen.end());
  std::size_t t = 0;
  const std::size_t r = mask.rank;
  for (const LayerView& v : layer_views(spec)) {
    if (mask.scheme == PeftScheme::kBiasOnly) {
      for (std::size_t o = 0; o < v.out; ++o) full[v.bias_offset + o] = trainable[t++];
      continue;
    }
    const double* a = trainable.data() + t;          // r x in
    const double* b = trainable.data() + t + r * v.in;  // out x r
    for (std::size_t o = 0; o < v.out; ++o) {
      for (std::size_t i = 0; i < v.in; ++i) {
        double delta = 0.0;
        for (std::size_t k = 0; k < r; ++k) delta += b[o * r + k] * a[k * v.in + i];
        full[v.weight_offset + o * v.in + i] += delta;
      }
    }
    t += r * (v.in + v.out);
    for (std::size_t o = 0; o < v.out; ++o) full[v.bias_offset + o] += trainable[t++];
  }
  return full;
}

// Chain rule from a full-parameter gradient to trainable coordinates.
inline ParamVector pull_back_gradient(const TrainableMask& mask, const ModelSpec& spec,
                                      std::span<const double> trainable,
                                      std::span<const double> full_grad) {
  if (mask.scheme == PeftScheme::kFull) return ParamVector(full_grad.begin(), full_grad.end());
  ParamVector g(trainable_dim(mask, spec), 0.0);
  std::size_t t = 0;
  const std::size_t r = mask.rank;
  for (const LayerView& v : layer_views(spec)) {
    if (mask.scheme == PeftScheme::kBiasOnly) {
      for (std::size_t o = 0; o < v.out; ++o) g[t++] = full_grad[v.bias_offset + o];
      continue;
    }
    const double* a = trainable.data() + t;
    const double* b = trainable.data() + t + r * v.in;
    const double* gw = full_grad.data() + v.weight_offset;
    double* ga = g.data() + t;
    double* gb = g.data() + t + r * v.in;
    // dL/dA = B^T dW ; dL/dB = dW A^T
    for (std::size_t o = 0; o < v.out; ++o) {
      for (std::size_t i = 0; i < v.in; ++i) {
        const double d = gw[o * v.in + i];
        for (std::size_t k = 0; k < r; ++k) {
          ga[k * v.in + i] += b[o * r + k] * d;
          gb[o * r + k] += d * a[k * v.in + i];
        }
      }
    }
    t += r * (v.in + v.out);
    for (std::size_t o = 0; o < v.out; ++o) g[t++] = full_grad[v.bias_offset + o];
  }
  return g;
}

// Starting trainable vector: Full copies the frozen model, BiasOnly copies its
// biases, LowRank draws A ~ U[-1/sqrt(in), 1/sqrt(in)] with B = 0 and zero bias
// delta so the initial model equals the frozen one.
inline ParamVector initial_trainable(const TrainableMask& mask, const ModelSpec& spec,
                                     std::span<const double> frozen, std::uint64_t seed) {
  ParamVector t;
  t.reserve(trainable_dim(mask, spec));
  if (mask.scheme == PeftScheme::kFull) return ParamVector(frozen.begin(), frozen.end());
  rng::Stream stream(rng::derive(seed, "low-rank-init"));
  for (const LayerView& v : layer_views(spec)) {
    if (mask.scheme == PeftScheme::kBiasOnly) {
      t.insert(t.end(), frozen.begin() + v.bias_offset,
               frozen.begin() + v.bias_offset + v.out);
      continue;
    }
    const double a = 1.0 / std::sqrt(static_cast<double>(v.in));
    for (std::size_t k = 0; k < mask.rank * v.in; ++k) t.push_back(stream.uniform(-a, a));
    t.insert(t.end(), mask.rank * v.out + v.out, 0.0);
  }
  return t;
}

}  // namespace fwdfed
