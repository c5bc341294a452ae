#pragma once

// Small dense models evaluated on the full parameter vector.
//
// Parameter layout (fixed, shared by every seed consumer): layers in order,
// each layer stores its weight matrix row-major as (out x in) followed by its
// bias vector (out).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fwdfed/error.hpp"
#include "fwdfed/rng.hpp"
#include "fwdfed/vector_ops.hpp"

namespace fwdfed {

enum class ModelKind { kLinear, kMlp };
enum class Activation { kRelu, kTanh };
enum class LossKind { kCrossEntropy, kMse };

struct ModelSpec {
  ModelKind kind = ModelKind::kMlp;
  std::vector<std::size_t> layer_sizes;  // input, hidden..., output
  Activation activation = Activation::kTanh;
  LossKind loss = LossKind::kCrossEntropy;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t n_layers() const { return layer_sizes.size() - 1; }

  void validate() const {
    if (layer_sizes.size() < 2) throw ConfigError("model.layers", "need at least 2 sizes");
    for (std::size_t s : layer_sizes) {
      if (s == 0) throw ConfigError("model.layers", "sizes must be positive");
    }
    if (kind == ModelKind::kLinear && layer_sizes.size() != 2) {
      throw ConfigError("model.layers", "linear model takes exactly 2 sizes");
    }
    if (loss == LossKind::kCrossEntropy && output_dim() < 2) {
      throw ConfigError("model.layers", "cross-entropy needs output size >= 2");
    }
  }
};

inline ModelSpec linear_model(std::size_t in, std::size_t out,
                              LossKind loss = LossKind::kCrossEntropy) {
  return ModelSpec{ModelKind::kLinear, {in, out}, Activation::kTanh, loss};
}

inline ModelSpec mlp_model(std::vector<std::size_t> sizes, Activation act = Activation::kTanh,
                           LossKind loss = LossKind::kCrossEntropy) {
  return ModelSpec{ModelKind::kMlp, std::move(sizes), act, loss};
}

// Offsets of one dense layer inside the full parameter vector.
struct LayerView {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
};

inline std::vector<LayerView> layer_views(const ModelSpec& spec) {
  std::vector<LayerView> views;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
    LayerView v;
    v.in = spec.layer_sizes[l];
    v.out = spec.layer_sizes[l + 1];
    v.weight_offset = offset;
    v.bias_offset = offset + v.in * v.out;
    offset = v.bias_offset + v.out;
    views.push_back(v);
  }
  return views;
}

inline std::size_t param_count(const ModelSpec& spec) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
    n += spec.layer_sizes[l] * spec.layer_sizes[l + 1] + spec.layer_sizes[l + 1];
  }
  return n;
}

// Rows of samples. Doubles as a dataset.
//   classes : one label per row (cross-entropy)
//   targets : n x output_dim row-major (MSE)
struct Batch {
  std::size_t input_dim = 0;
  std::vector<double> inputs;  // n x input_dim row-major
  std::vector<std::size_t> classes;
  std::vector<double> targets;

  std::size_t size() const { return input_dim == 0 ? 0 : inputs.size() / input_dim; }
  const double* row(std::size_t i) const { return inputs.data() + i * input_dim; }
};

inline Batch select_rows(const Batch& from, const std::vector<std::size_t>& rows) {
  Batch out;
  out.input_dim = from.input_dim;
  const std::size_t tdim = from.size() == 0 ? 0 : from.targets.size() / from.size();
  for (std::size_t r : rows) {
    out.inputs.insert(out.inputs.end(), from.row(r), from.row(r) + from.input_dim);
    if (!from.classes.empty()) out.classes.push_back(from.classes[r]);
    if (tdim > 0) {
      out.targets.insert(out.targets.end(), from.targets.begin() + r * tdim,
                         from.targets.begin() + (r + 1) * tdim);
    }
  }
  return out;
}

inline void check_batch(const ModelSpec& spec, const Batch& batch) {
  if (batch.input_dim != spec.input_dim()) {
    throw ShapeError("batch input dim " + std::to_string(batch.input_dim) + " != model input " +
                     std::to_string(spec.input_dim()));
  }
  const std::size_t n = batch.size();
  if (n == 0 || batch.inputs.size() != n * batch.input_dim) {
    throw ShapeError("batch must hold at least one complete row");
  }
  if (spec.loss == LossKind::kCrossEntropy) {
    if (batch.classes.size() != n) throw ShapeError("batch needs one class label per row");
    for (std::size_t c : batch.classes) {
      if (c >= spec.output_dim()) {
        throw ShapeError("class label " + std::to_string(c) + " out of range");
      }
    }
  } else if (batch.targets.size() != n * spec.output_dim()) {
    throw ShapeError("batch needs output_dim regression targets per row");
  }
}

// Uniform in [-a, a], a = 1/sqrt(fan_in), weights and biases alike.
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector p(param_count(spec));
  rng::Stream stream(rng::derive(seed, "model-init"));
  for (const LayerView& v : layer_views(spec)) {
    const double a = 1.0 / std::sqrt(static_cast<double>(v.in));
    for (std::size_t i = 0; i < v.in * v.out + v.out; ++i) {
      p[v.weight_offset + i] = stream.uniform(-a, a);
    }
  }
  return p;
}

namespace detail {

inline double activate(Activation act, double z) {
  return act == Activation::kTanh ? std::tanh(z) : std::max(0.0, z);
}

// Derivative expressed through the activation output a = act(z).
inline double activate_grad(Activation act, double a) {
  return act == Activation::kTanh ? 1.0 - a * a : (a > 0.0 ? 1.0 : 0.0);
}

// Activations of every layer for one sample; last entry holds raw outputs.
inline std::vector<std::vector<double>> forward_sample(const ModelSpec& spec,
                                                       const std::vector<LayerView>& views,
                                                       std::span<const double> params,
                                                       const double* x) {
  std::vector<std::vector<double>> acts;
  acts.emplace_back(x, x + spec.input_dim());
  for (std::size_t l = 0; l < views.size(); ++l) {
    const LayerView& v = views[l];
    const std::vector<double>& in = acts.back();
    std::vector<double> out(v.out);
    for (std::size_t o = 0; o < v.out; ++o) {
      double z = params[v.bias_offset + o];
      const double* w = params.data() + v.weight_offset + o * v.in;
      for (std::size_t i = 0; i < v.in; ++i) z += w[i] * in[i];
      out[o] = (l + 1 == views.size()) ? z : activate(spec.activation, z);
    }
    acts.push_back(std::move(out));
  }
  return acts;
}

// Loss of one sample; fills dloss/doutput when `grad_out` is non-null.
inline double sample_loss(const ModelSpec& spec, std::span<const double> out, const Batch& batch,
                          std::size_t row, std::vector<double>* grad_out) {
  const std::size_t k = out.size();
  if (spec.loss == LossKind::kCrossEntropy) {
    const double m = *std::max_element(out.begin(), out.end());
    double z = 0.0;
    for (double o : out) z += std::exp(o - m);
    const double lse = m + std::log(z);
    const std::size_t y = batch.classes[row];
    if (grad_out != nullptr) {
      grad_out->assign(k, 0.0);
      for (std::size_t c = 0; c < k; ++c) (*grad_out)[c] = std::exp(out[c] - lse);
      (*grad_out)[y] -= 1.0;
    }
    return lse - out[y];
  }
  double loss = 0.0;
  if (grad_out != nullptr) grad_out->assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    const double d = out[c] - batch.targets[row * k + c];
    loss += d * d;
    if (grad_out != nullptr) (*grad_out)[c] = 2.0 * d;
  }
  return loss;
}

}  // namespace detail

// Mean loss over the batch for a full parameter vector.
inline double full_loss(const ModelSpec& spec, std::span<const double> params,
                        const Batch& batch) {
  if (params.size() != param_count(spec)) {
    throw ShapeError("parameter length " + std::to_string(params.size()) + " != " +
                     std::to_string(param_count(spec)));
  }
  if (!all_finite(params)) throw NumericError("non-finite model parameter");
  check_batch(spec, batch);
  const auto views = layer_views(spec);
  double total = 0.0;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto acts = detail::forward_sample(spec, views, params, batch.row(r));
    total += detail::sample_loss(spec, acts.back(), batch, r, nullptr);
  }
  return total / static_cast<double>(batch.size());
}

// Backpropagation over the full parameter vector. Test oracle and baseline only.
inline ParamVector full_gradient(const ModelSpec& spec, std::span<const double> params,
                                 const Batch& batch) {
  if (params.size() != param_count(spec)) throw ShapeError("parameter length mismatch");
  if (!all_finite(params)) throw NumericError("non-finite model parameter");
  check_batch(spec, batch);
  const auto views = layer_views(spec);
  ParamVector grad(params.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<double> delta;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto acts = detail::forward_sample(spec, views, params, batch.row(r));
    detail::sample_loss(spec, acts.back(), batch, r, &delta);
    for (std::size_t l = views.size(); l-- > 0;) {
      const LayerView& v = views[l];
      const std::vector<double>& in = acts[l];
      for (std::size_t o = 0; o < v.out; ++o) {
        const double d = delta[o] * inv_n;
        grad[v.bias_offset + o] += d;
        double* gw = grad.data() + v.weight_offset + o * v.in;
        for (std::size_t i = 0; i < v.in; ++i) gw[i] += d * in[i];
      }
      if (l == 0) break;
      std::vector<double> prev(v.in, 0.0);
      for (std::size_t o = 0; o < v.out; ++o) {
        const double* w = params.data() + v.weight_offset + o * v.in;
        for (std::size_t i = 0; i < v.in; ++i) prev[i] += w[i] * delta[o];
      }
      for (std::size_t i = 0; i < v.in; ++i) {
        prev[i] *= detail::activate_grad(spec.activation, in[i]);
      }
      delta = std::move(prev);
    }
  }
  return grad;
}

// Argmax class per row; ties go to the lowest index.
inline std::vector<std::size_t> predict(const ModelSpec& spec, std::span<const double> params,
                                        const Batch& batch) {
  const auto views = layer_views(spec);
  std::vector<std::size_t> out;
  out.reserve(batch.size());
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto acts = detail::forward_sample(spec, views, params, batch.row(r));
    const auto& logits = acts.back();
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c) {
      if (logits[c] > logits[best]) best = c;
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace fwdfed
