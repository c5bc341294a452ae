#pragma once

#include <concepts>
#include <cstdint>
#include <span>

#include "fwdfed/error.hpp"
#include "fwdfed/model.hpp"
#include "fwdfed/peft.hpp"
#include "fwdfed/vector_ops.hpp"

namespace fwdfed {

// Forward passes spent by one run or one client. Not shared between threads;
// per-client counters are summed in client order.
struct PassCounter {
  std::uint64_t passes = 0;
};

// Anything exposing a scalar loss over a trainable vector.
template <typename F>
concept Objective = requires(const F& f, const ParamVector& theta) {
  { f.loss(theta) } -> std::convertible_to<double>;
};

// An objective that can also produce its exact gradient (test oracle).
template <typename F>
concept DifferentiableObjective = Objective<F> && requires(const F& f, const ParamVector& theta) {
  { f.gradient(theta) } -> std::convertible_to<ParamVector>;
};

// Mean batch loss of the model with the trainable part composed into the
// frozen weights. Counts one forward pass per call when a counter is given.
inline double forward_loss(const ModelSpec& model, std::span<const double> frozen,
                           const TrainableMask& mask, std::span<const double> trainable,
                           const Batch& batch, PassCounter* counter = nullptr) {
  detail::check_mask_dims(mask, model, frozen, trainable);
  if (!all_finite(trainable)) throw NumericError("non-finite trainable parameter");
  const ParamVector full = materialize(mask, model, frozen, trainable);
  const double loss = full_loss(model, full, batch);
  if (counter != nullptr) ++counter->passes;
  return loss;
}

// Exact gradient of the mean batch loss w.r.t. the trainable coordinates.
inline ParamVector analytic_gradient(const ModelSpec& model, std::span<const double> frozen,
                                     const TrainableMask& mask,
                                     std::span<const double> trainable, const Batch& batch) {
  detail::check_mask_dims(mask, model, frozen, trainable);
  if (!all_finite(trainable)) throw NumericError("non-finite trainable parameter");
  const ParamVector full = materialize(mask, model, frozen, trainable);
  return pull_back_gradient(mask, model, trainable, full_gradient(model, full, batch));
}

inline double accuracy(const ModelSpec& model, std::span<const double> frozen,
                       const TrainableMask& mask, std::span<const double> trainable,
                       const Batch& dataset) {
  if (model.loss != LossKind::kCrossEntropy) {
    throw UnsupportedMetricError("accuracy needs a cross-entropy (classification) model");
  }
  detail::check_mask_dims(mask, model, frozen, trainable);
  check_batch(model, dataset);
  const ParamVector full = materialize(mask, model, frozen, trainable);
  const auto predicted = predict(model, full, dataset);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == dataset.classes[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

// Binds model, frozen weights, mask and batch into an Objective.
class MaskedObjective {
 public:
  MaskedObjective(const ModelSpec& model, std::span<const double> frozen,
                  const TrainableMask& mask, const Batch& batch, PassCounter* counter = nullptr)
      : model_(&model), frozen_(frozen), mask_(mask), batch_(&batch), counter_(counter) {}
  // Holds references: temporaries would dangle.
  MaskedObjective(const ModelSpec&&, std::span<const double>, const TrainableMask&,
                  const Batch&, PassCounter* = nullptr) = delete;
  MaskedObjective(const ModelSpec&, std::span<const double>, const TrainableMask&,
                  const Batch&&, PassCounter* = nullptr) = delete;

  double loss(const ParamVector& theta) const {
    return forward_loss(*model_, frozen_, mask_, theta, *batch_, counter_);
  }

  ParamVector gradient(const ParamVector& theta) const {
    return analytic_gradient(*model_, frozen_, mask_, theta, *batch_);
  }

 private:
  const ModelSpec* model_;
  std::span<const double> frozen_;
  TrainableMask mask_;
  const Batch* batch_;
  PassCounter* counter_;
};

}  // namespace fwdfed
