#pragma once

// Round protocol for backpropagation-free federated training.
//
// Per FedSGD round:
//   1. the server dispatches the trainable weights and filtered seed lists to
//      the first `active_devices` clients of a seeded shuffle;
//   2. each client draws one minibatch and answers every seed with a
//      (seed, directional derivative) record;
//   3. the server checks the variance statistic over all records so far and
//      either grows the budget (devices first, then perturbations) or stops;
//   4. records are reconstructed in (client_id, seed) order, averaged, and
//      applied as one SGD step. The mean becomes the next round's reference
//      direction for seed filtering.
//
// Clients may be simulated on several threads; every reduction happens after
// sorting, so results do not depend on scheduling.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "fwdfed/data.hpp"
#include "fwdfed/error.hpp"
#include "fwdfed/fwdgrad.hpp"
#include "fwdfed/log.hpp"
#include "fwdfed/objective.hpp"
#include "fwdfed/pacing.hpp"
#include "fwdfed/rng.hpp"
#include "fwdfed/sampling.hpp"
#include "fwdfed/wire.hpp"

namespace fwdfed {

enum class Aggregation { kFedSgd, kFedAvg };
enum class DerivativeKind { kForward, kCentral, kAnalytic };

struct DerivativeConfig {
  DerivativeKind kind = DerivativeKind::kForward;
  double h = 0.0;  // 0 selects h = h_scale * (1 + ||theta||_inf)
  double h_scale = 1e-3;

  DerivativeMode resolve(std::span<const double> theta) const {
    const double step = h > 0.0 ? h : relative_step(theta, h_scale);
    switch (kind) {
      case DerivativeKind::kForward:
        return ForwardDiff{step};
      case DerivativeKind::kCentral:
        return CentralDiff{step};
      case DerivativeKind::kAnalytic:
        return Analytic{};
    }
    return ForwardDiff{step};
  }
};

struct FederationConfig {
  Aggregation aggregation = Aggregation::kFedSgd;
  std::size_t local_epochs = 1;  // FedAvg only
  double lr = 0.1;
  std::size_t batch_size = 8;
  DerivativeConfig derivative;
  PacingConfig pacing;
  SamplerConfig sampler;
  // Speculative records each active client computes while the server
  // validates; whatever is still in flight at the stop decision is discarded.
  std::size_t pipeline_prefetch = 0;
  std::size_t parallel = 1;  // client-simulation threads; never changes results
};

struct ServerState {
  std::uint64_t round = 0;
  ModelSpec model;
  ParamVector frozen;
  TrainableMask mask;
  ParamVector theta;
  std::optional<ParamVector> g_prev;
  std::uint64_t master_seed = 0;
  Allocation alloc;
  FederationConfig config;

  std::size_t dim() const { return theta.size(); }
};

struct ClientState {
  std::uint32_t id = 0;
  Dataset shard;
};

struct RoundMetrics {
  std::uint64_t round = 0;  // round number after the update (1-based)
  std::size_t global_ps = 0;
  std::uint64_t forward_passes = 0;
  double variance_at_stop = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::size_t dispatched = 0;
  std::size_t answered = 0;
  std::size_t discarded = 0;
  std::size_t failed = 0;
  bool budget_exhausted = false;
  Allocation alloc;
  std::vector<PacingEvent> events;
  std::vector<std::uint32_t> flagged_clients;
};

// Runs fn(i) for i in [0, n) on up to `threads` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// b rows drawn without replacement (the whole shard when it is smaller).
inline Batch draw_minibatch(const Dataset& shard, std::size_t batch_size, std::uint64_t seed) {
  std::vector<std::size_t> rows(shard.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  rng::Stream stream(seed);
  const std::size_t take = std::min(batch_size, rows.size());
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = i + static_cast<std::size_t>(stream.below(rows.size() - i));
    std::swap(rows[i], rows[j]);
  }
  rows.resize(take);
  std::sort(rows.begin(), rows.end());
  return select_rows(shard, rows);
}

// theta - lr * mean(reconstructed records), reduced in (client_id, seed) order.
inline ParamVector aggregate_fedsgd(const std::vector<ForwardGradientRecord>& records,
                                    std::size_t dim, double lr, const ParamVector& theta) {
  const ParamVector mean = mean_forward_gradient(records, dim);
  ParamVector next = theta;
  axpy(-lr, mean, next);
  return next;
}

// Weighted mean of client parameter vectors.
inline ParamVector aggregate_fedavg(std::span<const ParamVector> client_thetas,
                                    std::span<const double> weights) {
  if (client_thetas.empty() || client_thetas.size() != weights.size()) {
    throw ShapeError("aggregate_fedavg needs one weight per client");
  }
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw ShapeError("aggregate_fedavg weights must sum to > 0");
  ParamVector out(client_thetas.front().size(), 0.0);
  for (std::size_t c = 0; c < client_thetas.size(); ++c) {
    axpy(weights[c] / total, client_thetas[c], out);
  }
  return out;
}

struct LocalUpdate {
  ParamVector theta;
  std::vector<ForwardGradientRecord> records;
  std::uint64_t passes = 0;
  std::size_t failed = 0;
};

// E local forward-gradient SGD steps on one client; step e uses minibatch seed
// derive(batch_seed, "epoch", e) and seeds from derive(stream_base, "epoch", e).
inline LocalUpdate fedavg_local_update(const ServerState& server, const ClientState& client,
                                       std::uint64_t batch_seed, std::uint64_t stream_base,
                                       std::size_t perturbations) {
  const FederationConfig& cfg = server.config;
  LocalUpdate out{server.theta, {}, 0, 0};
  for (std::size_t e = 0; e < std::max<std::size_t>(1, cfg.local_epochs); ++e) {
    const Batch batch =
        draw_minibatch(client.shard, cfg.batch_size, rng::derive(batch_seed, "epoch", e));
    const MaskedObjective objective(server.model, server.frozen, server.mask, batch);
    const auto seeds = filter_seeds(server.g_prev, perturbations, cfg.sampler, server.dim(),
                                    rng::derive(stream_base, "epoch", e));
    const auto result = client_round_compute(
        objective, out.theta, seeds, cfg.derivative.resolve(out.theta), client.id,
        static_cast<std::uint32_t>(batch.size()), std::nullopt, FailurePolicy::kDrop);
    out.passes += result.passes_used;
    out.failed += result.failed.size();
    if (!result.records.empty()) {
      axpy(-cfg.lr, mean_forward_gradient(result.records, server.dim()), out.theta);
    }
    out.records.insert(out.records.end(), result.records.begin(), result.records.end());
  }
  return out;
}

namespace detail {

struct ClientSession {
  std::size_t client = 0;  // index into the client list
  std::uint32_t id = 0;
  Batch minibatch;
  std::uint64_t stream_base = 0;
  std::uint64_t requests = 0;
  std::optional<double> base_loss;
  std::vector<ForwardGradientRecord> records;   // arrived at the server
  std::vector<ForwardGradientRecord> inflight;  // computed, not yet accepted
  std::uint64_t passes = 0;
  std::uint64_t bytes_down = 0;
  std::size_t dispatched = 0;
  std::size_t failed = 0;
};

class FedSgdRound {
 public:
  FedSgdRound(ServerState& server, std::span<const ClientState> clients)
      : server_(server),
        clients_(clients),
        cfg_(server.config),
        round_seed_(rng::derive(server.master_seed, "round", server.round)),
        mode_(cfg_.derivative.resolve(server.theta)) {
    order_.resize(clients.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng::Stream(rng::derive(round_seed_, "select")).shuffle(order_);
  }

  RoundMetrics run() {
    Allocation alloc =
        cfg_.pacing.enabled ? server_.alloc : initial_allocation(cfg_.pacing);
    alloc.active_devices = std::min(alloc.active_devices, clients_.size());
    add_sessions(alloc.active_devices, alloc.perturbations_per_device);

    RoundMetrics m;
    m.round = server_.round + 1;
    const std::size_t dim = server_.dim();
    std::vector<ForwardGradientRecord> all;
    for (;;) {
      all = gather();
      const auto variance = gradient_variance(std::span<const ForwardGradientRecord>(all), dim,
                                              cfg_.pacing.min_records_for_variance,
                                              cfg_.pacing.form);
      PacingDecision decision;
      if (cfg_.pacing.enabled) {
        decision = pacing_decision(variance.value_or(std::numeric_limits<double>::infinity()),
                                   cfg_.pacing, alloc);
      }
      m.events.push_back({server_.round + 1, all.size(),
                          variance.value_or(std::numeric_limits<double>::infinity()), decision,
                          alloc});
      log::debug("round ", server_.round + 1, " records=", all.size(),
                 " D=", variance.value_or(-1.0), " -> ", describe(decision));
      if (decision.action == PacingAction::kStopAndAggregate) {
        m.variance_at_stop = variance.value_or(std::numeric_limits<double>::quiet_NaN());
        m.budget_exhausted = decision.budget_exhausted;
        break;
      }
      if (decision.action == PacingAction::kAddDevices) {
        const std::size_t target = std::min(decision.target, clients_.size());
        if (target <= alloc.active_devices) {
          m.budget_exhausted = true;
          m.variance_at_stop = variance.value_or(std::numeric_limits<double>::quiet_NaN());
          break;
        }
        add_sessions(target - alloc.active_devices, alloc.perturbations_per_device);
        alloc.active_devices = target;
      } else {
        grow_perturbations(decision.target - alloc.perturbations_per_device);
        alloc.perturbations_per_device = decision.target;
      }
    }

    if (all.empty()) {
      throw NumericError("round " + std::to_string(server_.round + 1) +
                         ": every client failed to produce a record");
    }
    for (const auto& s : sessions_) {
      m.forward_passes += s.passes;
      m.bytes_down += s.bytes_down;
      m.dispatched += s.dispatched;
      m.failed += s.failed;
      m.discarded += s.inflight.size();
      if (s.failed > 0) m.flagged_clients.push_back(s.id);
    }
    m.answered = all.size();
    m.global_ps = all.size();
    m.bytes_up = all.size() * wire::kRecordBytes;
    m.alloc = alloc;

    const ParamVector mean = mean_forward_gradient(all, dim);
    ParamVector next = server_.theta;
    axpy(-cfg_.lr, mean, next);
    if (!all_finite(next)) {
      throw DivergenceError("round " + std::to_string(server_.round + 1) +
                            ": parameters became non-finite");
    }
    server_.theta = std::move(next);
    server_.g_prev = mean;
    server_.alloc = cfg_.pacing.enabled ? alloc : server_.alloc;
    ++server_.round;
    return m;
  }

 private:
  std::vector<ForwardGradientRecord> gather() const {
    std::vector<ForwardGradientRecord> all;
    for (const auto& s : sessions_) all.insert(all.end(), s.records.begin(), s.records.end());
    std::sort(all.begin(), all.end(), record_order);
    return all;
  }

  // Computes `count` fresh records on session s (one seed request).
  std::vector<ForwardGradientRecord> request(ClientSession& s, std::size_t count) {
    const std::size_t dim = server_.dim();
    const std::uint64_t stream = rng::derive(s.stream_base, "request", s.requests);
    const auto seeds = filter_seeds(server_.g_prev, count, cfg_.sampler, dim, stream);
    wire::DispatchMessage msg;
    msg.round = server_.round;
    msg.client_id = s.id;
    msg.seeds = seeds;
    if (s.requests == 0) {
      msg.kind = wire::DispatchKind::kParamsAndSeeds;
      msg.params = server_.theta;
    } else {
      msg.kind = wire::DispatchKind::kSeedsOnly;
    }
    s.bytes_down += wire::encode_dispatch(msg).size();
    ++s.requests;
    s.dispatched += count;

    const MaskedObjective objective(server_.model, server_.frozen, server_.mask, s.minibatch);
    auto result = client_round_compute(objective, server_.theta, seeds, mode_, s.id,
                                       static_cast<std::uint32_t>(s.minibatch.size()),
                                       s.base_loss, FailurePolicy::kDrop);
    s.passes += result.passes_used;
    s.base_loss = result.base_loss;
    s.failed += result.failed.size();
    return std::move(result.records);
  }

  // Moves `count` records into the arrived set: prefetched ones first.
  void deliver(ClientSession& s, std::size_t count) {
    const std::size_t take = std::min(count, s.inflight.size());
    s.records.insert(s.records.end(), s.inflight.begin(), s.inflight.begin() + take);
    s.inflight.erase(s.inflight.begin(), s.inflight.begin() + take);
    if (count > take) {
      auto fresh = request(s, count - take);
      s.records.insert(s.records.end(), fresh.begin(), fresh.end());
    }
    if (cfg_.pipeline_prefetch > s.inflight.size()) {
      auto ahead = request(s, cfg_.pipeline_prefetch - s.inflight.size());
      s.inflight.insert(s.inflight.end(), ahead.begin(), ahead.end());
    }
  }

  void add_sessions(std::size_t count, std::size_t perturbations) {
    const std::size_t first = sessions_.size();
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t client = order_[first + k];
      ClientSession s;
      s.client = client;
      s.id = clients_[client].id;
      s.minibatch = draw_minibatch(clients_[client].shard, cfg_.batch_size,
                                   rng::derive(round_seed_, "batch", s.id));
      s.stream_base = rng::derive(round_seed_, "client", s.id);
      sessions_.push_back(std::move(s));
    }
    parallel_for(count, cfg_.parallel,
                 [&](std::size_t k) { deliver(sessions_[first + k], perturbations); });
  }

  void grow_perturbations(std::size_t extra) {
    parallel_for(sessions_.size(), cfg_.parallel,
                 [&](std::size_t k) { deliver(sessions_[k], extra); });
  }

  ServerState& server_;
  std::span<const ClientState> clients_;
  const FederationConfig& cfg_;
  std::uint64_t round_seed_;
  DerivativeMode mode_;
  std::vector<std::size_t> order_;
  std::vector<ClientSession> sessions_;
};

inline RoundMetrics run_fedavg_round(ServerState& server, std::span<const ClientState> clients) {
  const FederationConfig& cfg = server.config;
  const std::uint64_t round_seed = rng::derive(server.master_seed, "round", server.round);
  std::vector<std::size_t> order(clients.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Stream(rng::derive(round_seed, "select")).shuffle(order);
  const Allocation alloc = server.alloc;
  const std::size_t active = std::min(alloc.active_devices, clients.size());

  std::vector<LocalUpdate> updates(active);
  parallel_for(active, cfg.parallel, [&](std::size_t k) {
    const ClientState& c = clients[order[k]];
    updates[k] = fedavg_local_update(server, c, rng::derive(round_seed, "batch", c.id),
                                     rng::derive(round_seed, "client", c.id),
                                     alloc.perturbations_per_device);
  });

  RoundMetrics m;
  m.round = server.round + 1;
  m.alloc = alloc;
  std::vector<ParamVector> thetas;
  std::vector<double> weights;
  const std::size_t dim = server.dim();
  const std::size_t epochs = std::max<std::size_t>(1, cfg.local_epochs);
  for (std::size_t k = 0; k < active; ++k) {
    const ClientState& c = clients[order[k]];
    m.forward_passes += updates[k].passes;
    m.answered += updates[k].records.size();
    m.failed += updates[k].failed;
    m.dispatched += epochs * alloc.perturbations_per_device;
    m.bytes_down += wire::dispatch_size(dim, epochs * alloc.perturbations_per_device);
    m.bytes_up += wire::dispatch_size(dim, 0);
    if (updates[k].failed > 0) m.flagged_clients.push_back(c.id);
    thetas.push_back(std::move(updates[k].theta));
    weights.push_back(static_cast<double>(c.shard.size()));
  }
  m.global_ps = m.answered;
  if (m.answered == 0) throw NumericError("FedAvg round produced no records");

  ParamVector next = aggregate_fedavg(thetas, weights);
  if (!all_finite(next)) throw DivergenceError("FedAvg parameters became non-finite");
  if (cfg.lr > 0.0) {
    ParamVector pseudo(dim);
    for (std::size_t j = 0; j < dim; ++j) pseudo[j] = (server.theta[j] - next[j]) / cfg.lr;
    server.g_prev = std::move(pseudo);
  }
  server.theta = std::move(next);
  ++server.round;
  return m;
}

}  // namespace detail

// Executes one protocol round and advances the server state.
inline RoundMetrics run_round(ServerState& server, std::span<const ClientState> clients) {
  if (clients.empty()) throw ConfigError("clients", "no clients");
  if (server.config.aggregation == Aggregation::kFedAvg) {
    return detail::run_fedavg_round(server, clients);
  }
  return detail::FedSgdRound(server, clients).run();
}

// --- training loop -------------------------------------------------------

struct TrainSetup {
  ModelSpec model;
  ParamVector frozen;
  TrainableMask mask;
  ParamVector theta0;
  std::vector<ClientState> clients;
  Dataset train;
  Dataset eval;
};

struct TrainConfig {
  FederationConfig federation;
  double target_accuracy = 0.9;
  std::size_t max_rounds = 300;
  std::size_t eval_interval = 1;
  std::uint64_t master_seed = 0;
};

struct MetricsRow {
  std::uint64_t round = 0;
  std::size_t global_ps = 0;
  std::uint64_t forward_passes_cum = 0;
  double variance_at_stop = 0.0;
  double train_loss = 0.0;
  double eval_accuracy = 0.0;
  std::uint64_t bytes_up_cum = 0;
  std::uint64_t bytes_down_cum = 0;
};

struct MetricsHistory {
  std::vector<MetricsRow> rows;  // one per evaluation, starting with round 0
  std::vector<RoundMetrics> rounds;
  bool reached_target = false;
  std::size_t rounds_run = 0;
  std::optional<std::size_t> rounds_to_target;
  std::optional<std::uint64_t> passes_to_target;
  ParamVector final_theta;
};

inline MetricsHistory train(const TrainSetup& setup, const TrainConfig& config) {
  if (config.eval_interval < 1) throw ConfigError("train.eval_interval", "must be >= 1");
  config.federation.pacing.validate();
  config.federation.sampler.validate();
  ServerState server;
  server.model = setup.model;
  server.frozen = setup.frozen;
  server.mask = setup.mask;
  server.theta = setup.theta0;
  server.master_seed = config.master_seed;
  server.alloc = initial_allocation(config.federation.pacing);
  server.config = config.federation;

  MetricsHistory history;
  MetricsRow running;
  auto evaluate = [&](std::uint64_t round) {
    const double loss =
        forward_loss(setup.model, setup.frozen, setup.mask, server.theta, setup.train);
    if (!std::isfinite(loss)) {
      throw DivergenceError("training loss became non-finite at round " + std::to_string(round));
    }
    running.round = round;
    running.train_loss = loss;
    running.eval_accuracy =
        accuracy(setup.model, setup.frozen, setup.mask, server.theta, setup.eval);
    history.rows.push_back(running);
    log::info("round ", round, " loss=", loss, " acc=", running.eval_accuracy,
              " global_ps=", running.global_ps);
    return running.eval_accuracy >= config.target_accuracy;
  };

  bool done = evaluate(0);
  if (done) {
    history.reached_target = true;
    history.rounds_to_target = 0;
    history.passes_to_target = 0;
  }
  for (std::size_t r = 1; !done && r <= config.max_rounds; ++r) {
    RoundMetrics m;
    try {
      m = run_round(server, setup.clients);
    } catch (const NumericError& e) {
      throw DivergenceError(e.what());
    }
    running.global_ps = m.global_ps;
    running.forward_passes_cum += m.forward_passes;
    running.variance_at_stop = m.variance_at_stop;
    running.bytes_up_cum += m.bytes_up;
    running.bytes_down_cum += m.bytes_down;
    history.rounds.push_back(std::move(m));
    history.rounds_run = r;
    if (r % config.eval_interval == 0 || r == config.max_rounds) {
      if (evaluate(r)) {
        done = true;
        history.reached_target = true;
        history.rounds_to_target = r;
        history.passes_to_target = running.forward_passes_cum;
      }
    }
  }
  history.final_theta = server.theta;
  return history;
}

// Full-batch gradient descent with backpropagation; reference baseline only.
inline ParamVector bp_sgd_baseline(const TrainSetup& setup, double lr, std::size_t steps) {
  ParamVector theta = setup.theta0;
  for (std::size_t s = 0; s < steps; ++s) {
    const ParamVector g =
        analytic_gradient(setup.model, setup.frozen, setup.mask, theta, setup.train);
    axpy(-lr, g, theta);
  }
  return theta;
}

}  // namespace fwdfed
