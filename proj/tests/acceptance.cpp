// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
// failure. Training-based checks run on the default blob task.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fwdfed/fwdfed.hpp"

using namespace fwdfed;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Batch random_batch(std::size_t in, std::size_t classes, std::size_t n, std::uint64_t seed) {
  rng::Stream s(seed);
  Batch b;
  b.input_dim = in;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < in; ++j) b.inputs.push_back(s.normal());
    b.classes.push_back(s.below(classes));
  }
  return b;
}

RunConfig blob_task(std::uint64_t seed) {
  RunConfig c;
  c.train.master_seed = seed;
  return c;
}

std::size_t rounds_or_budget(const MetricsHistory& h, std::size_t budget) {
  return h.rounds_to_target ? *h.rounds_to_target : budget + 1;
}

// Mean of Analytic forward gradients for seeds (base, 0..n-1).
ParamVector mean_analytic(const ParamVector& grad, std::uint64_t base, std::size_t n) {
  ParamVector sum(grad.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const ParamVector v = gen_perturbation({base, i}, grad.size());
    axpy(dot(grad, v), v, sum);
  }
  for (double& x : sum) x /= static_cast<double>(n);
  return sum;
}

Outcome unbiasedness() {
  const auto t0 = Clock::now();
  const ModelSpec m = mlp_model({4, 8, 3});
  const ParamVector theta = init_params(m, 3);
  const Batch b = random_batch(4, 3, 32, 4);
  const MaskedObjective f(m, theta, TrainableMask::full(), b);
  const ParamVector grad = f.gradient(theta);
  if (grad.size() != 67) return {false, "unexpected trainable dim"};

  std::vector<PerturbationSeed> seeds;
  for (std::uint64_t i = 0; i < 200000; ++i) seeds.push_back({rng::derive(1, "unbiased"), i});
  const auto result = client_round_compute(f, theta, seeds, Analytic{});
  const double err = relative_l2_error(mean_forward_gradient(result.records, 67), grad);

  // RMS error over independent replicates at M and 4M.
  double sq_small = 0.0, sq_large = 0.0;
  const int reps = 6;
  for (int r = 0; r < reps; ++r) {
    const double es =
        relative_l2_error(mean_analytic(grad, rng::derive(2, "small", r), 50000), grad);
    const double el =
        relative_l2_error(mean_analytic(grad, rng::derive(2, "large", r), 200000), grad);
    sq_small += es * es;
    sq_large += el * el;
  }
  const double ratio = std::sqrt(sq_small / sq_large);
  const double secs = seconds_since(t0);
  return {err <= 0.05 && ratio >= 1.4 && ratio <= 2.6 && secs < 30.0,
          fmt("rel_err(200k)=%.4f (<=0.05), rms ratio 50k/200k=%.3f (in [1.4,2.6]), %.1fs (<30s)",
              err, ratio, secs)};
}

Outcome finite_difference_consistency() {
  struct Bowl {
    double loss(const ParamVector& t) const { return 2.0 * (t[0] * t[0] + t[1] * t[1]); }
    ParamVector gradient(const ParamVector& t) const { return {4.0 * t[0], 4.0 * t[1]}; }
  };
  auto ratio = [](const auto& f, const ParamVector& t, const ParamVector& v) {
    const double exact = directional_derivative(f, t, v, Analytic{});
    const double e2 = std::abs(directional_derivative(f, t, v, ForwardDiff{1e-2}) - exact);
    const double e3 = std::abs(directional_derivative(f, t, v, ForwardDiff{1e-3}) - exact);
    return e2 / e3;
  };
  const double quad = ratio(Bowl{}, ParamVector{0.5, 0.5}, ParamVector{1.0, 0.0});
  const ModelSpec m = mlp_model({4, 8, 3});
  const ParamVector theta = init_params(m, 8);
  const Batch batch = random_batch(4, 3, 16, 9);
  const MaskedObjective f(m, theta, TrainableMask::full(), batch);
  const double mlp = ratio(f, theta, gen_perturbation({rng::derive(8, "fd-direction"), 0}, 67));
  auto ok = [](double r) { return r >= 5.0 && r <= 20.0; };
  return {ok(quad) && ok(mlp),
          fmt("err(h=1e-2)/err(h=1e-3): quadratic %.3f, mlp %.3f (in [5,20])", quad, mlp)};
}

Outcome pass_accounting() {
  const ModelSpec m = mlp_model({4, 8, 3});
  const ParamVector theta = init_params(m, 1);
  std::vector<PerturbationSeed> seeds;
  for (std::uint64_t i = 0; i < 50; ++i) seeds.push_back({7, i});
  PassCounter counter;
  const auto r = client_round_compute(m, theta, TrainableMask::full(), theta,
                                      random_batch(4, 3, 8, 2), seeds, ForwardDiff{1e-3},
                                      &counter);
  return {r.passes_used == 51 && counter.passes == 51,
          fmt("N=50 ForwardDiff: %llu passes reported, %llu counted (expect 51)",
              static_cast<unsigned long long>(r.passes_used),
              static_cast<unsigned long long>(counter.passes))};
}

Outcome orthogonality() {
  const double expected = std::erf(0.03 * std::sqrt(1000.0) / std::sqrt(2.0));
  const double got = orthogonality_census(1000, 100000, 0.03, 2024);
  return {std::abs(got - expected) <= 0.01,
          fmt("fraction |cos|<0.03 at dim 1000 = %.4f, oracle %.4f (+-0.01)", got, expected)};
}

Outcome variance_hand_cases() {
  const std::vector<ParamVector> same(4, ParamVector{0.7, -2.0, 1.5});
  const double d_same = gradient_variance(same);
  const std::vector<ParamVector> pair{{1.0, 0.0}, {-1.0, 0.0}};
  const double d_pair = gradient_variance(pair);
  std::vector<ParamVector> g;
  for (std::uint64_t i = 0; i < 10; ++i) g.push_back(gen_perturbation({3, i}, 12));
  const double d = gradient_variance(g);
  double worst = 0.0;
  for (double c : {0.25, 2.0, 10.0}) {
    std::vector<ParamVector> h;
    for (const auto& v : g) h.push_back(scaled(v, c));
    worst = std::max(worst, std::abs(gradient_variance(h) - c * c * d) / (c * c * d));
  }
  return {d_same == 0.0 && d_pair == 1.0 && worst <= 1e-12,
          fmt("identical D=%g, opposed pair D=%.17g, scaling rel dev %.2e (<=1e-12)", d_same,
              d_pair, worst)};
}

Outcome pacing_behaviour() {
  const RunConfig base = blob_task(0);
  const TrainSetup setup = build_setup(base);
  const MetricsHistory adaptive = train(setup, base.train);
  std::size_t monotone = 0, pairs = 0;
  for (std::size_t i = 1; i < adaptive.rounds.size(); ++i) {
    ++pairs;
    monotone += adaptive.rounds[i].global_ps >= adaptive.rounds[i - 1].global_ps;
  }
  const double frac = pairs ? static_cast<double>(monotone) / pairs : 1.0;

  auto fixed = [&](std::size_t devices, std::size_t perts) {
    TrainConfig tc = base.train;
    tc.federation.pacing.enabled = false;
    tc.federation.pacing.initial_devices = devices;
    tc.federation.pacing.initial_perturbations = perts;
    return train(setup, tc);
  };
  const PacingConfig& p = base.train.federation.pacing;
  const MetricsHistory small = fixed(p.initial_devices, p.initial_perturbations);
  const MetricsHistory large = fixed(p.max_devices, p.max_perturbations_per_device);
  double best = INFINITY;
  for (const auto* h : {&small, &large}) {
    if (h->passes_to_target) best = std::min(best, static_cast<double>(*h->passes_to_target));
  }
  const double passes =
      adaptive.passes_to_target ? static_cast<double>(*adaptive.passes_to_target) : INFINITY;
  auto show = [](const MetricsHistory& h) {
    return h.passes_to_target ? std::to_string(*h.passes_to_target) : std::string("NA");
  };
  const bool ok = frac >= 0.9 && adaptive.reached_target && passes <= 1.5 * best;
  return {ok, fmt("global-PS monotone in %.0f%% of %zu pairs (>=90%%); passes adaptive %s, "
                  "fixed small %s, fixed large %s (adaptive <= 1.5x best)",
                  100 * frac, pairs, show(adaptive).c_str(), show(small).c_str(),
                  show(large).c_str())};
}

Outcome sampling_direction() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    RunConfig c = blob_task(seed);
    const auto rows = run_sampling_ablation(c, {0.2, 1.0});
    auto rounds = [&](const AblationRow& r) {
      return r.rounds_to_target ? *r.rounds_to_target : c.train.max_rounds + 1;
    };
    const std::size_t r02 = rounds(rows[0]);
    const std::size_t r10 = rounds(rows[1]);
    wins += r02 <= r10;
    detail += fmt("seed %llu: %zu vs %zu; ", static_cast<unsigned long long>(seed), r02, r10);
  }
  return {wins >= 2, detail + fmt("keep 0.2 <= keep 1.0 in %d/3 (majority)", wins)};
}

Outcome convergence_parity() {
  const auto t0 = Clock::now();
  RunConfig c = blob_task(0);
  const TrainSetup setup = build_setup(c);
  const ParamVector bp = bp_sgd_baseline(setup, 0.5, 1000);
  const double bp_acc = accuracy(setup.model, setup.frozen, setup.mask, bp, setup.eval);
  c.train.target_accuracy = bp_acc - 0.02;
  c.train.max_rounds = 500;
  c.train.federation.parallel = 1;
  const MetricsHistory h = train(setup, c.train);
  const double secs = seconds_since(t0);
  return {h.reached_target && secs < 300.0,
          fmt("BP oracle acc %.4f; forward-gradient FedSGD reached %.4f in %zu rounds "
              "(budget 500), %.1fs (<300s)",
              bp_acc, h.rows.back().eval_accuracy, h.rounds_run, secs)};
}

Outcome determinism() {
  const RunConfig c = blob_task(0);
  const TrainSetup setup = build_setup(c);
  auto csv = [&](std::size_t threads) {
    TrainConfig tc = c.train;
    tc.federation.parallel = threads;
    const MetricsHistory h = train(setup, tc);
    std::ostringstream os;
    write_metrics_csv(os, h);
    write_pacing_events_csv(os, h);
    return os.str();
  };
  const std::string serial = csv(1);
  const std::string parallel = csv(4);
  return {serial == parallel && !serial.empty(),
          fmt("serial vs 4-thread metrics+events CSV: %zu bytes, %s", serial.size(),
              serial == parallel ? "identical" : "DIFFERENT")};
}

Outcome wire_memory_accounting() {
  bool ok = true;
  std::string detail;
  // Per-record upload in real rounds, for two model sizes.
  std::vector<double> per_record;
  for (std::size_t hidden : {4u, 128u}) {
    RunConfig c = blob_task(0);
    c.model = mlp_model({10, hidden, 4});
    TrainSetup s = build_setup(c);
    ServerState server;
    server.model = s.model;
    server.frozen = s.frozen;
    server.mask = s.mask;
    server.theta = s.theta0;
    server.config = c.train.federation;
    server.alloc = initial_allocation(server.config.pacing);
    const RoundMetrics m = run_round(server, s.clients);
    per_record.push_back(static_cast<double>(m.bytes_up) / m.answered);
  }
  ok &= per_record[0] == per_record[1] && per_record[0] == 32.0;
  detail += fmt("upload/record %g B and %g B; ", per_record[0], per_record[1]);

  // memory_estimate against size_of(M) + 2 * trainable_param, per mask.
  const ModelSpec model = mlp_model({10, 16, 4});
  for (const auto& mask : {TrainableMask::full(), TrainableMask::bias_only(),
                           TrainableMask::low_rank(2)}) {
    const std::uint64_t model_bytes = param_count(model) * sizeof(double);
    const std::uint64_t t = trainable_dim(mask, model);
    ok &= memory_estimate(model_bytes, t, sizeof(double)) == model_bytes + 2 * t * sizeof(double);
  }

  // Downlink of a fixed-budget round against messages built by the serializer.
  RunConfig c = blob_task(0);
  c.train.federation.pacing.enabled = false;
  c.train.federation.pacing.initial_devices = 6;
  c.train.federation.pacing.initial_perturbations = 5;
  const TrainSetup s = build_setup(c);
  ServerState server;
  server.model = s.model;
  server.frozen = s.frozen;
  server.mask = s.mask;
  server.theta = s.theta0;
  server.config = c.train.federation;
  server.alloc = initial_allocation(server.config.pacing);
  wire::DispatchMessage msg;
  msg.params = s.theta0;
  msg.seeds.assign(5, PerturbationSeed{});
  const std::uint64_t expected = 6 * wire::encode_dispatch(msg).size();
  const std::uint64_t formula = 6 * (32 + 8 * s.theta0.size() + 16 * 5);
  const RoundMetrics m = run_round(server, s.clients);
  ok &= m.bytes_down == expected && expected == formula;
  detail += fmt("memory formula exact for 3 masks; downlink %llu B, serializer %llu B, "
                "formula %llu B",
                static_cast<unsigned long long>(m.bytes_down),
                static_cast<unsigned long long>(expected),
                static_cast<unsigned long long>(formula));
  return {ok, detail};
}

Outcome scalability() {
  const RunConfig c = blob_task(0);
  const TrainSetup setup = build_setup(c);
  const Batch batch = draw_minibatch(setup.train, 64, 5);
  const MaskedObjective f(setup.model, setup.frozen, setup.mask, batch);
  const ParamVector grad = f.gradient(setup.theta0);
  const DerivativeMode mode = c.train.federation.derivative.resolve(setup.theta0);
  int monotone_seeds = 0;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    std::vector<double> cos;
    for (std::size_t n : {10u, 100u, 1000u}) {
      std::vector<PerturbationSeed> seeds;
      const std::uint64_t base = rng::derive(seed, "scalability", n);
      for (std::uint64_t i = 0; i < n; ++i) seeds.push_back({base, i});
      const auto r = client_round_compute(f, setup.theta0, seeds, mode);
      cos.push_back(cosine_similarity(mean_forward_gradient(r.records, grad.size()), grad));
    }
    monotone_seeds += cos[0] <= cos[1] && cos[1] <= cos[2];
    detail += fmt("cos %.3f/%.3f/%.3f; ", cos[0], cos[1], cos[2]);
  }

  // Rounds to target over active devices, fixed 4 perturbations per device,
  // averaged over 3 seeds; a miss counts as budget + 1.
  const std::size_t budget = 500;
  std::vector<double> mean_rounds;
  for (std::size_t devices : {1u, 5u, 25u}) {
    double total = 0.0;
    for (std::uint64_t seed : {0, 1, 2}) {
      RunConfig rc = blob_task(seed);
      rc.train.max_rounds = budget;
      auto& p = rc.train.federation.pacing;
      p.enabled = false;
      p.max_devices = 32;
      p.max_perturbations_per_device = 16;
      p.initial_devices = devices;
      p.initial_perturbations = 4;
      total += static_cast<double>(rounds_or_budget(train(build_setup(rc), rc.train), budget));
    }
    mean_rounds.push_back(total / 3.0);
  }
  const bool rounds_ok = mean_rounds[0] >= mean_rounds[1] && mean_rounds[1] >= mean_rounds[2];
  detail += fmt("cosine monotone in %d/3 seeds; mean rounds at 1/5/25 devices %.1f/%.1f/%.1f",
                monotone_seeds, mean_rounds[0], mean_rounds[1], mean_rounds[2]);
  return {monotone_seeds >= 2 && rounds_ok, detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"unbiased estimator", unbiasedness},
      {"finite-difference consistency", finite_difference_consistency},
      {"pass accounting", pass_accounting},
      {"orthogonality census", orthogonality},
      {"variance statistic", variance_hand_cases},
      {"pacing behaviour", pacing_behaviour},
      {"discriminative sampling", sampling_direction},
      {"convergence parity", convergence_parity},
      {"determinism", determinism},
      {"wire and memory accounting", wire_memory_accounting},
      {"scalability", scalability},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
