#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <map>
#include <set>

#include "fwdfed/data.hpp"
#include "fwdfed/federation.hpp"
#include "fwdfed/wire.hpp"

using namespace fwdfed;

namespace {

TrainSetup small_setup(std::size_t n_clients = 8, std::uint64_t seed = 1) {
  const Dataset data = make_blobs({400, 3, 5, 3.0, seed});
  const Split split = holdout_split(data, 0.25, seed);
  TrainSetup s;
  s.model = mlp_model({5, 8, 3});
  s.mask = TrainableMask::full();
  s.frozen = init_params(s.model, seed);
  s.theta0 = s.frozen;
  const auto shards = partition_data(split.train, {PartitionKind::kUniform, n_clients, 1}, seed);
  for (std::size_t c = 0; c < shards.size(); ++c) {
    s.clients.push_back({static_cast<std::uint32_t>(c), shards[c]});
  }
  s.train = split.train;
  s.eval = split.eval;
  return s;
}

ServerState server_for(const TrainSetup& s, const FederationConfig& cfg, std::uint64_t seed = 5) {
  ServerState server;
  server.model = s.model;
  server.frozen = s.frozen;
  server.mask = s.mask;
  server.theta = s.theta0;
  server.master_seed = seed;
  server.alloc = initial_allocation(cfg.pacing);
  server.config = cfg;
  return server;
}

FederationConfig fixed_budget(std::size_t devices, std::size_t perts) {
  FederationConfig cfg;
  cfg.pacing.enabled = false;
  cfg.pacing.max_devices = std::max<std::size_t>(devices, 1);
  cfg.pacing.max_perturbations_per_device = std::max<std::size_t>(perts, 1);
  cfg.pacing.initial_devices = devices;
  cfg.pacing.initial_perturbations = perts;
  return cfg;
}

Dataset labelled(std::size_t n, std::size_t classes) {
  Dataset d;
  d.input_dim = 1;
  for (std::size_t i = 0; i < n; ++i) {
    d.inputs.push_back(static_cast<double>(i));
    d.classes.push_back(i % classes);
  }
  return d;
}

}  // namespace

TEST(Partition, UniformEqualShards) {
  const auto shards = partition_indices(labelled(100, 2), {PartitionKind::kUniform, 10, 1}, 3);
  ASSERT_EQ(shards.size(), 10u);
  for (const auto& s : shards) EXPECT_EQ(s.size(), 10u);
}

TEST(Partition, LabelSkewSingleLabel) {
  const Dataset d = labelled(60, 2);
  const auto shards = partition_data(d, {PartitionKind::kLabelSkew, 4, 1}, 3);
  for (const auto& s : shards) {
    EXPECT_EQ(std::set<std::size_t>(s.classes.begin(), s.classes.end()).size(), 1u);
  }
}

// Property: shards are disjoint and cover every row; sizes and label counts
// respect the scheme.
TEST(Partition, ExactCoverOnRandomConfigs) {
  rng::Stream s(12);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t classes = 2 + s.below(5);
    const std::size_t n = 50 + s.below(300);
    const std::size_t clients = 1 + s.below(20);
    const bool skew = trial % 2 == 1;
    PartitionScheme scheme{skew ? PartitionKind::kLabelSkew : PartitionKind::kUniform, clients,
                           1 + s.below(classes)};
    if (skew && clients * scheme.classes_per_client < classes) continue;
    const Dataset d = labelled(n, classes);
    const auto shards = partition_indices(d, scheme, s.next_u64());
    std::vector<std::size_t> all;
    std::size_t lo = n, hi = 0;
    for (const auto& shard : shards) {
      all.insert(all.end(), shard.begin(), shard.end());
      lo = std::min(lo, shard.size());
      hi = std::max(hi, shard.size());
      if (skew) {
        std::set<std::size_t> labels;
        for (std::size_t row : shard) labels.insert(d.classes[row]);
        EXPECT_LE(labels.size(), scheme.classes_per_client);
      }
    }
    std::sort(all.begin(), all.end());
    ASSERT_EQ(all.size(), n);
    for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(all[i], i);
    if (!skew) {
      EXPECT_LE(hi - lo, 1u);
    }
  }
}

TEST(Partition, InfeasibleSchemes) {
  const Dataset d = labelled(40, 4);
  EXPECT_THROW(partition_indices(d, {PartitionKind::kLabelSkew, 2, 1}, 0), ConfigError);
  EXPECT_THROW(partition_indices(d, {PartitionKind::kLabelSkew, 4, 5}, 0), ConfigError);
  EXPECT_THROW(partition_indices(d, {PartitionKind::kUniform, 41, 1}, 0), ConfigError);
}

TEST(AggregateFedSgd, MatchesHandReconstruction) {
  const std::vector<ForwardGradientRecord> records{{1, {4, 0}, 2.0, 1}, {0, {4, 7}, -0.5, 1}};
  const ParamVector theta{0.5, 0.5, -1.0};
  const ParamVector v0 = gen_perturbation({4, 0}, 3);
  const ParamVector v7 = gen_perturbation({4, 7}, 3);
  const ParamVector next = aggregate_fedsgd(records, 3, 0.1, theta);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(next[j], theta[j] - 0.1 * 0.5 * (2.0 * v0[j] - 0.5 * v7[j]), 1e-15);
  }
  EXPECT_EQ(aggregate_fedsgd({records[0]}, 3, 0.0, theta), theta);
}

TEST(AggregateFedAvg, ShardSizeWeights) {
  const std::vector<ParamVector> thetas{{1.0, 4.0}, {3.0, 0.0}};
  const std::vector<double> weights{10, 30};
  const ParamVector out = aggregate_fedavg(thetas, weights);
  EXPECT_DOUBLE_EQ(out[0], 0.25 * 1.0 + 0.75 * 3.0);
  EXPECT_DOUBLE_EQ(out[1], 0.25 * 4.0);
  const std::vector<ParamVector> same(3, ParamVector{0.1, 0.7});
  const std::vector<double> w3{1, 5, 9};
  const ParamVector avg = aggregate_fedavg(same, w3);
  EXPECT_NEAR(avg[0], 0.1, 1e-16);
  EXPECT_NEAR(avg[1], 0.7, 1e-16);
}

TEST(FedAvg, SingleEpochSingleClientReducesToFedSgd) {
  const TrainSetup s = small_setup(1);
  FederationConfig cfg = fixed_budget(1, 4);
  cfg.aggregation = Aggregation::kFedAvg;
  cfg.lr = 0.3;
  ServerState server = server_for(s, cfg);
  const LocalUpdate local = fedavg_local_update(server, s.clients[0], 11, 22, 4);
  ASSERT_EQ(local.records.size(), 4u);
  EXPECT_EQ(aggregate_fedsgd(local.records, server.dim(), cfg.lr, server.theta), local.theta);

  const RoundMetrics m = run_round(server, s.clients);
  EXPECT_EQ(m.answered, 4u);
  EXPECT_EQ(server.round, 1u);
  EXPECT_TRUE(all_finite(server.theta));
  EXPECT_NE(server.theta, s.theta0);
}

TEST(FedSgd, SingleRecordStep) {
  TrainSetup s = small_setup(1);
  FederationConfig cfg = fixed_budget(1, 1);
  cfg.derivative.kind = DerivativeKind::kAnalytic;
  cfg.batch_size = 1000;  // whole shard
  cfg.lr = 0.5;
  ServerState server = server_for(s, cfg, 17);
  const RoundMetrics m = run_round(server, s.clients);
  ASSERT_EQ(m.answered, 1u);
  // The one dispatched seed follows the round/client/request seed schedule.
  const std::uint64_t round_seed = rng::derive(17, "round", 0);
  const std::uint64_t stream = rng::derive(rng::derive(round_seed, "client", 0), "request", 0);
  const ParamVector v = gen_perturbation({stream, 0}, s.theta0.size());
  const ParamVector grad =
      analytic_gradient(s.model, s.frozen, s.mask, s.theta0, s.clients[0].shard);
  const double dd = dot(grad, v);
  for (std::size_t j = 0; j < v.size(); ++j) {
    EXPECT_NEAR(server.theta[j], s.theta0[j] - 0.5 * dd * v[j], 1e-12);
  }
  ASSERT_TRUE(server.g_prev.has_value());
  EXPECT_EQ(m.bytes_up, wire::kRecordBytes);
  EXPECT_EQ(m.bytes_down, wire::dispatch_size(s.theta0.size(), 1));
}

TEST(FedSgd, DeterministicAcrossRunsAndThreads) {
  const TrainSetup s = small_setup();
  FederationConfig cfg;
  cfg.sampler.keep_ratio = 0.5;
  cfg.pacing.max_devices = 8;
  cfg.pacing.max_perturbations_per_device = 4;
  cfg.pipeline_prefetch = 1;
  auto run = [&](std::size_t threads) {
    FederationConfig c = cfg;
    c.parallel = threads;
    ServerState server = server_for(s, c);
    std::vector<std::uint64_t> passes;
    for (int r = 0; r < 4; ++r) passes.push_back(run_round(server, s.clients).forward_passes);
    return std::make_pair(server.theta, passes);
  };
  const auto a = run(1);
  EXPECT_EQ(a, run(1));
  EXPECT_EQ(a, run(3));
}

TEST(FedSgd, RecordAccountingBalances) {
  const TrainSetup s = small_setup();
  FederationConfig cfg;
  cfg.pacing.max_devices = 8;
  cfg.pacing.max_perturbations_per_device = 6;
  cfg.pacing.variance_threshold = 0.01;
  cfg.pipeline_prefetch = 2;
  ServerState server = server_for(s, cfg);
  for (int r = 0; r < 3; ++r) {
    const RoundMetrics m = run_round(server, s.clients);
    EXPECT_EQ(m.dispatched, m.answered + m.discarded + m.failed);
    EXPECT_EQ(m.answered, m.alloc.global_ps());
    EXPECT_EQ(m.bytes_up, m.answered * wire::kRecordBytes);
    EXPECT_GT(m.discarded, 0u);
    // ForwardDiff: one base pass per active client plus one per computed record.
    EXPECT_EQ(m.forward_passes, m.alloc.active_devices + m.dispatched);
  }
}

TEST(FedSgd, DownlinkMatchesSerializer) {
  const TrainSetup s = small_setup();
  const FederationConfig cfg = fixed_budget(5, 3);
  ServerState server = server_for(s, cfg);
  const RoundMetrics m = run_round(server, s.clients);
  EXPECT_EQ(m.bytes_down, 5 * wire::dispatch_size(s.theta0.size(), 3));
}

TEST(FedSgd, UplinkIndependentOfModelSize) {
  for (std::size_t hidden : {4u, 64u}) {
    TrainSetup s = small_setup();
    s.model = mlp_model({5, hidden, 3});
    s.frozen = init_params(s.model, 1);
    s.theta0 = s.frozen;
    ServerState server = server_for(s, fixed_budget(4, 2));
    EXPECT_EQ(run_round(server, s.clients).bytes_up, 8 * wire::kRecordBytes);
  }
}

TEST(FedSgd, AllocationNeverShrinks) {
  const TrainSetup s = small_setup();
  FederationConfig cfg;
  cfg.pacing.max_devices = 8;
  cfg.pacing.max_perturbations_per_device = 8;
  ServerState server = server_for(s, cfg);
  std::size_t last = 0;
  for (int r = 0; r < 6; ++r) {
    const RoundMetrics m = run_round(server, s.clients);
    EXPECT_GE(m.global_ps, last);
    last = m.global_ps;
    EXPECT_TRUE(m.budget_exhausted || m.variance_at_stop <= cfg.pacing.variance_threshold);
  }
}

TEST(FedSgd, KeepRatioOneMatchesUnfiltered) {
  const TrainSetup s = small_setup();
  FederationConfig a;
  a.pacing.max_devices = 8;
  FederationConfig b = a;
  b.sampler.keep_ratio = 1.0;
  b.sampler.oversample_factor = 3.0;
  ServerState sa = server_for(s, a), sb = server_for(s, b);
  for (int r = 0; r < 3; ++r) {
    run_round(sa, s.clients);
    run_round(sb, s.clients);
  }
  EXPECT_EQ(sa.theta, sb.theta);
}

TEST(Train, ZeroRoundsEmitsBaselineRow) {
  const TrainSetup s = small_setup();
  TrainConfig tc;
  tc.max_rounds = 0;
  tc.target_accuracy = 1.0;
  const MetricsHistory h = train(s, tc);
  ASSERT_EQ(h.rows.size(), 1u);
  EXPECT_EQ(h.rows[0].round, 0u);
  EXPECT_FALSE(h.reached_target);
  EXPECT_EQ(h.final_theta, s.theta0);
}

TEST(Train, ReachesTargetAndReportsCost) {
  const TrainSetup s = small_setup();
  TrainConfig tc;
  tc.federation.lr = 0.2;
  tc.federation.pacing.max_devices = 8;
  tc.federation.pacing.max_perturbations_per_device = 8;
  tc.target_accuracy = 0.9;
  tc.max_rounds = 200;
  const MetricsHistory h = train(s, tc);
  ASSERT_TRUE(h.reached_target);
  EXPECT_GE(h.rows.back().eval_accuracy, 0.9);
  EXPECT_EQ(*h.rounds_to_target, h.rounds_run);
  EXPECT_EQ(*h.passes_to_target, h.rows.back().forward_passes_cum);
  for (std::size_t i = 1; i < h.rows.size(); ++i) {
    EXPECT_GE(h.rows[i].forward_passes_cum, h.rows[i - 1].forward_passes_cum);
    EXPECT_GE(h.rows[i].bytes_up_cum, h.rows[i - 1].bytes_up_cum);
  }
}

TEST(Train, EvalIntervalControlsRows) {
  const TrainSetup s = small_setup();
  TrainConfig tc;
  tc.federation.pacing.max_devices = 8;
  tc.target_accuracy = 1.0;
  tc.max_rounds = 7;
  tc.eval_interval = 3;
  const MetricsHistory h = train(s, tc);
  std::vector<std::uint64_t> rounds;
  for (const auto& r : h.rows) rounds.push_back(r.round);
  EXPECT_EQ(rounds, (std::vector<std::uint64_t>{0, 3, 6, 7}));
}

TEST(Train, DivergenceIsReported) {
  const TrainSetup s = small_setup();
  TrainConfig tc;
  tc.federation.lr = std::numeric_limits<double>::infinity();
  tc.federation.pacing.max_devices = 8;
  tc.target_accuracy = 1.0;
  tc.max_rounds = 20;
  EXPECT_THROW(train(s, tc), DivergenceError);
}

TEST(ParallelFor, PropagatesErrors) {
  std::vector<int> hit(10, 0);
  parallel_for(10, 3, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 10);
  EXPECT_THROW(parallel_for(5, 2,
                            [](std::size_t i) {
                              if (i == 3) throw NumericError("boom");
                            }),
               NumericError);
}
