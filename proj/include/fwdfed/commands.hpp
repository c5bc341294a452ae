#pragma once

// Subcommands behind the `fwdfed` executable and the CSV files they write.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fwdfed/config.hpp"
#include "fwdfed/error.hpp"
#include "fwdfed/federation.hpp"
#include "fwdfed/peft_profile.hpp"
#include "fwdfed/wire.hpp"

namespace fwdfed {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfigError = 1,
  kExitBudgetExhausted = 2,
  kExitDiverged = 3,
  kExitToleranceMissed = 4,
};

// --- metrics CSV -----------------------------------------------------------

inline std::string metrics_csv_header() {
  return "round,global_ps,forward_passes_cum,variance_at_stop,train_loss,eval_accuracy,"
         "bytes_up_cum,bytes_down_cum";
}

inline void write_metrics_csv(std::ostream& out, const MetricsHistory& history) {
  out << metrics_csv_header() << '\n';
  for (const MetricsRow& r : history.rows) {
    out << r.round << ',' << r.global_ps << ',' << r.forward_passes_cum << ','
        << wire::format_real(r.variance_at_stop) << ',' << wire::format_real(r.train_loss) << ','
        << wire::format_real(r.eval_accuracy) << ',' << r.bytes_up_cum << ','
        << r.bytes_down_cum << '\n';
  }
}

inline std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header()) {
    throw ShapeError("metrics CSV: missing or unexpected header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() != 8) throw ShapeError("metrics CSV: expected 8 fields: " + line);
    MetricsRow r;
    r.round = std::stoull(f[0]);
    r.global_ps = std::stoull(f[1]);
    r.forward_passes_cum = std::stoull(f[2]);
    r.variance_at_stop = std::stod(f[3]);
    r.train_loss = std::stod(f[4]);
    r.eval_accuracy = std::stod(f[5]);
    r.bytes_up_cum = std::stoull(f[6]);
    r.bytes_down_cum = std::stoull(f[7]);
    rows.push_back(r);
  }
  return rows;
}

inline void write_pacing_events_csv(std::ostream& out, const MetricsHistory& history) {
  out << pacing_events_csv_header() << '\n';
  for (const RoundMetrics& m : history.rounds) {
    for (const PacingEvent& e : m.events) {
      out << e.round << ',' << e.records_seen << ',' << wire::format_real(e.variance) << ','
          << describe(e.decision) << ',' << e.alloc.active_devices << ','
          << e.alloc.perturbations_per_device << '\n';
    }
  }
}

// --- subcommands -----------------------------------------------------------

struct CommandContext {
  std::string out_dir = ".";
  std::ostream* out = &std::cout;
};

inline std::string out_path(const CommandContext& ctx, const std::string& name) {
  std::filesystem::create_directories(ctx.out_dir);
  return (std::filesystem::path(ctx.out_dir) / name).string();
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  return f;
}

// Trains and writes metrics.csv, pacing_events.csv and checkpoint.bin.
// Returns kExitOk when the target is reached, kExitBudgetExhausted otherwise.
inline int cmd_train(const RunConfig& config, const CommandContext& ctx) {
  const TrainSetup setup = build_setup(config);
  const MetricsHistory history = train(setup, config.train);
  {
    auto f = open_out(out_path(ctx, "metrics.csv"));
    write_metrics_csv(f, history);
  }
  {
    auto f = open_out(out_path(ctx, "pacing_events.csv"));
    write_pacing_events_csv(f, history);
  }
  wire::Checkpoint ckpt{config.mask, config.model.layer_sizes, history.rounds_run,
                        history.final_theta};
  wire::write_file(out_path(ctx, "checkpoint.bin"), wire::encode_checkpoint(ckpt));
  const MetricsRow& last = history.rows.back();
  *ctx.out << "rounds=" << history.rounds_run << " eval_accuracy=" << last.eval_accuracy
           << " forward_passes=" << last.forward_passes_cum
           << " target_reached=" << (history.reached_target ? "yes" : "no") << '\n';
  return history.reached_target ? kExitOk : kExitBudgetExhausted;
}

// Ranks the configured candidate masks on a public batch drawn from the
// training split; prints a table and writes profile.csv.
inline int cmd_profile_peft(const RunConfig& config, const CommandContext& ctx) {
  const TrainSetup setup = build_setup(config);
  const Batch public_batch = draw_minibatch(setup.train, config.profile_batch,
                                            rng::derive(config.train.master_seed, "public"));
  const auto ranking = peft_profile(
      config.model, setup.frozen, config.profile_candidates, public_batch,
      config.profile_perturbations, config.train.master_seed,
      config.train.federation.derivative.resolve(setup.frozen));
  auto f = open_out(out_path(ctx, "profile.csv"));
  f << "rank,mask,trainable_dim,similarity\n";
  *ctx.out << std::left << std::setw(6) << "rank" << std::setw(14) << "mask" << std::setw(16)
           << "trainable_dim" << "similarity\n";
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    const auto& e = ranking[i];
    f << i + 1 << ',' << describe(e.mask) << ',' << e.trainable_dim << ','
      << wire::format_real(e.score) << '\n';
    *ctx.out << std::left << std::setw(6) << i + 1 << std::setw(14) << describe(e.mask)
             << std::setw(16) << e.trainable_dim << std::fixed << std::setprecision(6) << e.score
             << std::defaultfloat << '\n';
  }
  return kExitOk;
}

struct AblationRow {
  double keep_ratio = 1.0;
  std::optional<std::size_t> rounds_to_target;
  std::optional<std::uint64_t> passes_to_target;
};

inline std::vector<AblationRow> run_sampling_ablation(const RunConfig& config,
                                                      const std::vector<double>& ratios) {
  const TrainSetup setup = build_setup(config);
  std::vector<AblationRow> rows;
  for (double ratio : ratios) {
    if (!(ratio > 0.0 && ratio <= 1.0)) {
      throw ConfigError("ablate.ratios", "ratios must lie in (0, 1]");
    }
    TrainConfig tc = config.train;
    tc.federation.sampler.keep_ratio = ratio;
    tc.federation.sampler.oversample_factor = 0.0;
    const MetricsHistory h = train(setup, tc);
    rows.push_back({ratio, h.rounds_to_target, h.passes_to_target});
  }
  return rows;
}

// Writes ablation.csv: keep_ratio,rounds_to_target,passes_to_target ("NA"
// when the target was not reached within max_rounds).
inline int cmd_ablate_sampling(const RunConfig& config, const std::vector<double>& ratios,
                               const CommandContext& ctx) {
  const auto rows = run_sampling_ablation(config, ratios);
  auto f = open_out(out_path(ctx, "ablation.csv"));
  f << "keep_ratio,rounds_to_target,passes_to_target\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << wire::format_real(r.keep_ratio) << ','
         << (r.rounds_to_target ? std::to_string(*r.rounds_to_target) : "NA") << ','
         << (r.passes_to_target ? std::to_string(*r.passes_to_target) : "NA");
    f << line.str() << '\n';
    *ctx.out << line.str() << '\n';
  }
  return kExitOk;
}

struct UnbiasedReport {
  std::size_t dim = 0;
  std::size_t n_perturbations = 0;
  double relative_error = 0.0;
};

// Mean of n Analytic-mode forward gradients against the exact gradient of a
// random least-squares problem with `dim` parameters (linear (dim-1) -> 1).
inline UnbiasedReport check_unbiased(std::size_t dim, std::size_t n_perturbations,
                                     std::uint64_t seed) {
  if (dim < 2) throw ConfigError("check.dim", "must be >= 2");
  if (n_perturbations < 1) throw ConfigError("check.n_perturbations", "must be >= 1");
  const ModelSpec model = linear_model(dim - 1, 1, LossKind::kMse);
  rng::Stream stream(rng::derive(seed, "check-problem"));
  Batch batch;
  batch.input_dim = dim - 1;
  for (int r = 0; r < 16; ++r) {
    for (std::size_t j = 0; j + 1 < dim; ++j) batch.inputs.push_back(stream.normal());
    batch.targets.push_back(stream.normal());
  }
  ParamVector theta(dim);
  for (double& x : theta) x = stream.normal();
  const TrainableMask mask = TrainableMask::full();
  const MaskedObjective objective(model, theta, mask, batch);
  const ParamVector exact = objective.gradient(theta);
  const std::uint64_t base = rng::derive(seed, "check-seeds");
  ParamVector sum(dim, 0.0);
  for (std::size_t i = 0; i < n_perturbations; ++i) {
    const ParamVector v = gen_perturbation({base, i}, dim);
    axpy(dot(exact, v), v, sum);
  }
  for (double& x : sum) x /= static_cast<double>(n_perturbations);
  return {dim, n_perturbations, relative_l2_error(sum, exact)};
}

inline int cmd_check_unbiased(const RunConfig& config, const CommandContext& ctx) {
  const UnbiasedReport r =
      check_unbiased(config.check_dim, config.check_perturbations, config.train.master_seed);
  const bool ok = r.relative_error <= config.check_tolerance;
  *ctx.out << "dim=" << r.dim << " n_perturbations=" << r.n_perturbations
           << " relative_l2_error=" << wire::format_real(r.relative_error)
           << " tolerance=" << wire::format_real(config.check_tolerance)
           << (ok ? " PASS" : " ABOVE_TOLERANCE") << '\n';
  return ok ? kExitOk : kExitToleranceMissed;
}

}  // namespace fwdfed
