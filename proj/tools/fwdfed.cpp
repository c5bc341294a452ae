// fwdfed: command-line runner for backpropagation-free federated experiments.
//
//   fwdfed train|profile-peft|ablate-sampling|check-unbiased --config <path>
//          [--out <dir>] [--seed <u64>] [--parallel <n>]

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fwdfed/fwdfed.hpp"

namespace {

struct Options {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> parallel;
  std::vector<double> ratios;
};

void add_common(CLI::App* cmd, Options& opts) {
  cmd->add_option("--config", opts.config_path, "run configuration file")->required();
  cmd->add_option("--out", opts.out_dir, "output directory");
  cmd->add_option("--seed", opts.seed, "override run.seed");
  cmd->add_option("--parallel", opts.parallel, "client simulation threads");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backpropagation-free federated learning with forward gradients"};
  app.require_subcommand(1);
  Options opts;
  auto* train = app.add_subcommand("train", "federated training run");
  auto* profile = app.add_subcommand("profile-peft", "rank PEFT masks by gradient similarity");
  auto* ablate = app.add_subcommand("ablate-sampling", "sweep discriminative sampling ratios");
  auto* check = app.add_subcommand("check-unbiased", "Monte-Carlo check of the estimator");
  for (auto* cmd : {train, profile, ablate, check}) add_common(cmd, opts);
  ablate->add_option("--ratios", opts.ratios, "keep ratios (default: ablate.ratios)")
      ->delimiter(',');
  using namespace fwdfed;
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfigError;
  }

  try {
    RunConfig config = load_config(opts.config_path);
    if (opts.seed) config.train.master_seed = *opts.seed;
    if (opts.parallel) {
      if (*opts.parallel < 1) throw ConfigError("--parallel", "must be >= 1");
      config.train.federation.parallel = *opts.parallel;
    }
    const CommandContext ctx{opts.out_dir, &std::cout};
    if (*train) return cmd_train(config, ctx);
    if (*profile) return cmd_profile_peft(config, ctx);
    if (*ablate) {
      return cmd_ablate_sampling(config, opts.ratios.empty() ? config.ablate_ratios : opts.ratios,
                                 ctx);
    }
    return cmd_check_unbiased(config, ctx);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfigError;
  }
}
