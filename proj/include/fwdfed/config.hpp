#pragma once

// Flat key/value run configuration.
//
//   # comment
//   model.layers = 8,16,4
//   pacing.variance_threshold = 0.3
//
// Unknown keys, malformed values and invariant violations raise ConfigError
// with a "<file>:<line>: <key>: <reason>" message.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fwdfed/data.hpp"
#include "fwdfed/error.hpp"
#include "fwdfed/federation.hpp"
#include "fwdfed/model.hpp"
#include "fwdfed/pacing.hpp"
#include "fwdfed/peft.hpp"
#include "fwdfed/rng.hpp"
#include "fwdfed/sampling.hpp"

namespace fwdfed {

enum class DatasetKind { kBlobs, kCsv };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kBlobs;
  BlobSpec blobs;
  bool blob_seed_set = false;  // otherwise derived from the master seed
  std::string path;
  std::size_t label_column = 0;
};

// Blob-task defaults: FedSGD, lr 0.2, minibatch 8, variance threshold 0.3,
// budget growing from 2x1 up to 32 devices x 16 perturbations.
inline TrainConfig default_train_config() {
  TrainConfig t;
  t.federation.lr = 0.2;
  t.federation.batch_size = 8;
  t.federation.pacing.variance_threshold = 0.3;
  t.federation.pacing.initial_devices = 2;
  t.federation.pacing.initial_perturbations = 1;
  t.federation.pacing.max_devices = 32;
  t.federation.pacing.max_perturbations_per_device = 16;
  t.target_accuracy = 0.95;
  t.max_rounds = 300;
  t.eval_interval = 1;
  return t;
}

struct RunConfig {
  ModelSpec model = mlp_model({10, 16, 4});
  TrainableMask mask = TrainableMask::full();
  DatasetSpec data;
  PartitionScheme partition{PartitionKind::kUniform, 50, 1};
  double eval_fraction = 0.2;
  TrainConfig train = default_train_config();

  std::vector<TrainableMask> profile_candidates{TrainableMask::full()};
  std::size_t profile_perturbations = 1000;
  std::size_t profile_batch = 64;

  std::vector<double> ablate_ratios{0.2, 1.0};

  std::size_t check_dim = 50;
  std::size_t check_perturbations = 200000;
  double check_tolerance = 0.05;

  void validate() const {
    model.validate();
    trainable_dim(mask, model);
    const FederationConfig& f = train.federation;
    f.pacing.validate();
    f.sampler.validate();
    if (!(f.lr >= 0.0)) throw ConfigError("train.lr", "must be >= 0");
    if (f.batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    if (f.local_epochs < 1) throw ConfigError("train.local_epochs", "must be >= 1");
    if (f.parallel < 1) throw ConfigError("run.parallel", "must be >= 1");
    if (f.derivative.h < 0.0) throw ConfigError("train.h", "must be > 0 (or 0 for auto)");
    if (!(f.derivative.h_scale > 0.0)) throw ConfigError("train.h_scale", "must be > 0");
    if (train.eval_interval < 1) throw ConfigError("train.eval_interval", "must be >= 1");
    if (!(train.target_accuracy >= 0.0 && train.target_accuracy <= 1.0)) {
      throw ConfigError("train.target_accuracy", "must lie in [0, 1]");
    }
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
      throw ConfigError("data.eval_fraction", "must lie in (0, 1)");
    }
    if (model.loss != LossKind::kCrossEntropy) {
      throw ConfigError("model.loss", "training reports accuracy; use cross_entropy");
    }
    if (data.kind == DatasetKind::kBlobs) {
      data.blobs.validate();
      if (model.input_dim() != data.blobs.input_dim) {
        throw ConfigError("model.layers", "first size must equal data.input_dim");
      }
      if (model.output_dim() != data.blobs.n_classes) {
        throw ConfigError("model.layers", "last size must equal data.n_classes");
      }
    } else if (data.path.empty()) {
      throw ConfigError("data.path", "required for csv datasets");
    }
    if (partition.n_clients < 1) throw ConfigError("partition.n_clients", "must be >= 1");
    if (f.pacing.max_devices > partition.n_clients) {
      throw ConfigError("pacing.max_devices", "must not exceed partition.n_clients");
    }
    if (partition.kind == PartitionKind::kLabelSkew) {
      if (partition.classes_per_client < 1 || partition.classes_per_client > model.output_dim()) {
        throw ConfigError("partition.classes_per_client", "must lie in [1, n_classes]");
      }
      if (partition.n_clients * partition.classes_per_client < model.output_dim()) {
        throw ConfigError("partition.classes_per_client",
                          "n_clients * classes_per_client must cover every class");
      }
    }
    if (profile_candidates.empty()) throw ConfigError("profile.candidates", "need >= 1 mask");
    for (const auto& m : profile_candidates) trainable_dim(m, model);
    if (profile_perturbations < 1) throw ConfigError("profile.n_perturbations", "must be >= 1");
    for (double r : ablate_ratios) {
      if (!(r > 0.0 && r <= 1.0)) throw ConfigError("ablate.ratios", "ratios must lie in (0, 1]");
    }
    if (check_dim < 2) throw ConfigError("check.dim", "must be >= 2");
    if (check_perturbations < 1) throw ConfigError("check.n_perturbations", "must be >= 1");
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double to_real(const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::logic_error&) {
    throw ConfigError("", "expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("", "expected a number, got '" + v + "'");
  return x;
}

inline std::uint64_t to_uint(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("", "expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::logic_error&) {
    throw ConfigError("", "integer out of range: '" + v + "'");
  }
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("", "expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T pick(const std::string& v, const std::map<std::string, T>& choices) {
  const auto it = choices.find(v);
  if (it != choices.end()) return it->second;
  std::string names;
  for (const auto& [k, _] : choices) names += (names.empty() ? "" : " | ") + k;
  throw ConfigError("", "expected one of " + names + ", got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size = [](const std::string& v) { return static_cast<std::size_t>(to_uint(v)); };
    t["run.seed"] = [](RunConfig& c, const std::string& v) { c.train.master_seed = to_uint(v); };
    t["run.parallel"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.parallel = size(v);
    };
    t["model.kind"] = [](RunConfig& c, const std::string& v) {
      c.model.kind = pick<ModelKind>(v, {{"linear", ModelKind::kLinear}, {"mlp", ModelKind::kMlp}});
    };
    t["model.layers"] = [size](RunConfig& c, const std::string& v) {
      c.model.layer_sizes.clear();
      for (const auto& s : split_list(v)) c.model.layer_sizes.push_back(size(s));
    };
    t["model.activation"] = [](RunConfig& c, const std::string& v) {
      c.model.activation =
          pick<Activation>(v, {{"relu", Activation::kRelu}, {"tanh", Activation::kTanh}});
    };
    t["model.loss"] = [](RunConfig& c, const std::string& v) {
      c.model.loss = pick<LossKind>(
          v, {{"cross_entropy", LossKind::kCrossEntropy}, {"mse", LossKind::kMse}});
    };
    t["mask.scheme"] = [](RunConfig& c, const std::string& v) {
      if (v.rfind("low_rank:", 0) == 0) {
        c.mask = parse_mask(v);
        return;
      }
      c.mask.scheme = pick<PeftScheme>(v, {{"full", PeftScheme::kFull},
                                           {"bias_only", PeftScheme::kBiasOnly},
                                           {"low_rank", PeftScheme::kLowRank}});
    };
    t["mask.rank"] = [size](RunConfig& c, const std::string& v) { c.mask.rank = size(v); };
    t["data.kind"] = [](RunConfig& c, const std::string& v) {
      c.data.kind =
          pick<DatasetKind>(v, {{"blobs", DatasetKind::kBlobs}, {"csv", DatasetKind::kCsv}});
    };
    t["data.n_samples"] = [size](RunConfig& c, const std::string& v) {
      c.data.blobs.n_samples = size(v);
    };
    t["data.n_classes"] = [size](RunConfig& c, const std::string& v) {
      c.data.blobs.n_classes = size(v);
    };
    t["data.input_dim"] = [size](RunConfig& c, const std::string& v) {
      c.data.blobs.input_dim = size(v);
    };
    t["data.separation"] = [](RunConfig& c, const std::string& v) {
      c.data.blobs.separation = to_real(v);
    };
    t["data.seed"] = [](RunConfig& c, const std::string& v) {
      c.data.blobs.seed = to_uint(v);
      c.data.blob_seed_set = true;
    };
    t["data.path"] = [](RunConfig& c, const std::string& v) { c.data.path = v; };
    t["data.label_column"] = [size](RunConfig& c, const std::string& v) {
      c.data.label_column = size(v);
    };
    t["data.eval_fraction"] = [](RunConfig& c, const std::string& v) {
      c.eval_fraction = to_real(v);
    };
    t["partition.scheme"] = [](RunConfig& c, const std::string& v) {
      c.partition.kind = pick<PartitionKind>(
          v, {{"uniform", PartitionKind::kUniform}, {"label_skew", PartitionKind::kLabelSkew}});
    };
    t["partition.n_clients"] = [size](RunConfig& c, const std::string& v) {
      c.partition.n_clients = size(v);
    };
    t["partition.classes_per_client"] = [size](RunConfig& c, const std::string& v) {
      c.partition.classes_per_client = size(v);
    };
    t["pacing.enabled"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.pacing.enabled = to_bool(v);
    };
    t["pacing.variance_threshold"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.pacing.variance_threshold = to_real(v);
    };
    t["pacing.max_devices"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.pacing.max_devices = size(v);
    };
    t["pacing.max_perturbations_per_device"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.pacing.max_perturbations_per_device = size(v);
    };
    t["pacing.min_records_for_variance"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.pacing.min_records_for_variance = size(v);
    };
    t["pacing.initial_devices"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.pacing.initial_devices = size(v);
    };
    t["pacing.initial_perturbations"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.pacing.initial_perturbations = size(v);
    };
    t["pacing.variance_form"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.pacing.form = pick<VarianceForm>(
          v, {{"elementwise", VarianceForm::kElementwise}, {"scalar", VarianceForm::kScalar}});
    };
    t["sampler.keep_ratio"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.sampler.keep_ratio = to_real(v);
    };
    t["sampler.oversample_factor"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.sampler.oversample_factor = to_real(v);
    };
    t["sampler.signed"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.sampler.signed_similarity = to_bool(v);
    };
    t["train.aggregation"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.aggregation = pick<Aggregation>(
          v, {{"fedsgd", Aggregation::kFedSgd}, {"fedavg", Aggregation::kFedAvg}});
    };
    t["train.local_epochs"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.local_epochs = size(v);
    };
    t["train.lr"] = [](RunConfig& c, const std::string& v) { c.train.federation.lr = to_real(v); };
    t["train.batch_size"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.batch_size = size(v);
    };
    t["train.derivative"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.derivative.kind = pick<DerivativeKind>(
          v, {{"forward", DerivativeKind::kForward},
              {"central", DerivativeKind::kCentral},
              {"analytic", DerivativeKind::kAnalytic}});
    };
    t["train.h"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.derivative.h = to_real(v);
    };
    t["train.h_scale"] = [](RunConfig& c, const std::string& v) {
      c.train.federation.derivative.h_scale = to_real(v);
    };
    t["train.pipeline_prefetch"] = [size](RunConfig& c, const std::string& v) {
      c.train.federation.pipeline_prefetch = size(v);
    };
    t["train.target_accuracy"] = [](RunConfig& c, const std::string& v) {
      c.train.target_accuracy = to_real(v);
    };
    t["train.max_rounds"] = [size](RunConfig& c, const std::string& v) {
      c.train.max_rounds = size(v);
    };
    t["train.eval_interval"] = [size](RunConfig& c, const std::string& v) {
      c.train.eval_interval = size(v);
    };
    t["profile.candidates"] = [](RunConfig& c, const std::string& v) {
      c.profile_candidates.clear();
      for (const auto& s : split_list(v)) c.profile_candidates.push_back(parse_mask(s));
    };
    t["profile.n_perturbations"] = [size](RunConfig& c, const std::string& v) {
      c.profile_perturbations = size(v);
    };
    t["profile.batch"] = [size](RunConfig& c, const std::string& v) {
      c.profile_batch = size(v);
    };
    t["ablate.ratios"] = [](RunConfig& c, const std::string& v) {
      c.ablate_ratios.clear();
      for (const auto& s : split_list(v)) c.ablate_ratios.push_back(to_real(s));
    };
    t["check.dim"] = [size](RunConfig& c, const std::string& v) { c.check_dim = size(v); };
    t["check.n_perturbations"] = [size](RunConfig& c, const std::string& v) {
      c.check_perturbations = size(v);
    };
    t["check.tolerance"] = [](RunConfig& c, const std::string& v) {
      c.check_tolerance = to_real(v);
    };
    return t;
  }();
  return table;
}

}  // namespace config_detail

// Parses config text; `source` names the file in error messages.
inline RunConfig parse_config(std::istream& in, const std::string& source = "config") {
  RunConfig config;
  std::map<std::string, std::size_t> key_lines;
  std::string line;
  std::size_t line_no = 0;
  auto anchored = [&](std::size_t at, const std::string& key, const std::string& msg) {
    return ConfigError::located(key, source + ":" + std::to_string(at) + ": " + key + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError::located("", source + ":" + std::to_string(line_no) +
                                         ": expected 'key = value'");
    }
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    const auto& table = config_detail::setters();
    const auto it = table.find(key);
    if (it == table.end()) throw anchored(line_no, key, "unknown key");
    if (key_lines.count(key) != 0) throw anchored(line_no, key, "duplicate key");
    key_lines[key] = line_no;
    try {
      it->second(config, value);
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      const std::string prefix = e.field() + ": ";
      if (!e.field().empty() && msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
      throw anchored(line_no, key, msg);
    }
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    const auto at = key_lines.find(e.field());
    const std::string where =
        at != key_lines.end() ? source + ":" + std::to_string(at->second) + ": " : source + ": ";
    throw ConfigError::located(e.field(), where + e.what());
  }
  return config;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config '" + path + "'");
  return parse_config(in, path);
}

// Dataset, held-out split, client shards and initial weights. All randomness
// derives from the master seed so runs that differ only in training knobs see
// identical data and initialization.
inline TrainSetup build_setup(const RunConfig& config) {
  const std::uint64_t seed = config.train.master_seed;
  Dataset data;
  if (config.data.kind == DatasetKind::kBlobs) {
    BlobSpec blobs = config.data.blobs;
    if (!config.data.blob_seed_set) blobs.seed = rng::derive(seed, "data");
    data = make_blobs(blobs);
  } else {
    data = load_csv(config.data.path, config.data.label_column);
    if (data.input_dim != config.model.input_dim()) {
      throw ConfigError("model.layers", "first size must equal the CSV feature count");
    }
    if (n_classes(data) > config.model.output_dim()) {
      throw ConfigError("model.layers", "last size smaller than the CSV class count");
    }
  }
  Split split = holdout_split(data, config.eval_fraction, rng::derive(seed, "split"));
  TrainSetup setup;
  setup.model = config.model;
  setup.mask = config.mask;
  setup.frozen = init_params(config.model, rng::derive(seed, "frozen"));
  setup.theta0 =
      initial_trainable(config.mask, config.model, setup.frozen, rng::derive(seed, "trainable"));
  auto shards = partition_data(split.train, config.partition, rng::derive(seed, "partition"));
  for (std::size_t c = 0; c < shards.size(); ++c) {
    setup.clients.push_back({static_cast<std::uint32_t>(c), std::move(shards[c])});
  }
  setup.train = std::move(split.train);
  setup.eval = std::move(split.eval);
  return setup;
}

}  // namespace fwdfed
