#pragma once

// Datasets, held-out splits and client partitions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fwdfed/error.hpp"
#include "fwdfed/model.hpp"
#include "fwdfed/rng.hpp"

namespace fwdfed {

using Dataset = Batch;

struct BlobSpec {
  std::size_t n_samples = 3000;
  std::size_t n_classes = 4;
  std::size_t input_dim = 10;
  double separation = 3.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2) throw ConfigError("data.n_classes", "must be >= 2");
    if (input_dim < n_classes) throw ConfigError("data.input_dim", "must be >= n_classes");
    if (!(separation > 0.0)) throw ConfigError("data.separation", "must be > 0");
    if (n_samples < n_classes) throw ConfigError("data.n_samples", "must be >= n_classes");
  }
};

// Gaussian blobs around the vertices of a regular simplex.
//
// Vertices e_c - centroid are scaled to norm `separation` and embedded into
// input_dim through a seeded random orthonormal frame; each sample adds
// N(0, I) noise. Labels cycle 0..C-1 so classes stay balanced.
inline Dataset make_blobs(const BlobSpec& spec) {
  spec.validate();
  const std::size_t c = spec.n_classes;
  const std::size_t d = spec.input_dim;
  rng::Stream stream(rng::derive(spec.seed, "blobs"));

  // Orthonormal frame: c rows of length d by Gram-Schmidt.
  std::vector<std::vector<double>> frame;
  while (frame.size() < c) {
    std::vector<double> row(d);
    for (double& x : row) x = stream.normal();
    for (const auto& q : frame) {
      double p = 0.0;
      for (std::size_t j = 0; j < d; ++j) p += row[j] * q[j];
      for (std::size_t j = 0; j < d; ++j) row[j] -= p * q[j];
    }
    double n = 0.0;
    for (double x : row) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-8) continue;
    for (double& x : row) x /= n;
    frame.push_back(std::move(row));
  }
  const double vertex_norm = std::sqrt(1.0 - 1.0 / static_cast<double>(c));
  std::vector<std::vector<double>> means(c, std::vector<double>(d, 0.0));
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t m = 0; m < c; ++m) {
      const double coef = ((m == k ? 1.0 : 0.0) - 1.0 / static_cast<double>(c)) / vertex_norm;
      for (std::size_t j = 0; j < d; ++j) means[k][j] += spec.separation * coef * frame[m][j];
    }
  }

  Dataset data;
  data.input_dim = d;
  data.inputs.reserve(spec.n_samples * d);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const std::size_t label = i % c;
    for (std::size_t j = 0; j < d; ++j) data.inputs.push_back(means[label][j] + stream.normal());
    data.classes.push_back(label);
  }
  return data;
}

// Numeric CSV; a first line that does not parse as numbers is taken as a
// header. The label column holds non-negative integer class indices.
inline Dataset load_csv(const std::string& path, std::size_t label_column) {
  std::ifstream in(path);
  if (!in) throw ConfigError("data.path", "cannot open '" + path + "'");
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> values;
    std::stringstream ss(line);
    bool numeric = true;
    for (std::string field; std::getline(ss, field, ',');) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(field, &used));
        if (field.find_first_not_of(" \t", used) != std::string::npos) numeric = false;
      } catch (const std::logic_error&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (width == 0 && data.classes.empty()) continue;  // header
      throw ConfigError("data.path", path + ":" + std::to_string(line_no) + ": non-numeric row");
    }
    if (width == 0) {
      width = values.size();
      if (label_column >= width) throw ConfigError("data.label_column", "out of range");
      data.input_dim = width - 1;
    } else if (values.size() != width) {
      throw ConfigError("data.path", path + ":" + std::to_string(line_no) + ": ragged row");
    }
    const double label = values[label_column];
    if (label < 0.0 || label != std::floor(label)) {
      throw ConfigError("data.path",
                        path + ":" + std::to_string(line_no) + ": label must be a class index");
    }
    data.classes.push_back(static_cast<std::size_t>(label));
    for (std::size_t j = 0; j < width; ++j) {
      if (j != label_column) data.inputs.push_back(values[j]);
    }
  }
  if (data.classes.empty()) throw ConfigError("data.path", "no rows in '" + path + "'");
  return data;
}

inline std::size_t n_classes(const Dataset& data) {
  std::size_t m = 0;
  for (std::size_t c : data.classes) m = std::max(m, c + 1);
  return m;
}

struct Split {
  Dataset train;
  Dataset eval;
};

// Seeded shuffle, then the last `eval_fraction` of rows become the eval set.
inline Split holdout_split(const Dataset& data, double eval_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Stream(rng::derive(seed, "holdout")).shuffle(order);
  const auto n_eval = static_cast<std::size_t>(
      std::llround(eval_fraction * static_cast<double>(order.size())));
  const std::size_t n_train = order.size() - n_eval;
  if (n_train == 0 || n_eval == 0) throw ConfigError("data", "dataset too small to split");
  std::vector<std::size_t> train_rows(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> eval_rows(order.begin() + n_train, order.end());
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(eval_rows.begin(), eval_rows.end());
  return {select_rows(data, train_rows), select_rows(data, eval_rows)};
}

enum class PartitionKind { kUniform, kLabelSkew };

struct PartitionScheme {
  PartitionKind kind = PartitionKind::kUniform;
  std::size_t n_clients = 10;
  std::size_t classes_per_client = 1;  // LabelSkew only
};

// Row indices per client. Shards are disjoint and cover every row.
//
// Uniform: seeded shuffle dealt round-robin (sizes differ by at most one).
// LabelSkew: client c holds classes {(c*k + j) mod C : j < k}; each class's
// rows are shuffled and dealt round-robin over its holders.
inline std::vector<std::vector<std::size_t>> partition_indices(const Dataset& data,
                                                                const PartitionScheme& scheme,
                                                                std::uint64_t seed) {
  const std::size_t n = data.size();
  if (scheme.n_clients < 1) throw ConfigError("partition.n_clients", "must be >= 1");
  if (n < scheme.n_clients) {
    throw ConfigError("partition.n_clients", "more clients than samples");
  }
  rng::Stream stream(rng::derive(seed, "partition"));
  std::vector<std::vector<std::size_t>> shards(scheme.n_clients);

  if (scheme.kind == PartitionKind::kUniform) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    stream.shuffle(order);
    for (std::size_t i = 0; i < n; ++i) shards[i % scheme.n_clients].push_back(order[i]);
  } else {
    const std::size_t n_cls = n_classes(data);
    const std::size_t k = scheme.classes_per_client;
    if (k < 1 || k > n_cls) {
      throw ConfigError("partition.classes_per_client",
                        "must lie in [1, " + std::to_string(n_cls) + "]");
    }
    if (scheme.n_clients * k < n_cls) {
      throw ConfigError("partition.classes_per_client",
                        "n_clients * classes_per_client must cover all " +
                            std::to_string(n_cls) + " classes");
    }
    std::vector<std::vector<std::size_t>> holders(n_cls);
    for (std::size_t c = 0; c < scheme.n_clients; ++c) {
      std::set<std::size_t> held;
      for (std::size_t j = 0; j < k; ++j) held.insert((c * k + j) % n_cls);
      for (std::size_t cls : held) holders[cls].push_back(c);
    }
    std::vector<std::vector<std::size_t>> rows_of(n_cls);
    for (std::size_t i = 0; i < n; ++i) rows_of[data.classes[i]].push_back(i);
    for (std::size_t cls = 0; cls < n_cls; ++cls) {
      stream.shuffle(rows_of[cls]);
      for (std::size_t i = 0; i < rows_of[cls].size(); ++i) {
        shards[holders[cls][i % holders[cls].size()]].push_back(rows_of[cls][i]);
      }
    }
    for (std::size_t c = 0; c < scheme.n_clients; ++c) {
      if (shards[c].empty()) {
        throw ConfigError("partition.classes_per_client",
                          "client " + std::to_string(c) + " received no samples");
      }
    }
  }
  for (auto& s : shards) std::sort(s.begin(), s.end());
  return shards;
}

inline std::vector<Dataset> partition_data(const Dataset& data, const PartitionScheme& scheme,
                                           std::uint64_t seed) {
  std::vector<Dataset> out;
  for (const auto& rows : partition_indices(data, scheme, seed)) {
    out.push_back(select_rows(data, rows));
  }
  return out;
}

}  // namespace fwdfed
