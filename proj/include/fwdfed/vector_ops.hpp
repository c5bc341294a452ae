#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fwdfed/error.hpp"

namespace fwdfed {

// Flat parameter or gradient vector. All model arithmetic is 64-bit.
using ParamVector = std::vector<double>;

inline void require_same_size(std::span<const double> a, std::span<const double> b,
                              const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": length " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_size(x, y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline ParamVector scaled(std::span<const double> x, double alpha) {
  ParamVector out(x.begin(), x.end());
  for (double& v : out) v *= alpha;
  return out;
}

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

// ||a - b||_2 / ||b||_2
inline double relative_l2_error(std::span<const double> a, std::span<const double> b) {
  require_same_size(a, b, "relative_l2_error");
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(num) / norm2(b);
}

}  // namespace fwdfed
