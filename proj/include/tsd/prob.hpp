#pragma once

// Value-level probability helpers. The tape versions live in ops.hpp; these
// are used by metrics and by code that never needs gradients.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsd/ops.hpp"

namespace tsd {

/// softmax(logits / tau), computed with max subtraction.
inline std::vector<double> softmax_temperature(std::span<const double> logits, double tau = 1.0) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax temperature must be positive");
  if (logits.empty()) throw DimensionError("softmax of empty vector", 0);
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (out[i] = std::exp((logits[i] - mx) / tau));
  for (double& v : out) v /= z;
  return out;
}

/// KL(p || q) in nats. q is floored at kKlFloor before the log; 0 ln 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw DimensionError("kl_divergence: length " + std::to_string(p.size()) + " vs " +
                             std::to_string(q.size()),
                         0);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw std::invalid_argument("kl_divergence: negative probability");
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kKlFloor)));
  }
  // Rounding can push a true zero slightly negative.
  return std::max(s, 0.0);
}

inline double smooth_l1(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("smooth_l1: length mismatch", 0);
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    const double ad = std::fabs(d);
    s += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  return s / static_cast<double>(a.size());
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace tsd
