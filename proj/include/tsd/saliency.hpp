#pragma once

// Temporal saliency under opposing-class perturbation, plus the post-hoc
// attribution methods used to compare teacher and student explanations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsd/data.hpp"
#include "tsd/io.hpp"
#include "tsd/models.hpp"
#include "tsd/prob.hpp"
#include "tsd/rng.hpp"

namespace tsd {

enum class SaliencyVariant { kWhole, kBinary, kTargetScalar };

inline std::string to_string(SaliencyVariant v) {
  switch (v) {
    case SaliencyVariant::kWhole: return "WHOLE";
    case SaliencyVariant::kBinary: return "BINARY";
    case SaliencyVariant::kTargetScalar: return "TARGET_SCALAR";
  }
  return "?";
}

inline SaliencyVariant variant_from_string(const std::string& s) {
  if (s == "WHOLE") return SaliencyVariant::kWhole;
  if (s == "BINARY") return SaliencyVariant::kBinary;
  if (s == "TARGET_SCALAR") return SaliencyVariant::kTargetScalar;
  throw std::invalid_argument("unknown saliency variant '" + s + "'");
}

struct Subsequence {
  std::size_t start = 0;
  std::size_t width = 1;
  bool operator==(const Subsequence&) const = default;
};

struct SubsequenceGrid {
  std::vector<Subsequence> pairs;
  std::size_t series_length = 0;

  std::size_t size() const noexcept { return pairs.size(); }
  bool operator==(const SubsequenceGrid&) const = default;
};

/// Evenly spaced starts round(i*(T-width)/(num-1)), de-duplicated.
inline SubsequenceGrid make_grid(std::size_t series_length, std::size_t num_subsequences, std::size_t width) {
  if (width < 1 || width > series_length) {
    throw std::invalid_argument("make_grid: width " + std::to_string(width) + " must be in [1, " +
                                std::to_string(series_length) + "]");
  }
  const std::size_t span = series_length - width;
  if (num_subsequences < 1 || num_subsequences > span + 1) {
    throw std::invalid_argument("make_grid: num_subsequences must be in [1, " + std::to_string(span + 1) + "]");
  }
  SubsequenceGrid grid;
  grid.series_length = series_length;
  if (num_subsequences == 1) {
    grid.pairs.push_back({0, width});
    return grid;
  }
  const std::size_t den = num_subsequences - 1;
  for (std::size_t i = 0; i < num_subsequences; ++i) {
    const std::size_t start = (2 * i * span + den) / (2 * den);  // round half up
    if (grid.pairs.empty() || grid.pairs.back().start != start) grid.pairs.push_back({start, width});
  }
  return grid;
}

/// x with [start, start+width) replaced by the background's values.
inline std::vector<double> perturb(const std::vector<double>& x, const std::vector<double>& background,
                                   std::size_t start, std::size_t width) {
  if (x.size() != background.size()) throw DimensionError("perturb: series and background differ in length", 0);
  if (start + width > x.size()) {
    throw std::out_of_range("perturb: subsequence [" + std::to_string(start) + ", " +
                            std::to_string(start + width) + ") exceeds length " + std::to_string(x.size()));
  }
  std::vector<double> out = x;
  std::copy_n(background.begin() + static_cast<std::ptrdiff_t>(start), width,
              out.begin() + static_cast<std::ptrdiff_t>(start));
  return out;
}

struct SaliencyProfile {
  std::vector<double> scores;
  double mean = 0.0;
  SaliencyVariant variant = SaliencyVariant::kWhole;
  double tau = 1.0;
};

inline double arithmetic_mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Rows for one instance: the original followed by one perturbation per grid entry.
inline void append_perturbation_rows(std::vector<double>& rows, const std::vector<double>& x,
                                     const std::vector<double>& background, const SubsequenceGrid& grid) {
  if (grid.series_length != x.size()) {
    throw DimensionError("grid built for length " + std::to_string(grid.series_length) + " but series has " +
                             std::to_string(x.size()),
                         0);
  }
  if (background.size() != x.size()) throw DimensionError("background length differs from series", 0);
  rows.insert(rows.end(), x.begin(), x.end());
  for (const auto& s : grid.pairs) {
    const std::size_t off = rows.size();
    rows.insert(rows.end(), x.begin(), x.end());
    std::copy_n(background.begin() + static_cast<std::ptrdiff_t>(s.start), s.width,
                rows.begin() + static_cast<std::ptrdiff_t>(off + s.start));
  }
}

/// Saliency scores [groups, G] from logits laid out as `groups` blocks of
/// (1 + G) rows (original first). `targets` holds one class per group.
inline Var saliency_from_logits(const Var& logits, std::size_t groups, std::size_t grid_size,
                                const std::vector<std::size_t>& targets, double tau, SaliencyVariant variant) {
  if (!(tau > 0.0)) throw std::invalid_argument("saliency temperature must be positive");
  if (targets.size() != groups) throw DimensionError("saliency: one target per instance required", 0);
  const std::size_t stride = grid_size + 1;
  if (logits.shape()[0] != groups * stride) throw DimensionError("saliency: logits rows != groups*(G+1)", 0);

  std::vector<std::size_t> orig_idx, pert_idx;
  orig_idx.reserve(groups * grid_size);
  pert_idx.reserve(groups * grid_size);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t k = 0; k < grid_size; ++k) {
      orig_idx.push_back(g * stride);
      pert_idx.push_back(g * stride + 1 + k);
    }
  std::vector<std::size_t> row_targets(groups * stride);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t k = 0; k < stride; ++k) row_targets[g * stride + k] = targets[g];

  Var scores;
  switch (variant) {
    case SaliencyVariant::kWhole: {
      Var p = softmax_rows(logits, tau);
      scores = kl_rows(select_rows(p, orig_idx), select_rows(p, pert_idx));
      break;
    }
    case SaliencyVariant::kBinary: {
      Var p = target_vs_rest(softmax_rows(logits, tau), std::move(row_targets));
      scores = kl_rows(select_rows(p, orig_idx), select_rows(p, pert_idx));
      break;
    }
    case SaliencyVariant::kTargetScalar: {
      // Scalar probability drift is read at tau = 1.
      Var pt = pick(softmax_rows(logits, 1.0), std::move(row_targets));
      scores = abs(sub(select_rows(pt, orig_idx), select_rows(pt, pert_idx)));
      break;
    }
  }
  return reshape(scores, Shape{groups, grid_size});
}

/// Effective temperature a variant uses.
inline double variant_tau(SaliencyVariant v, double tau) { return v == SaliencyVariant::kTargetScalar ? 1.0 : tau; }

/// Saliency of several instances against their backgrounds in one batched
/// forward pass. `targets[i]` is the class whose probability defines the
/// BINARY and TARGET_SCALAR variants (the instance's label).
inline std::vector<SaliencyProfile> temporal_saliency_batch(const Model& model,
                                                            const std::vector<const std::vector<double>*>& xs,
                                                            const std::vector<const std::vector<double>*>& backgrounds,
                                                            const std::vector<std::size_t>& targets,
                                                            const SubsequenceGrid& grid, double tau,
                                                            SaliencyVariant variant) {
  if (!(tau > 0.0)) throw std::invalid_argument("saliency temperature must be positive");
  if (grid.series_length != model.spec.input_length) {
    throw DimensionError("grid length does not match model input length", 2);
  }
  const std::size_t groups = xs.size();
  std::vector<double> rows;
  rows.reserve(groups * (grid.size() + 1) * grid.series_length);
  for (std::size_t i = 0; i < groups; ++i) append_perturbation_rows(rows, *xs[i], *backgrounds[i], grid);
  Tape tape;
  Var x = tape.constant(Shape{groups * (grid.size() + 1), model.spec.input_channels, model.spec.input_length},
                        std::move(rows));
  Var s = saliency_from_logits(forward(tape, model, x), groups, grid.size(), targets, tau, variant);
  std::vector<SaliencyProfile> out(groups);
  auto sv = s.values();
  for (std::size_t i = 0; i < groups; ++i) {
    out[i].scores.assign(sv.begin() + static_cast<std::ptrdiff_t>(i * grid.size()),
                         sv.begin() + static_cast<std::ptrdiff_t>((i + 1) * grid.size()));
    out[i].mean = arithmetic_mean(out[i].scores);
    out[i].variant = variant;
    out[i].tau = variant_tau(variant, tau);
  }
  return out;
}

inline SaliencyProfile temporal_saliency(const Model& model, const Instance& x, const Instance& background,
                                         const SubsequenceGrid& grid, double tau, SaliencyVariant variant) {
  return temporal_saliency_batch(model, {&x.values}, {&background.values}, {x.label}, grid, tau, variant).front();
}

/// Draws one opposing-class background per (epoch, instance) from a split.
class BackgroundSelector {
 public:
  BackgroundSelector(const TimeSeriesDataset& source, std::uint64_t seed) : source_(&source), seed_(seed) {
    by_class_.resize(source.num_classes);
    for (std::size_t i = 0; i < source.size(); ++i) by_class_[source.instances[i].label].push_back(i);
  }

  /// Index into the source split of a background whose label differs from
  /// `label`. Deterministic in (seed, epoch, instance).
  std::size_t select(std::size_t epoch, std::size_t instance, std::size_t label) const {
    std::size_t pool = 0;
    for (std::size_t c = 0; c < by_class_.size(); ++c)
      if (c != label) pool += by_class_[c].size();
    if (pool == 0) throw std::runtime_error("no opposing-class instance available for background");
    std::mt19937_64 rng(derive_seed(seed_, {epoch, instance}));
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, pool - 1)(rng);
    for (std::size_t c = 0; c < by_class_.size(); ++c) {
      if (c == label) continue;
      if (pick < by_class_[c].size()) return by_class_[c][pick];
      pick -= by_class_[c].size();
    }
    throw std::logic_error("background selection fell through");
  }

  const TimeSeriesDataset& source() const { return *source_; }

 private:
  const TimeSeriesDataset* source_;
  std::uint64_t seed_;
  std::vector<std::vector<std::size_t>> by_class_;
};

// ---------------------------------------------------------------------------
// Post-hoc attributions

inline std::size_t predicted_class(const Model& model, const std::vector<double>& x) {
  return argmax(predict_logits(model, x, 1));
}

/// Drop in predicted-class probability when a sliding window is set to
/// `baseline_value`, averaged over the windows covering each timestep.
/// `target` overrides the explained class (default: the model's prediction).
inline std::vector<double> occlusion_map(const Model& model, const std::vector<double>& x, std::size_t window = 1,
                                         double baseline_value = 0.0, std::optional<std::size_t> target = {}) {
  const std::size_t len = x.size();
  if (window < 1 || window > len) throw std::invalid_argument("occlusion window must be in [1, T]");
  const std::size_t n_windows = len - window + 1;
  std::vector<double> rows;
  rows.reserve((n_windows + 1) * len);
  rows.insert(rows.end(), x.begin(), x.end());
  for (std::size_t s = 0; s < n_windows; ++s) {
    const std::size_t off = rows.size();
    rows.insert(rows.end(), x.begin(), x.end());
    std::fill_n(rows.begin() + static_cast<std::ptrdiff_t>(off + s), window, baseline_value);
  }
  const auto logits = predict_logits(model, rows, n_windows + 1);
  const std::size_t classes = model.spec.num_classes;
  auto prob = [&](std::size_t r) {
    return softmax_temperature(std::span<const double>(logits).subspan(r * classes, classes), 1.0);
  };
  const auto p0 = prob(0);
  const std::size_t c = target.value_or(argmax(p0));
  if (c >= classes) throw std::out_of_range("occlusion_map: target class out of range");
  std::vector<double> total(len, 0.0), count(len, 0.0);
  for (std::size_t s = 0; s < n_windows; ++s) {
    const double drop = p0[c] - prob(s + 1)[c];
    for (std::size_t t = s; t < s + window; ++t) {
      total[t] += drop;
      count[t] += 1.0;
    }
  }
  for (std::size_t t = 0; t < len; ++t) total[t] /= count[t];
  return total;
}

/// |d(predicted-class logit)/dx_t|.
inline std::vector<double> gradient_saliency(const Model& model, const std::vector<double>& x,
                                             std::optional<std::size_t> target = {}) {
  const std::size_t c = target ? *target : predicted_class(model, x);
  Tensor input(Shape{1, model.spec.input_channels, model.spec.input_length}, x);
  input.with_grad();
  Tape tape;
  Var logits = forward(tape, model, tape.leaf(input));
  tape.backward(sum(pick(logits, {c})));
  std::vector<double> out(input.grad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(input.grad[i]);
  return out;
}

/// Integrated gradients of the predicted-class logit along the straight path
/// from `baseline` to `x`, midpoint Riemann sum with `steps` points.
inline std::vector<double> integrated_gradients(const Model& model, const std::vector<double>& x,
                                                const std::vector<double>& baseline, std::size_t steps = 64,
                                                std::optional<std::size_t> target = {}) {
  if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be >= 1");
  if (x.size() != baseline.size()) throw DimensionError("integrated_gradients: baseline length differs", 0);
  const std::size_t len = x.size();
  const std::size_t c = target ? *target : predicted_class(model, x);
  Tensor path(Shape{steps, model.spec.input_channels, model.spec.input_length});
  for (std::size_t k = 0; k < steps; ++k) {
    const double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    for (std::size_t t = 0; t < len; ++t) path.values[k * len + t] = baseline[t] + alpha * (x[t] - baseline[t]);
  }
  path.with_grad();
  Tape tape;
  Var logits = forward(tape, model, tape.leaf(path));
  tape.backward(sum(pick(logits, std::vector<std::size_t>(steps, c))));
  std::vector<double> out(len, 0.0);
  for (std::size_t k = 0; k < steps; ++k)
    for (std::size_t t = 0; t < len; ++t) out[t] += path.grad[k * len + t];
  for (std::size_t t = 0; t < len; ++t) out[t] = (x[t] - baseline[t]) * out[t] / static_cast<double>(steps);
  return out;
}

/// x + epsilon * sign(dCE/dx) for the instance's true label.
inline std::vector<double> fgsm_perturb(const Model& model, const std::vector<double>& x, std::size_t label,
                                        double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("fgsm epsilon must be >= 0");
  if (epsilon == 0.0) return x;
  Tensor input(Shape{1, model.spec.input_channels, model.spec.input_length}, x);
  input.with_grad();
  Tape tape;
  tape.backward(cross_entropy(forward(tape, model, tape.leaf(input)), {label}));
  std::vector<double> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = input.grad[i];
    out[i] += g > 0.0 ? epsilon : (g < 0.0 ? -epsilon : 0.0);
  }
  return out;
}

/// One row per map: id, then the values.
inline std::string serialize_maps(const std::vector<std::vector<double>>& maps, char delim = ',') {
  std::string out;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    out += std::to_string(i);
    for (double v : maps[i]) {
      out += delim;
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

}  // namespace tsd
