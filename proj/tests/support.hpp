#pragma once

// Shared helpers for the unit and acceptance suites: a central finite-difference
// oracle and small random generators.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tsd/data.hpp"
#include "tsd/models.hpp"
#include "tsd/ops.hpp"
#include "tsd/tape.hpp"

namespace tsd::testing {

/// Builds a scalar loss on `tape` from the bound leaves.
using LossFn = std::function<Var(Tape&, std::vector<Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // elements within reach of a kink
  std::string worst;  // "leaf[i]: analytic vs numeric"
};

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared on an absolute scale.
inline double rel_error(double a, double n, double floor = 1e-3) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor});
}

/// Analytic gradients of `fn` w.r.t. every element of every tensor in
/// `leaves`, compared to central differences with step h.
inline GradCheck check_gradients(std::vector<Tensor>& leaves, const LossFn& fn, double h = 1e-6) {
  for (auto& t : leaves) t.with_grad(true).zero_grad();
  {
    Tape tape;
    std::vector<Var> vars;
    for (auto& t : leaves) vars.push_back(tape.leaf(t));
    tape.backward(fn(tape, vars));
  }
  auto eval = [&] {
    Tape tape;
    std::vector<Var> vars;
    for (auto& t : leaves) vars.push_back(tape.constant(t));
    return fn(tape, vars).item();
  };
  GradCheck res;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (std::size_t i = 0; i < leaves[l].size(); ++i) {
      const double orig = leaves[l].values[i];
      leaves[l].values[i] = orig + h;
      const double up = eval();
      leaves[l].values[i] = orig - h;
      const double down = eval();
      leaves[l].values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = leaves[l].grad[i];
      const double e = rel_error(analytic, numeric);
      ++res.checked;
      if (e > res.max_rel_error) {
        res.max_rel_error = e;
        res.worst = std::to_string(l) + "[" + std::to_string(i) + "]: " + std::to_string(analytic) + " vs " +
                    std::to_string(numeric);
      }
    }
  }
  return res;
}

/// Scalar loss built from the logits of a model forward pass.
using ModelLossFn = std::function<Var(Tape&, const Var& logits)>;

/// Analytic gradients of `loss(forward(model, batch))` w.r.t. every model
/// parameter, compared to central differences. ReLU networks are piecewise
/// smooth: an element whose differences at h and 4h disagree by more than
/// `kink_tol` straddles a kink and is counted in `skipped` instead.
inline GradCheck check_model_gradients(Model& model, const Tensor& batch, const ModelLossFn& loss, double h = 1e-6,
                                       double kink_tol = 1e-3) {
  model.params.set_requires_grad(true);
  model.params.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape, forward(tape, model, tape.constant(batch))));
  }
  auto eval = [&] {
    Tape tape;
    const Model& frozen = model;
    return loss(tape, forward(tape, frozen, tape.constant(batch))).item();
  };
  GradCheck res;
  for (auto& [name, p] : model.params.tensors) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.values[i];
      auto central = [&](double step) {
        p.values[i] = orig + step;
        const double up = eval();
        p.values[i] = orig - step;
        const double down = eval();
        p.values[i] = orig;
        return (up - down) / (2.0 * step);
      };
      const double numeric = central(h);
      if (rel_error(numeric, central(4.0 * h)) > kink_tol) {
        ++res.skipped;
        continue;
      }
      const double e = rel_error(p.grad[i], numeric);
      ++res.checked;
      if (e > res.max_rel_error) {
        res.max_rel_error = e;
        res.worst = name + "[" + std::to_string(i) + "]: " + std::to_string(p.grad[i]) + " vs " + std::to_string(numeric);
      }
    }
  }
  return res;
}

/// Average precision by brute force: at every distinct score threshold,
/// count predicted positives (score >= threshold) over all points.
inline double average_precision_oracle(const std::vector<double>& scores, const std::vector<bool>& positive) {
  std::vector<double> thresholds(scores);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  double ap = 0.0;
  std::size_t prev_tp = 0;
  for (double th : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= th) (positive[i] ? tp : fp) += 1;
    ap += (static_cast<double>(tp - prev_tp) / static_cast<double>(n_pos)) *
          (static_cast<double>(tp) / static_cast<double>(tp + fp));
    prev_tp = tp;
  }
  return ap;
}

/// ROC AUC by counting every (positive, negative) pair, ties as one half.
inline double roc_auc_oracle(const std::vector<double>& scores, const std::vector<bool>& positive) {
  std::size_t twice = 0, n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) (positive[i] ? n_pos : n_neg) += 1;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (positive[i] && !positive[j]) twice += scores[i] > scores[j] ? 2 : (scores[i] == scores[j] ? 1 : 0);
  return (0.5 * static_cast<double>(twice)) / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Random binary case with 2..max_n points, both classes present, scores
/// drawn from a coarse grid so that ties occur.
inline void random_binary_case(std::mt19937_64& rng, std::size_t max_n, std::vector<double>& scores,
                               std::vector<bool>& positive) {
  std::uniform_int_distribution<std::size_t> size(2, max_n);
  const std::size_t n = size(rng);
  const int levels = std::uniform_int_distribution<int>(2, 12)(rng);
  std::uniform_int_distribution<int> level(0, levels);
  do {
    scores.assign(n, 0.0);
    positive.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(level(rng)) / levels;
      positive[i] = (rng() & 1U) != 0;
    }
  } while (std::count(positive.begin(), positive.end(), true) == 0 ||
           std::count(positive.begin(), positive.end(), false) == 0);
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), random_vector(rng, n, lo, hi));
}

/// Values bounded away from zero, for primitives with a kink at 0.
inline Tensor random_away_from_zero(std::mt19937_64& rng, Shape shape, double margin = 0.05) {
  Tensor t = random_tensor(rng, std::move(shape));
  for (auto& v : t.values) v = v >= 0.0 ? v + margin : v - margin;
  return t;
}

/// Reduces any Var to a scalar through a fixed random projection so that
/// every output element contributes a distinct weight.
inline Var project(Tape& t, const Var& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(v, t.constant(v.shape(), random_vector(rng, v.size()))));
}

/// Random probability rows [rows, cols] bounded away from 0.
inline std::vector<double> random_simplex_rows(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> v(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (v[r * cols + c] = u(rng));
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] /= s;
  }
  return v;
}

/// Small random dataset with `classes` classes, `per_class` each.
inline TimeSeriesDataset random_dataset(std::mt19937_64& rng, std::size_t classes, std::size_t per_class,
                                        std::size_t length) {
  TimeSeriesDataset ds;
  ds.name = "random";
  ds.num_classes = classes;
  ds.series_length = length;
  for (std::size_t c = 0; c < classes; ++c) ds.class_labels.push_back(static_cast<long long>(c));
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < classes; ++c) {
      Instance inst;
      inst.values = random_vector(rng, length);
      inst.label = c;
      inst.prepared = true;
      ds.instances.push_back(std::move(inst));
    }
  return ds;
}

/// Linear model with given weights [C, T] and bias [C].
inline Model linear_model(std::size_t classes, std::size_t length, const std::vector<double>& w,
                          const std::vector<double>& b) {
  Model m = make_model(ModelSpec::linear(classes, length), 0);
  m.params.tensors.at("head.weight").values = w;
  m.params.tensors.at("head.bias").values = b;
  return m;
}

}  // namespace tsd::testing
