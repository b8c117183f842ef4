#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "tsd/io.hpp"
#include "tsd/prob.hpp"

namespace tsd {

/// Average precision of a binary ranking: sum over distinct thresholds
/// (descending) of (recall gain) * precision. Tied scores form one threshold.
inline double average_precision(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw DimensionError("average_precision: length mismatch", 0);
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  if (n_pos == 0) throw std::invalid_argument("average_precision: no positive instances");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t tp = 0, fp = 0, prev_tp = 0;
  double ap = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (positive[order[i]] ? tp : fp) += 1;
    ap += (static_cast<double>(tp - prev_tp) / static_cast<double>(n_pos)) *
          (static_cast<double>(tp) / static_cast<double>(tp + fp));
    prev_tp = tp;
  }
  return ap;
}

/// Mann-Whitney U / (P*N) with average ranks for ties.
inline double roc_auc_binary(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw DimensionError("roc_auc: length mismatch", 0);
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_auc: need positives and negatives");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) rank_sum += avg_rank;
    i = j;
  }
  const double u = rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

namespace detail {

template <class Binary>
double macro_one_vs_rest(const std::vector<double>& probs, std::size_t num_classes,
                         const std::vector<std::size_t>& labels, std::vector<std::string>* warnings, Binary fn) {
  if (num_classes == 0 || probs.size() != labels.size() * num_classes) {
    throw DimensionError("probabilities must be [M, C] with one label per row", 0);
  }
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<double> s(labels.size());
    std::vector<bool> pos(labels.size());
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= num_classes) throw std::out_of_range("label outside [0, C)");
      s[i] = probs[i * num_classes + c];
      pos[i] = labels[i] == c;
      n_pos += pos[i];
    }
    if (n_pos == 0 || n_pos == labels.size()) {
      if (warnings) {
        warnings->push_back("class " + std::to_string(c) + (n_pos == 0 ? " has no positives" : " has no negatives") +
                            "; skipped");
      }
      continue;
    }
    total += fn(s, pos);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("no class has both positives and negatives");
  return total / static_cast<double>(used);
}

}  // namespace detail

/// Macro one-vs-rest average precision over rows of class probabilities.
inline double auc_prc(const std::vector<double>& probs, std::size_t num_classes, const std::vector<std::size_t>& labels,
                      std::vector<std::string>* warnings = nullptr) {
  return detail::macro_one_vs_rest(probs, num_classes, labels, warnings, average_precision);
}

/// Macro one-vs-rest ROC AUC.
inline double auc_roc(const std::vector<double>& probs, std::size_t num_classes, const std::vector<std::size_t>& labels,
                      std::vector<std::string>* warnings = nullptr) {
  return detail::macro_one_vs_rest(probs, num_classes, labels, warnings, roc_auc_binary);
}

inline std::vector<std::size_t> argmax_rows(const std::vector<double>& rows, std::size_t num_classes) {
  std::vector<std::size_t> out(rows.size() / num_classes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = argmax(std::span<const double>(rows).subspan(i * num_classes, num_classes));
  }
  return out;
}

inline double accuracy(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels) {
  if (preds.size() != labels.size() || preds.empty()) throw DimensionError("accuracy: length mismatch", 0);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

inline double top1_agreement(const std::vector<std::size_t>& teacher, const std::vector<std::size_t>& student) {
  if (teacher.size() != student.size() || teacher.empty()) throw DimensionError("top1_agreement: length mismatch", 0);
  return accuracy(student, teacher);
}

/// Row-wise softmax(logits / tau) of an [M, C] block.
inline std::vector<double> softened_rows(const std::vector<double>& logits, std::size_t num_classes, double tau) {
  std::vector<double> out;
  out.reserve(logits.size());
  for (std::size_t i = 0; i < logits.size(); i += num_classes) {
    auto p = softmax_temperature(std::span<const double>(logits).subspan(i, num_classes), tau);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// Mean KL(teacher row || student row) over already-softened [M, C] rows.
inline double predictive_kl(const std::vector<double>& teacher_probs, const std::vector<double>& student_probs,
                            std::size_t num_classes) {
  if (teacher_probs.size() != student_probs.size() || teacher_probs.empty() ||
      teacher_probs.size() % num_classes != 0) {
    throw DimensionError("predictive_kl: shape mismatch", 0);
  }
  const std::size_t m = teacher_probs.size() / num_classes;
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    s += kl_divergence(std::span<const double>(teacher_probs).subspan(i * num_classes, num_classes),
                       std::span<const double>(student_probs).subspan(i * num_classes, num_classes));
  }
  return s / static_cast<double>(m);
}

inline double saliency_mse(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("saliency_mse: length mismatch", 0);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

struct FidelityReport {
  double top1_agreement = 0.0;
  double predictive_kl = 0.0;
  double tau = 1.0;
};

// ---------------------------------------------------------------------------
// Score table and cross-dataset aggregation

class ScoreTable {
 public:
  using Key = std::tuple<std::string, std::string, std::uint64_t>;  // method, dataset, seed

  void set(const std::string& method, const std::string& dataset, std::uint64_t seed, const std::string& metric,
           double value) {
    if (!std::isfinite(value)) throw std::invalid_argument("metric '" + metric + "' is not finite");
    entries_[{method, dataset, seed}][metric] = value;
  }

  const std::map<Key, std::map<std::string, double>>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  void merge(const ScoreTable& other) {
    for (const auto& [k, m] : other.entries_)
      for (const auto& [metric, v] : m) entries_[k][metric] = v;
  }

  std::vector<std::string> methods() const {
    std::set<std::string> s;
    for (const auto& [k, _] : entries_) s.insert(std::get<0>(k));
    return {s.begin(), s.end()};
  }
  std::vector<std::string> datasets() const {
    std::set<std::string> s;
    for (const auto& [k, _] : entries_) s.insert(std::get<1>(k));
    return {s.begin(), s.end()};
  }
  std::vector<std::string> metrics() const {
    std::set<std::string> s;
    for (const auto& [_, m] : entries_)
      for (const auto& [name, __] : m) s.insert(name);
    return {s.begin(), s.end()};
  }

  /// Mean over seeds; throws when no seed carries the metric.
  double seed_mean(const std::string& method, const std::string& dataset, const std::string& metric) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& [k, m] : entries_) {
      if (std::get<0>(k) != method || std::get<1>(k) != dataset) continue;
      auto it = m.find(metric);
      if (it == m.end()) continue;
      s += it->second;
      ++n;
    }
    if (n == 0) {
      throw std::out_of_range("missing cell: method '" + method + "', dataset '" + dataset + "', metric '" + metric + "'");
    }
    return s / static_cast<double>(n);
  }

  bool has(const std::string& method, const std::string& dataset, const std::string& metric) const {
    for (const auto& [k, m] : entries_)
      if (std::get<0>(k) == method && std::get<1>(k) == dataset && m.count(metric)) return true;
    return false;
  }

  /// Long format: method, dataset, seed, metric, value.
  std::string serialize() const {
    std::string out = "method\tdataset\tseed\tmetric\tvalue\n";
    for (const auto& [k, m] : entries_)
      for (const auto& [metric, v] : m) {
        out += std::get<0>(k) + '\t' + std::get<1>(k) + '\t' + std::to_string(std::get<2>(k)) + '\t' + metric + '\t' +
               format_double(v) + '\n';
      }
    return out;
  }

  static ScoreTable parse(const std::string& text) {
    ScoreTable t;
    std::istringstream is(text);
    std::string line;
    bool header = true;
    std::size_t row = 0;
    while (std::getline(is, line)) {
      ++row;
      if (line.empty()) continue;
      if (header) {
        header = false;
        continue;
      }
      std::istringstream ls(line);
      std::string method, dataset, seed, metric, value;
      if (!std::getline(ls, method, '\t') || !std::getline(ls, dataset, '\t') || !std::getline(ls, seed, '\t') ||
          !std::getline(ls, metric, '\t') || !std::getline(ls, value, '\t')) {
        throw std::runtime_error("malformed score table row " + std::to_string(row));
      }
      t.set(method, dataset, std::stoull(seed), metric, std::stod(value));
    }
    return t;
  }

  /// Datasets as rows, methods as columns, seed-averaged values.
  std::string pivot(const std::string& metric) const {
    const auto ms = methods();
    std::string out = "dataset";
    for (const auto& m : ms) out += '\t' + m;
    out += '\n';
    for (const auto& d : datasets()) {
      out += d;
      for (const auto& m : ms) out += '\t' + (has(m, d, metric) ? format_double(seed_mean(m, d, metric)) : "NA");
      out += '\n';
    }
    return out;
  }

 private:
  std::map<Key, std::map<std::string, double>> entries_;
};

struct RankSummary {
  double avg_rank = 0.0;
  std::size_t wins = 0;
  std::size_t losses = 0;
};

struct RankResult {
  std::map<std::string, RankSummary> per_method;
  /// dataset -> method -> rank
  std::map<std::string, std::map<std::string, double>> ranks;
};

/// Seed-averaged ranking per dataset (1 = best, ties share the average rank).
/// Every method tied for the top value counts a win; the rest count a loss.
inline RankResult rank_and_wins(const ScoreTable& table, const std::string& metric) {
  const auto ms = table.methods();
  const auto ds = table.datasets();
  RankResult res;
  if (ms.empty()) return res;
  for (const auto& d : ds) {
    std::vector<std::pair<double, std::string>> vals;
    for (const auto& m : ms) vals.emplace_back(table.seed_mean(m, d, metric), m);
    std::sort(vals.begin(), vals.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; i < vals.size();) {
      std::size_t j = i;
      while (j < vals.size() && vals[j].first == vals[i].first) ++j;
      const double r = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) {
        res.ranks[d][vals[k].second] = r;
        auto& s = res.per_method[vals[k].second];
        s.avg_rank += r;
        (i == 0 ? s.wins : s.losses) += 1;
      }
      i = j;
    }
  }
  for (auto& [_, s] : res.per_method) s.avg_rank /= static_cast<double>(ds.size());
  return res;
}

}  // namespace tsd
