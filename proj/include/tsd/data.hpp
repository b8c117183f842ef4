#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsd/io.hpp"

namespace tsd {

inline constexpr std::size_t kDefaultSeriesLength = 100;

/// Archive parse failure with 1-based row and column (0 when not applicable).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : std::runtime_error(what + " (row " + std::to_string(row) + ", column " + std::to_string(column) + ")"),
        row_(row),
        column_(column) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_, column_;
};

enum class Split { kTrain, kVal, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + s + "'");
}

struct Instance {
  std::vector<double> values;
  std::size_t label = 0;
  bool prepared = false;
};

struct TimeSeriesDataset {
  std::vector<Instance> instances;
  std::size_t num_classes = 0;
  std::size_t series_length = 0;
  std::string name;
  Split split = Split::kTrain;
  /// Original label value of each contiguous class index.
  std::vector<long long> class_labels;

  std::size_t size() const noexcept { return instances.size(); }

  void validate() const {
    if (instances.empty()) throw std::invalid_argument("dataset '" + name + "' has no instances");
    if (num_classes < 2) throw std::invalid_argument("dataset '" + name + "' needs at least 2 classes");
    for (const auto& inst : instances) {
      if (inst.label >= num_classes) throw std::invalid_argument("label outside [0, C) in '" + name + "'");
      if (inst.values.size() != series_length) {
        throw std::invalid_argument("instances of '" + name + "' differ in length");
      }
    }
  }

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(instances.size());
    for (const auto& i : instances) out.push_back(i.label);
    return out;
  }

  /// Row-major [rows, 1, T] values for the given instance indices.
  std::vector<double> flat(const std::vector<std::size_t>& idx) const {
    std::vector<double> out;
    out.reserve(idx.size() * series_length);
    for (std::size_t i : idx) out.insert(out.end(), instances[i].values.begin(), instances[i].values.end());
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(instances.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }
};

// ---------------------------------------------------------------------------
// Archive format: one instance per row, label first, comma or tab separated.

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, delim)) out.push_back(cur);
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \r\n");
  return s.substr(b, e - b + 1);
}

inline bool parse_real(const std::string& field, double& out) {
  const std::string f = trim(field);
  if (f.empty()) return false;
  char* end = nullptr;
  out = std::strtod(f.c_str(), &end);
  return end == f.c_str() + f.size() && std::isfinite(out);
}

}  // namespace detail

inline TimeSeriesDataset parse_archive(const std::string& text, const std::string& name = "dataset") {
  std::vector<std::string> lines;
  {
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (!detail::trim(line).empty()) lines.push_back(line);
    }
  }
  if (lines.empty()) throw ParseError("empty archive", 0, 0);
  const char delim = lines.front().find('\t') != std::string::npos ? '\t' : ',';

  std::vector<long long> raw_labels;
  std::vector<std::vector<double>> rows;
  std::size_t width = 0;
  for (std::size_t r = 0; r < lines.size(); ++r) {
    const auto fields = detail::split_fields(lines[r], delim);
    if (r == 0) {
      width = fields.size();
      if (width < 2) throw ParseError("row needs a label and at least one value", r + 1, fields.size());
    } else if (fields.size() != width) {
      throw ParseError("ragged row: expected " + std::to_string(width) + " fields, got " +
                           std::to_string(fields.size()),
                       r + 1, std::min(fields.size(), width) + 1);
    }
    double label = 0.0;
    if (!detail::parse_real(fields[0], label) || label != std::floor(label)) {
      throw ParseError("class label is not an integer: '" + fields[0] + "'", r + 1, 1);
    }
    raw_labels.push_back(static_cast<long long>(label));
    std::vector<double> values(width - 1);
    for (std::size_t c = 1; c < width; ++c) {
      if (!detail::parse_real(fields[c], values[c - 1])) {
        throw ParseError("non-numeric field '" + fields[c] + "'", r + 1, c + 1);
      }
    }
    rows.push_back(std::move(values));
  }

  const std::set<long long> distinct(raw_labels.begin(), raw_labels.end());
  TimeSeriesDataset ds;
  ds.name = name;
  ds.class_labels.assign(distinct.begin(), distinct.end());
  ds.num_classes = ds.class_labels.size();
  ds.series_length = width - 1;
  if (ds.num_classes < 2) {
    throw std::invalid_argument("archive '" + name + "' has " + std::to_string(ds.num_classes) +
                                " class(es); at least 2 required");
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto pos = std::lower_bound(ds.class_labels.begin(), ds.class_labels.end(), raw_labels[r]);
    ds.instances.push_back({std::move(rows[r]), static_cast<std::size_t>(pos - ds.class_labels.begin()), false});
  }
  return ds;
}

inline TimeSeriesDataset load_archive(const std::string& path) {
  const std::filesystem::path p(path);
  if (!std::filesystem::exists(p)) throw std::runtime_error("archive not found: " + path);
  return parse_archive(read_file(p), p.stem().string());
}

inline std::string serialize_archive(const TimeSeriesDataset& ds, char delim = ',') {
  std::string out;
  for (const auto& inst : ds.instances) {
    const long long label =
        ds.class_labels.size() == ds.num_classes ? ds.class_labels[inst.label] : static_cast<long long>(inst.label);
    out += std::to_string(label);
    for (double v : inst.values) {
      out += delim;
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

inline nlohmann::json dataset_metadata(const TimeSeriesDataset& ds) {
  const bool prepared =
      std::all_of(ds.instances.begin(), ds.instances.end(), [](const Instance& i) { return i.prepared; });
  return {{"name", ds.name},          {"num_classes", ds.num_classes}, {"series_length", ds.series_length},
          {"num_instances", ds.size()}, {"split", to_string(ds.split)}, {"prepared", prepared},
          {"class_labels", ds.class_labels}};
}

/// Writes `<path>` in archive format plus `<path>.json` metadata.
inline void export_dataset(const TimeSeriesDataset& ds, const std::string& path, char delim = ',') {
  write_file_atomic(path, serialize_archive(ds, delim));
  write_file_atomic(path + ".json", dataset_metadata(ds).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Preparation

/// Linear interpolation of `values` at positions j*(L-1)/(target_len-1).
inline std::vector<double> resample_linear(const std::vector<double>& values, std::size_t target_len) {
  const std::size_t len = values.size();
  if (len < 2 || target_len < 2) throw std::invalid_argument("resample_linear: lengths must be >= 2");
  std::vector<double> out(target_len);
  for (std::size_t j = 0; j < target_len; ++j) {
    const double pos = static_cast<double>(j * (len - 1)) / static_cast<double>(target_len - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    if (i >= len - 1) {
      out[j] = values[len - 1];
      continue;
    }
    const double frac = pos - static_cast<double>(i);
    out[j] = frac == 0.0 ? values[i] : values[i] * (1.0 - frac) + values[i + 1] * frac;
  }
  return out;
}

/// (x - mean) / population std; all zeros when std < 1e-8.
inline std::vector<double> z_normalize(const std::vector<double>& values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(values.size(), 0.0);
  if (sd < 1e-8) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean) / sd;
  return out;
}

/// Resample to `target_len`, then z-normalize each instance.
inline TimeSeriesDataset prepare(TimeSeriesDataset ds, std::size_t target_len = kDefaultSeriesLength) {
  for (auto& inst : ds.instances) {
    auto v = inst.values.size() == target_len ? inst.values : resample_linear(inst.values, target_len);
    inst.values = z_normalize(v);
    inst.prepared = true;
  }
  ds.series_length = target_len;
  return ds;
}

inline TimeSeriesDataset subset(const TimeSeriesDataset& ds, const std::vector<std::size_t>& idx, Split split) {
  TimeSeriesDataset out;
  out.num_classes = ds.num_classes;
  out.series_length = ds.series_length;
  out.name = ds.name;
  out.split = split;
  out.class_labels = ds.class_labels;
  for (std::size_t i : idx) out.instances.push_back(ds.instances[i]);
  return out;
}

struct SplitResult {
  TimeSeriesDataset train, val;
  std::vector<std::size_t> train_indices, val_indices;
  std::vector<std::string> warnings;
};

/// Stratified, seeded split. Classes with one instance stay in train.
inline SplitResult split_train_val(const TimeSeriesDataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("val_fraction must be in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.instances[i].label].push_back(i);

  std::mt19937_64 rng(seed);
  SplitResult res;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t n = members.size();
    std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    if (n == 1) {
      if (n_val > 0) {
        res.warnings.push_back("class " + std::to_string(c) +
                               " has a single instance; kept in train, absent from validation");
      }
      n_val = 0;
    } else {
      n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
    }
    res.val_indices.insert(res.val_indices.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    res.train_indices.insert(res.train_indices.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  std::sort(res.train_indices.begin(), res.train_indices.end());
  std::sort(res.val_indices.begin(), res.val_indices.end());
  if (res.val_indices.empty()) {
    throw std::invalid_argument("split would leave the validation set empty");
  }
  res.train = subset(ds, res.train_indices, Split::kTrain);
  res.val = subset(ds, res.val_indices, Split::kVal);
  return res;
}

/// Seeded stratified subset keeping round(fraction * n_c) (at least one) per class.
inline TimeSeriesDataset reduce_fraction(const TimeSeriesDataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("train fraction must be in (0, 1]");
  if (fraction == 1.0) return ds;
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.instances[i].label].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> keep;
  for (auto& members : by_class) {
    if (members.empty()) continue;
    std::shuffle(members.begin(), members.end(), rng);
    const auto n = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size()))));
    keep.insert(keep.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n));
  }
  std::sort(keep.begin(), keep.end());
  return subset(ds, keep, ds.split);
}

// ---------------------------------------------------------------------------
// Cylinder-Bell-Funnel generator.

/// Three classes: cylinder (plateau), bell (ramp up then drop), funnel
/// (drop then linear decay). Onset a ~ U[T/8, T/4], duration ~ U[T/4, 3T/4],
/// amplitude 6 + N(0,1), additive N(0,1) noise. Classes are interleaved.
inline TimeSeriesDataset generate_cbf(std::size_t per_class, std::size_t length, std::uint64_t seed) {
  if (per_class < 1) throw std::invalid_argument("generate_cbf: per_class must be >= 1");
  if (length < 16) throw std::invalid_argument("generate_cbf: length must be >= 16");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const auto tl = static_cast<long>(length);
  std::uniform_int_distribution<long> onset(tl / 8, tl / 4);
  std::uniform_int_distribution<long> duration(tl / 4, 3 * tl / 4);

  TimeSeriesDataset ds;
  ds.name = "CBF";
  ds.num_classes = 3;
  ds.series_length = length;
  ds.class_labels = {1, 2, 3};
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t cls = 0; cls < 3; ++cls) {
      const long a = onset(rng);
      const long b = std::min(a + duration(rng), tl - 1);
      const double amp = 6.0 + unit(rng);
      std::vector<double> v(length);
      for (long t = 0; t < tl; ++t) {
        double shape = 0.0;
        if (t >= a && t <= b) {
          const double span = static_cast<double>(b - a);
          switch (cls) {
            case 0: shape = 1.0; break;
            case 1: shape = static_cast<double>(t - a) / span; break;
            default: shape = static_cast<double>(b - t) / span; break;
          }
        }
        v[static_cast<std::size_t>(t)] = amp * shape + unit(rng);
      }
      ds.instances.push_back({std::move(v), cls, false});
    }
  }
  return ds;
}

}  // namespace tsd
