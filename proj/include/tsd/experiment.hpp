#pragma once

// Config-driven experiment runner behind the `tsd` command line tool.
//
// Run directory layout (all paths relative to the output directory):
//   config.json                                 effective config echo
//   scores.tsv                                  long-format score table
//   <dataset>/teacher/{checkpoint.json, selection.json, metrics.json, seed_<k>.log.tsv, maps.csv}
//   <dataset>/<student>/<objective>/seed_<s>/{checkpoint.json, log.tsv, metrics.json, maps.csv}
//       beta search adds beta_search.tsv and beta_<b>/{log.tsv, metrics.json}
//   ablation/<axis>/sweep.tsv, ablation/<axis>/<value>/<dataset>/...
//   report/...                                  written by the report command

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsd/data.hpp"
#include "tsd/distill.hpp"
#include "tsd/evaluation.hpp"
#include "tsd/io.hpp"
#include "tsd/metrics.hpp"
#include "tsd/models.hpp"
#include "tsd/rng.hpp"

#ifndef TSD_BUILD_TYPE
#define TSD_BUILD_TYPE "unknown"
#endif

namespace tsd {

inline constexpr const char* kVersion = "0.1.0";

/// Invalid or unreadable configuration (exit code 1 in the CLI).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A run directory lacking files a command needs.
class IncompleteRunError : public std::runtime_error {
 public:
  IncompleteRunError(const std::string& what, std::vector<std::string> missing)
      : std::runtime_error(what), missing_(std::move(missing)) {}
  const std::vector<std::string>& missing() const { return missing_; }

 private:
  std::vector<std::string> missing_;
};

// ---------------------------------------------------------------------------
// Configuration

struct DatasetSource {
  std::string name = "CBF";
  std::string kind = "cbf";  // "cbf" or "archive"
  std::string train_path, test_path;
  std::size_t train_per_class = 10;
  std::size_t test_per_class = 300;
  std::size_t cbf_length = 100;

  bool operator==(const DatasetSource&) const = default;
};

/// Model architecture without the data-dependent dimensions.
struct Architecture {
  Family family = Family::kFcn;
  std::size_t num_blocks = 2;
  std::size_t width = 4;
  std::vector<std::size_t> kernel_sizes;  // empty: family default

  ModelSpec to_spec(std::size_t classes, std::size_t length) const {
    ModelSpec s{family, num_blocks, width, kernel_sizes, classes, length, 1};
    if (family == Family::kFcn && s.kernel_sizes.empty()) s.kernel_sizes = fcn_default_kernels(num_blocks);
    if (family == Family::kLinear) s = ModelSpec::linear(classes, length);
    return s;
  }

  bool operator==(const Architecture&) const = default;
};

struct StudentEntry {
  std::string name = "student";
  Architecture arch;

  bool operator==(const StudentEntry&) const = default;
};

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"tau",     "width",          "num_subsequences",
                                                "variant", "train_fraction", "fgsm_epsilon"};
  return axes;
}

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> m = {"auc_prc",        "auc_roc",       "accuracy",     "top1_agreement",
                                             "predictive_kl",  "occlusion_mse", "gradient_mse", "ig_mse"};
  return m;
}

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::vector<DatasetSource> datasets{DatasetSource{}};
  std::size_t series_length = kDefaultSeriesLength;
  double val_fraction = 0.2;
  Architecture teacher{Family::kFcn, 3, 32, {}};
  std::size_t num_teacher_seeds = 5;
  std::vector<StudentEntry> students{StudentEntry{}};
  DistillConfig distill;  // objective and seed are set per run
  std::vector<Objective> objectives{Objective::kBase, Objective::kBaseKd, Objective::kTsd};
  bool beta_search = false;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<std::string> metrics{"auc_prc", "auc_roc", "accuracy", "top1_agreement", "predictive_kl",
                                   "occlusion_mse"};
  double fidelity_tau = 4.0;  // defaults to distill.tau_kd
  std::size_t occlusion_window = 1;
  double occlusion_baseline = 0.0;
  std::size_t ig_steps = 64;
  std::size_t export_instances = 5;
  std::string ablation_axis;  // empty: no ablation configured
  nlohmann::json ablation_values = nlohmann::json::array();
  std::string fgsm_source = "student";  // "student" or "teacher"
  std::string output_dir = "runs/experiment";

  bool wants(const std::string& metric) const {
    return std::find(metrics.begin(), metrics.end(), metric) != metrics.end();
  }

  AttributionOptions attribution() const {
    AttributionOptions o;
    o.occlusion = wants("occlusion_mse");
    o.gradient = wants("gradient_mse");
    o.integrated_gradients = wants("ig_mse");
    o.occlusion_window = occlusion_window;
    o.occlusion_baseline = occlusion_baseline;
    o.ig_steps = ig_steps;
    return o;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
    if (datasets.empty()) fail("at least one dataset is required");
    std::set<std::string> names;
    for (const auto& d : datasets) {
      if (d.name.empty() || d.name.find_first_of("/\\\t\n") != std::string::npos) fail("bad dataset name '" + d.name + "'");
      if (!names.insert(d.name).second) fail("duplicate dataset name '" + d.name + "'");
      if (d.kind == "archive") {
        if (d.train_path.empty() || d.test_path.empty()) fail("archive dataset '" + d.name + "' needs train_path and test_path");
      } else if (d.kind == "cbf") {
        if (d.train_per_class < 2 || d.test_per_class < 1) fail("cbf dataset '" + d.name + "' needs train_per_class >= 2");
      } else {
        fail("dataset kind must be 'cbf' or 'archive', got '" + d.kind + "'");
      }
    }
    if (series_length < 2) fail("series_length must be >= 2");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction must be in (0, 1)");
    if (num_teacher_seeds < 1) fail("num_teacher_seeds must be >= 1");
    if (students.empty()) fail("at least one student is required");
    std::set<std::string> snames;
    for (const auto& s : students) {
      if (s.name.empty() || s.name == "teacher" || s.name == "report" || s.name == "ablation" ||
          s.name.find_first_of("/\\\t\n:") != std::string::npos) {
        fail("bad student name '" + s.name + "'");
      }
      if (!snames.insert(s.name).second) fail("duplicate student name '" + s.name + "'");
    }
    if (objectives.empty()) fail("at least one objective is required");
    if (std::set<Objective>(objectives.begin(), objectives.end()).size() != objectives.size()) fail("duplicate objective");
    if (seeds.empty()) fail("at least one seed is required");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) fail("duplicate seed");
    for (const auto& m : metrics)
      if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end()) fail("unknown metric '" + m + "'");
    if (metrics.empty()) fail("metrics list is empty");
    if (!(fidelity_tau > 0.0)) fail("fidelity_tau must be > 0");
    if (occlusion_window < 1 || occlusion_window > series_length) fail("occlusion_window must be in [1, series_length]");
    if (ig_steps < 1) fail("ig_steps must be >= 1");
    if (beta_search && distill.beta_grid.empty()) fail("beta_search needs a non-empty beta_grid");
    if (!ablation_axis.empty() &&
        std::find(ablation_axes().begin(), ablation_axes().end(), ablation_axis) == ablation_axes().end()) {
      fail("unknown ablation axis '" + ablation_axis + "'");
    }
    if (!ablation_values.is_array()) fail("ablation.values must be an array");
    if (fgsm_source != "student" && fgsm_source != "teacher") fail("fgsm_source must be 'student' or 'teacher'");
    if (output_dir.empty()) fail("output_dir must not be empty");
    try {
      DistillConfig d = distill;
      d.validate();
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
};

inline void to_json(nlohmann::json& j, const DatasetSource& d) {
  j = {{"name", d.name}, {"kind", d.kind}};
  if (d.kind == "archive") {
    j["train_path"] = d.train_path;
    j["test_path"] = d.test_path;
  } else {
    j["train_per_class"] = d.train_per_class;
    j["test_per_class"] = d.test_per_class;
    j["cbf_length"] = d.cbf_length;
  }
}

inline void from_json(const nlohmann::json& j, DatasetSource& d) {
  detail::reject_unknown(j, {"name", "kind", "train_path", "test_path", "train_per_class", "test_per_class", "cbf_length"},
                         "dataset");
  const DatasetSource def;
  d.kind = j.value("kind", def.kind);
  d.name = j.value("name", d.kind == "cbf" ? def.name : std::string{});
  d.train_path = j.value("train_path", std::string{});
  d.test_path = j.value("test_path", std::string{});
  d.train_per_class = j.value("train_per_class", def.train_per_class);
  d.test_per_class = j.value("test_per_class", def.test_per_class);
  d.cbf_length = j.value("cbf_length", def.cbf_length);
}

inline void to_json(nlohmann::json& j, const Architecture& a) {
  j = {{"family", to_string(a.family)}, {"num_blocks", a.num_blocks}, {"width", a.width}};
  if (a.family == Family::kFcn) j["kernel_sizes"] = a.kernel_sizes.empty() ? fcn_default_kernels(a.num_blocks) : a.kernel_sizes;
}

inline void from_json(const nlohmann::json& j, Architecture& a) {
  detail::reject_unknown(j, {"family", "num_blocks", "width", "kernel_sizes"}, "architecture");
  a.family = family_from_string(j.value("family", std::string("FCN")));
  a.num_blocks = j.value("num_blocks", a.num_blocks);
  a.width = j.value("width", a.width);
  a.kernel_sizes = j.value("kernel_sizes", std::vector<std::size_t>{});
  if (a.family == Family::kFcn && a.kernel_sizes.empty()) a.kernel_sizes = fcn_default_kernels(a.num_blocks);
  if (a.family != Family::kFcn) a.kernel_sizes.clear();
}

inline void to_json(nlohmann::json& j, const StudentEntry& s) { j = {{"name", s.name}, {"arch", s.arch}}; }

inline void from_json(const nlohmann::json& j, StudentEntry& s) {
  detail::reject_unknown(j, {"name", "arch"}, "student");
  s.name = j.value("name", std::string("student"));
  s.arch = j.contains("arch") ? j.at("arch").get<Architecture>() : Architecture{};
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> objectives;
  for (auto o : c.objectives) objectives.push_back(to_string(o));
  nlohmann::json distill = c.distill;
  distill.erase("objective");
  distill.erase("seed");
  j = {{"name", c.name},
       {"seed", c.seed},
       {"datasets", c.datasets},
       {"series_length", c.series_length},
       {"val_fraction", c.val_fraction},
       {"teacher", c.teacher},
       {"num_teacher_seeds", c.num_teacher_seeds},
       {"students", c.students},
       {"distill", distill},
       {"objectives", objectives},
       {"beta_search", c.beta_search},
       {"seeds", c.seeds},
       {"metrics", c.metrics},
       {"fidelity_tau", c.fidelity_tau},
       {"occlusion_window", c.occlusion_window},
       {"occlusion_baseline", c.occlusion_baseline},
       {"ig_steps", c.ig_steps},
       {"export_instances", c.export_instances},
       {"ablation", {{"axis", c.ablation_axis.empty() ? nlohmann::json(nullptr) : nlohmann::json(c.ablation_axis)},
                     {"values", c.ablation_values}}},
       {"fgsm_source", c.fgsm_source},
       {"output_dir", c.output_dir}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  detail::reject_unknown(j,
                         {"name", "seed", "datasets", "series_length", "val_fraction", "teacher", "num_teacher_seeds",
                          "students", "distill", "objectives", "beta_search", "seeds", "metrics", "fidelity_tau",
                          "occlusion_window", "occlusion_baseline", "ig_steps", "export_instances", "ablation",
                          "fgsm_source", "output_dir"},
                         "config");
  const ExperimentConfig def;
  c.name = j.value("name", def.name);
  c.seed = j.value("seed", def.seed);
  c.datasets = j.contains("datasets") ? j.at("datasets").get<std::vector<DatasetSource>>() : def.datasets;
  c.series_length = j.value("series_length", def.series_length);
  c.val_fraction = j.value("val_fraction", def.val_fraction);
  c.teacher = def.teacher;
  if (j.contains("teacher")) {
    nlohmann::json t = nlohmann::json(def.teacher);
    t.erase("kernel_sizes");
    t.update(j.at("teacher"));
    c.teacher = t.get<Architecture>();
  }
  c.num_teacher_seeds = j.value("num_teacher_seeds", def.num_teacher_seeds);
  c.students = j.contains("students") ? j.at("students").get<std::vector<StudentEntry>>() : def.students;
  c.distill = j.contains("distill") ? j.at("distill").get<DistillConfig>() : def.distill;
  if (j.contains("distill") && (j.at("distill").contains("objective") || j.at("distill").contains("seed"))) {
    throw ConfigError("distill.objective and distill.seed are set per run; use 'objectives' and 'seeds'");
  }
  c.distill.objective = Objective::kTsd;
  c.distill.seed = 0;
  if (j.contains("objectives")) {
    c.objectives.clear();
    for (const auto& o : j.at("objectives")) c.objectives.push_back(objective_from_string(o.get<std::string>()));
  } else {
    c.objectives = def.objectives;
  }
  c.beta_search = j.value("beta_search", def.beta_search);
  c.seeds = j.value("seeds", def.seeds);
  c.metrics = j.value("metrics", def.metrics);
  c.fidelity_tau = j.contains("fidelity_tau") && !j.at("fidelity_tau").is_null() ? j.at("fidelity_tau").get<double>()
                                                                                 : c.distill.tau_kd;
  c.occlusion_window = j.value("occlusion_window", def.occlusion_window);
  c.occlusion_baseline = j.value("occlusion_baseline", def.occlusion_baseline);
  c.ig_steps = j.value("ig_steps", def.ig_steps);
  c.export_instances = j.value("export_instances", def.export_instances);
  if (j.contains("ablation") && !j.at("ablation").is_null()) {
    const auto& a = j.at("ablation");
    detail::reject_unknown(a, {"axis", "values"}, "ablation");
    c.ablation_axis = a.contains("axis") && !a.at("axis").is_null() ? a.at("axis").get<std::string>() : "";
    c.ablation_values = a.value("values", nlohmann::json::array());
  }
  c.fgsm_source = j.value("fgsm_source", def.fgsm_source);
  c.output_dir = j.value("output_dir", def.output_dir);
}

/// Parses and validates a config document; every failure is a ConfigError.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  try {
    c = nlohmann::json::parse(text).get<ExperimentConfig>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

inline std::string config_echo(const ExperimentConfig& c) { return nlohmann::json(c).dump(2) + '\n'; }

// ---------------------------------------------------------------------------
// Seeds: everything fans out of ExperimentConfig::seed.

inline std::uint64_t split_seed(const ExperimentConfig& c, const std::string& dataset) {
  return derive_seed(c.seed, {hash_name("split"), hash_name(dataset)});
}
inline std::uint64_t data_seed(const ExperimentConfig& c, const std::string& dataset, Split split) {
  return derive_seed(c.seed, {hash_name("data"), hash_name(dataset), static_cast<std::uint64_t>(split)});
}
inline std::uint64_t teacher_root_seed(const ExperimentConfig& c, const std::string& dataset) {
  return derive_seed(c.seed, {hash_name("teacher"), hash_name(dataset)});
}
inline std::uint64_t student_seed(const ExperimentConfig& c, std::uint64_t s) {
  return derive_seed(c.seed, {hash_name("student"), s});
}
inline std::uint64_t fraction_seed(const ExperimentConfig& c, const std::string& dataset) {
  return derive_seed(c.seed, {hash_name("fraction"), hash_name(dataset)});
}

// ---------------------------------------------------------------------------
// Data

struct PreparedData {
  std::string name;
  TimeSeriesDataset train, val, test;
  std::vector<std::string> warnings;
};

inline PreparedData load_data(const ExperimentConfig& c, const DatasetSource& src) {
  TimeSeriesDataset train, test;
  if (src.kind == "archive") {
    train = load_archive(src.train_path);
    test = load_archive(src.test_path);
    if (train.class_labels != test.class_labels) {
      throw std::runtime_error("dataset '" + src.name + "': train and test label sets differ");
    }
  } else {
    train = generate_cbf(src.train_per_class, src.cbf_length, data_seed(c, src.name, Split::kTrain));
    test = generate_cbf(src.test_per_class, src.cbf_length, data_seed(c, src.name, Split::kTest));
  }
  train.name = test.name = src.name;
  train = prepare(std::move(train), c.series_length);
  test = prepare(std::move(test), c.series_length);
  test.split = Split::kTest;
  auto sp = split_train_val(train, c.val_fraction, split_seed(c, src.name));
  return PreparedData{src.name, std::move(sp.train), std::move(sp.val), std::move(test), std::move(sp.warnings)};
}

inline std::vector<PreparedData> load_all_data(const ExperimentConfig& c) {
  std::vector<PreparedData> out;
  for (const auto& src : c.datasets) out.push_back(load_data(c, src));
  return out;
}

// ---------------------------------------------------------------------------
// Helpers

namespace detail {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Canonical decimal text for axis values and beta directory names.
inline std::string value_label(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  return format_double(v.get<double>());
}

inline std::string metrics_json(const std::map<std::string, double>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j.dump(2) + '\n';
}

/// Runs tasks on up to `jobs` threads; the first exception is rethrown.
inline void run_parallel(std::vector<std::function<void()>>& tasks, std::size_t jobs) {
  jobs = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  if (jobs == 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
        next = tasks.size();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < jobs; ++k) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

/// Inputs to the teacher; a changed fingerprint invalidates a saved teacher.
inline std::string teacher_fingerprint(const ExperimentConfig& c, const DatasetSource& src) {
  nlohmann::json j = {{"seed", c.seed},
                      {"dataset", src},
                      {"series_length", c.series_length},
                      {"val_fraction", c.val_fraction},
                      {"teacher", c.teacher},
                      {"num_teacher_seeds", c.num_teacher_seeds},
                      {"optimizer", c.distill.optimizer}};
  return detail::hex64(hash_name(j.dump()));
}

/// Method label used in score tables.
inline std::string method_name(const ExperimentConfig& c, const StudentEntry& s, Objective o) {
  return c.students.size() > 1 ? s.name + ":" + to_string(o) : to_string(o);
}

/// Keeps only the metrics listed in the config.
inline std::map<std::string, double> filter_metrics(const ExperimentConfig& c, const std::map<std::string, double>& m) {
  std::map<std::string, double> out;
  for (const auto& [k, v] : m)
    if (c.wants(k)) out[k] = v;
  return out;
}

inline std::string environment_json() {
  nlohmann::json j = {{"tool_version", kVersion},
                      {"compiler", __VERSION__},
                      {"cxx_standard", static_cast<long>(__cplusplus)},
                      {"build_type", TSD_BUILD_TYPE}};
  return j.dump(2) + '\n';
}

/// Progress sink; the CLI points this at stderr.
using Progress = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Commands

struct TeacherState {
  TrainedArtifact artifact;
  std::vector<ValScore> val_scores;
  std::size_t selected = 0;
};

inline std::filesystem::path teacher_dir(const std::filesystem::path& out, const std::string& dataset) {
  return out / dataset / "teacher";
}

/// Trains and persists the teacher for every dataset.
inline std::vector<TeacherState> cmd_train_teacher(const ExperimentConfig& c, const Progress& progress = {}) {
  c.validate();
  const auto data = load_all_data(c);
  const std::filesystem::path out(c.output_dir);
  std::vector<TeacherState> result;
  for (std::size_t d = 0; d < data.size(); ++d) {
    const auto& pd = data[d];
    for (const auto& w : pd.warnings)
      if (progress) progress(pd.name + ": " + w);
    const ModelSpec spec = c.teacher.to_spec(pd.train.num_classes, c.series_length);
    DistillConfig dc = c.distill;
    dc.objective = Objective::kBase;
    dc.seed = teacher_root_seed(c, pd.name);
    auto sel = train_teacher(spec, pd.train, pd.val, dc, c.num_teacher_seeds);
    const auto dir = teacher_dir(out, pd.name);
    for (std::size_t k = 0; k < sel.logs.size(); ++k) {
      write_file_atomic(dir / ("seed_" + std::to_string(k) + ".log.tsv"), serialize_log(sel.logs[k]));
    }
    save_checkpoint(sel.best.model, (dir / "checkpoint.json").string());
    const auto probs = class_probabilities(sel.best.model, pd.test);
    const auto test_metrics = generalization_metrics(probs, pd.train.num_classes, pd.test.labels());
    write_file_atomic(dir / "metrics.json", detail::metrics_json(test_metrics));
    nlohmann::json record = {{"fingerprint", teacher_fingerprint(c, c.datasets[d])},
                             {"selected", sel.selected},
                             {"seeds", sel.seeds},
                             {"best_epoch", sel.best.best_epoch},
                             {"parameter_count", parameter_count(sel.best.model.params)}};
    for (const auto& v : sel.val_scores) {
      record["val_auc_prc"].push_back(v.auc_prc);
      record["val_loss"].push_back(v.loss);
    }
    write_file_atomic(dir / "selection.json", record.dump(2) + '\n');
    if (progress) {
      progress(pd.name + ": teacher seed " + std::to_string(sel.selected) + " selected, test auc_prc " +
               format_double(test_metrics.at("auc_prc")));
    }
    result.push_back({std::move(sel.best), std::move(sel.val_scores), sel.selected});
  }
  write_file_atomic(out / "config.json", config_echo(c));
  return result;
}

/// Loads a saved teacher, refusing one trained under different settings.
inline Model load_teacher(const ExperimentConfig& c, const DatasetSource& src) {
  const auto dir = teacher_dir(c.output_dir, src.name);
  if (!std::filesystem::exists(dir / "checkpoint.json") || !std::filesystem::exists(dir / "selection.json")) {
    throw IncompleteRunError("no teacher for dataset '" + src.name + "'; run train-teacher first",
                             {(dir / "checkpoint.json").string(), (dir / "selection.json").string()});
  }
  const auto record = nlohmann::json::parse(read_file(dir / "selection.json"));
  if (record.value("fingerprint", std::string{}) != teacher_fingerprint(c, src)) {
    throw std::runtime_error("teacher for dataset '" + src.name +
                             "' was trained with different settings; rerun train-teacher");
  }
  return load_checkpoint((dir / "checkpoint.json").string());
}

/// Shared, lazily built teacher saliency caches keyed by their settings.
class CachePool {
 public:
  TeacherSaliencyCache* get(const Model& teacher, const TimeSeriesDataset& train, const DistillConfig& cfg) {
    if (cfg.objective != Objective::kTsd) return nullptr;
    const auto key = std::make_tuple(&teacher, &train, cfg.num_subsequences, cfg.width, cfg.tau_saliency, cfg.variant);
    std::lock_guard<std::mutex> lock(mu_);
    auto& slot = caches_[key];
    if (!slot) {
      slot = std::make_unique<TeacherSaliencyCache>(
          teacher, train, make_grid(train.series_length, cfg.num_subsequences, cfg.width), cfg.tau_saliency, cfg.variant);
    }
    return slot.get();
  }

 private:
  using Key = std::tuple<const Model*, const TimeSeriesDataset*, std::size_t, std::size_t, double, SaliencyVariant>;
  std::mutex mu_;
  std::map<Key, std::unique_ptr<TeacherSaliencyCache>> caches_;
};

/// One student training job and where its outputs go.
struct StudentJob {
  const PreparedData* data = nullptr;
  const TrainedArtifact* teacher = nullptr;
  const TeacherReference* reference = nullptr;
  const StudentEntry* student = nullptr;
  DistillConfig cfg;
  const TimeSeriesDataset* train = nullptr;  // may be a reduced copy of data->train
  std::filesystem::path dir;
  std::string method;
  std::uint64_t seed_label = 0;
  bool beta_search = false;
};

struct StudentResult {
  TrainedArtifact artifact;
  std::map<std::string, double> metrics;
  std::optional<double> chosen_beta;
};

inline StudentResult run_student(const ExperimentConfig& c, const StudentJob& job, CachePool& caches) {
  const ModelSpec spec = job.student->arch.to_spec(job.data->train.num_classes, c.series_length);
  const AttributionOptions ao = c.attribution();
  TeacherSaliencyCache* cache = caches.get(job.teacher->model, *job.train, job.cfg);
  StudentResult res;
  if (job.beta_search && job.cfg.objective != Objective::kBase) {
    auto search = grid_search_beta(*job.teacher, spec, *job.train, job.data->val, job.cfg, cache);
    std::string table = "beta\tval_auc_prc\tval_loss\tbest_epoch\tselected\n";
    for (std::size_t k = 0; k < search.betas.size(); ++k) {
      const bool chosen = search.betas[k] == search.best_beta;
      table += format_double(search.betas[k]) + '\t' + format_double(search.val_scores[k].auc_prc) + '\t' +
               format_double(search.val_scores[k].loss) + '\t' + std::to_string(search.best_epochs[k]) + '\t' +
               (chosen ? "1" : "0") + '\n';
      const auto sub = job.dir / ("beta_" + format_double(search.betas[k]));
      write_file_atomic(sub / "log.tsv", serialize_log(search.logs[k]));
      write_file_atomic(sub / "metrics.json",
                        detail::metrics_json(filter_metrics(
                            c, evaluate_student(search.models[k], job.data->test, *job.reference, c.fidelity_tau, ao))));
    }
    write_file_atomic(job.dir / "beta_search.tsv", table);
    res.artifact = std::move(search.best);
    res.chosen_beta = search.best_beta;
  } else {
    res.artifact = distill(*job.teacher, spec, *job.train, job.data->val, job.cfg, cache);
  }
  res.metrics = filter_metrics(c, evaluate_student(res.artifact.model, job.data->test, *job.reference, c.fidelity_tau, ao));
  save_checkpoint(res.artifact.model, (job.dir / "checkpoint.json").string());
  write_file_atomic(job.dir / "log.tsv", serialize_log(res.artifact.history));
  write_file_atomic(job.dir / "metrics.json", detail::metrics_json(res.metrics));
  if (ao.occlusion && c.export_instances > 0) {
    std::vector<std::vector<double>> maps;
    for (std::size_t i = 0; i < std::min(c.export_instances, job.data->test.size()); ++i) {
      maps.push_back(occlusion_map(res.artifact.model, job.data->test.instances[i].values, c.occlusion_window,
                                   c.occlusion_baseline, job.reference->predictions[i]));
    }
    write_file_atomic(job.dir / "maps.csv", serialize_maps(maps));
  }
  return res;
}

/// Teacher model, its artifact wrapper and test-set reference per dataset.
struct TeacherBundle {
  TrainedArtifact artifact;
  TeacherReference reference;
};

inline std::vector<std::unique_ptr<TeacherBundle>> load_teachers(const ExperimentConfig& c,
                                                                  const std::vector<PreparedData>& data,
                                                                  bool with_maps) {
  std::vector<std::unique_ptr<TeacherBundle>> out;
  AttributionOptions ao = c.attribution();
  if (!with_maps) ao.occlusion = ao.gradient = ao.integrated_gradients = false;
  for (std::size_t d = 0; d < data.size(); ++d) {
    auto b = std::make_unique<TeacherBundle>();
    b->artifact.model = load_teacher(c, c.datasets[d]);
    detail::check_compatible(b->artifact.model.spec, data[d].test, "teacher vs test split");
    b->reference = make_teacher_reference(b->artifact.model, data[d].test, ao);
    out.push_back(std::move(b));
  }
  return out;
}

inline void export_teacher_maps(const ExperimentConfig& c, const PreparedData& pd, const TeacherBundle& b) {
  if (!c.wants("occlusion_mse") || c.export_instances == 0) return;
  const auto n = std::min(c.export_instances, b.reference.maps.occlusion.size());
  std::vector<std::vector<double>> maps(b.reference.maps.occlusion.begin(),
                                        b.reference.maps.occlusion.begin() + static_cast<std::ptrdiff_t>(n));
  write_file_atomic(teacher_dir(c.output_dir, pd.name) / "maps.csv", serialize_maps(maps));
}

/// One student per (dataset, student, objective, seed); merges rows into scores.tsv.
inline ScoreTable cmd_distill(const ExperimentConfig& c, std::size_t jobs = 1, const Progress& progress = {}) {
  c.validate();
  const auto data = load_all_data(c);
  const auto teachers = load_teachers(c, data, true);
  const std::filesystem::path out(c.output_dir);
  for (std::size_t d = 0; d < data.size(); ++d) export_teacher_maps(c, data[d], *teachers[d]);

  std::vector<StudentJob> list;
  for (std::size_t d = 0; d < data.size(); ++d)
    for (const auto& st : c.students)
      for (Objective o : c.objectives)
        for (std::uint64_t s : c.seeds) {
          StudentJob job;
          job.data = &data[d];
          job.teacher = &teachers[d]->artifact;
          job.reference = &teachers[d]->reference;
          job.student = &st;
          job.cfg = c.distill;
          job.cfg.objective = o;
          job.cfg.seed = student_seed(c, s);
          job.train = &data[d].train;
          job.dir = out / data[d].name / st.name / to_string(o) / ("seed_" + std::to_string(s));
          job.method = method_name(c, st, o);
          job.seed_label = s;
          job.beta_search = c.beta_search;
          list.push_back(job);
        }

  CachePool caches;
  std::vector<StudentResult> results(list.size());
  std::vector<std::function<void()>> tasks;
  std::mutex log_mu;
  for (std::size_t i = 0; i < list.size(); ++i) {
    tasks.emplace_back([&, i] {
      results[i] = run_student(c, list[i], caches);
      if (progress) {
        std::lock_guard<std::mutex> lock(log_mu);
        const auto it = results[i].metrics.find("auc_prc");
        progress(list[i].data->name + " " + list[i].method + " seed " + std::to_string(list[i].seed_label) + ": " +
                 std::to_string(results[i].artifact.history.size()) + " epochs" +
                 (it != results[i].metrics.end() ? ", test auc_prc " + format_double(it->second) : ""));
      }
    });
  }
  detail::run_parallel(tasks, jobs);

  ScoreTable table;
  if (std::filesystem::exists(out / "scores.tsv")) table = ScoreTable::parse(read_file(out / "scores.tsv"));
  for (std::size_t i = 0; i < list.size(); ++i) {
    for (const auto& [k, v] : results[i].metrics) table.set(list[i].method, list[i].data->name, list[i].seed_label, k, v);
    if (results[i].chosen_beta) table.set(list[i].method, list[i].data->name, list[i].seed_label, "beta", *results[i].chosen_beta);
  }
  write_file_atomic(out / "scores.tsv", table.serialize());
  write_file_atomic(out / "config.json", config_echo(c));
  return table;
}

/// Long-format sweep rows keyed by axis value.
struct SweepTable {
  std::string axis;
  // (value label, method, dataset, seed) -> metric -> value
  std::map<std::tuple<std::string, std::string, std::string, std::uint64_t>, std::map<std::string, double>> rows;
  std::vector<std::string> value_order;

  std::string serialize() const {
    std::string s = "axis\tvalue\tmethod\tdataset\tseed\tmetric\tscore\n";
    for (const auto& v : value_order)
      for (const auto& [k, m] : rows) {
        if (std::get<0>(k) != v) continue;
        for (const auto& [metric, x] : m) {
          s += axis + '\t' + v + '\t' + std::get<1>(k) + '\t' + std::get<2>(k) + '\t' + std::to_string(std::get<3>(k)) +
               '\t' + metric + '\t' + format_double(x) + '\n';
        }
      }
    return s;
  }

  /// Seed means per (value, method, dataset, metric).
  std::string summary() const {
    std::map<std::tuple<std::string, std::string, std::string>, std::map<std::string, std::pair<double, std::size_t>>> acc;
    for (const auto& [k, m] : rows)
      for (const auto& [metric, x] : m) {
        auto& a = acc[{std::get<0>(k), std::get<1>(k), std::get<2>(k)}][metric];
        a.first += x;
        a.second += 1;
      }
    std::string s = "axis\tvalue\tmethod\tdataset\tmetric\tmean\n";
    for (const auto& v : value_order)
      for (const auto& [k, m] : acc) {
        if (std::get<0>(k) != v) continue;
        for (const auto& [metric, a] : m) {
          s += axis + '\t' + v + '\t' + std::get<1>(k) + '\t' + std::get<2>(k) + '\t' + metric + '\t' +
               format_double(a.first / static_cast<double>(a.second)) + '\n';
        }
      }
    return s;
  }
};

/// Copy of the distillation settings with one axis value applied.
inline DistillConfig apply_axis(DistillConfig cfg, const std::string& axis, const nlohmann::json& v) {
  auto number = [&] {
    if (!v.is_number()) throw ConfigError("ablation value for '" + axis + "' must be a number");
    return v.get<double>();
  };
  auto count = [&] {
    const double x = number();
    if (x < 1 || x != static_cast<double>(static_cast<std::size_t>(x))) {
      throw ConfigError("ablation value for '" + axis + "' must be a positive integer");
    }
    return static_cast<std::size_t>(x);
  };
  if (axis == "tau") {
    cfg.tau_saliency = number();
  } else if (axis == "width") {
    cfg.width = count();
  } else if (axis == "num_subsequences") {
    cfg.num_subsequences = count();
  } else if (axis == "variant") {
    if (!v.is_string()) throw ConfigError("ablation value for 'variant' must be a string");
    try {
      cfg.variant = variant_from_string(v.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else if (axis == "train_fraction") {
    const double f = number();
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("train_fraction values must be in (0, 1]");
  } else if (axis == "fgsm_epsilon") {
    if (number() < 0.0) throw ConfigError("fgsm_epsilon values must be >= 0");
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

/// One distillation per axis value with shared seeds and teacher. For
/// fgsm_epsilon the students are trained once and evaluated per epsilon.
inline SweepTable cmd_ablate(const ExperimentConfig& c, std::string axis = {}, std::size_t jobs = 1,
                             const Progress& progress = {}) {
  c.validate();
  if (axis.empty()) axis = c.ablation_axis;
  if (axis.empty()) throw ConfigError("no ablation axis given (config 'ablation.axis' or --axis)");
  if (std::find(ablation_axes().begin(), ablation_axes().end(), axis) == ablation_axes().end()) {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  if (c.ablation_values.empty()) throw ConfigError("ablation.values is empty");
  std::vector<DistillConfig> point_cfgs;
  std::vector<std::string> labels;
  for (const auto& v : c.ablation_values) {
    point_cfgs.push_back(apply_axis(c.distill, axis, v));
    labels.push_back(detail::value_label(v));
    if (std::count(labels.begin(), labels.end(), labels.back()) > 1) throw ConfigError("duplicate ablation value");
  }

  const auto data = load_all_data(c);
  const bool fgsm = axis == "fgsm_epsilon";
  const auto teachers = load_teachers(c, data, !fgsm);
  const std::filesystem::path root = std::filesystem::path(c.output_dir) / "ablation" / axis;

  // Reduced training splits for train_fraction, one per (value, dataset).
  std::vector<std::vector<TimeSeriesDataset>> reduced(labels.size());
  for (std::size_t p = 0; p < labels.size(); ++p)
    for (const auto& pd : data) {
      reduced[p].push_back(axis == "train_fraction"
                               ? reduce_fraction(pd.train, c.ablation_values[p].get<double>(), fraction_seed(c, pd.name))
                               : TimeSeriesDataset{});
    }

  const std::size_t points = fgsm ? 1 : labels.size();
  std::vector<StudentJob> list;
  std::vector<std::size_t> point_of;
  for (std::size_t p = 0; p < points; ++p)
    for (std::size_t d = 0; d < data.size(); ++d)
      for (const auto& st : c.students)
        for (Objective o : c.objectives)
          for (std::uint64_t s : c.seeds) {
            StudentJob job;
            job.data = &data[d];
            job.teacher = &teachers[d]->artifact;
            job.reference = &teachers[d]->reference;
            job.student = &st;
            job.cfg = fgsm ? c.distill : point_cfgs[p];
            job.cfg.objective = o;
            job.cfg.seed = student_seed(c, s);
            job.train = axis == "train_fraction" ? &reduced[p][d] : &data[d].train;
            job.dir = root / (fgsm ? std::string("trained") : labels[p]) / data[d].name / st.name / to_string(o) /
                      ("seed_" + std::to_string(s));
            job.method = method_name(c, st, o);
            job.seed_label = s;
            job.beta_search = c.beta_search;
            list.push_back(job);
            point_of.push_back(p);
          }

  ExperimentConfig eval_cfg = c;
  if (fgsm) {
    std::erase_if(eval_cfg.metrics, [](const std::string& m) { return m.ends_with("_mse"); });
  }
  CachePool caches;
  std::vector<StudentResult> results(list.size());
  std::vector<std::function<void()>> tasks;
  std::mutex log_mu;
  for (std::size_t i = 0; i < list.size(); ++i) {
    tasks.emplace_back([&, i] {
      results[i] = run_student(eval_cfg, list[i], caches);
      if (progress) {
        std::lock_guard<std::mutex> lock(log_mu);
        progress(axis + "=" + (fgsm ? std::string("*") : labels[point_of[i]]) + " " + list[i].data->name + " " +
                 list[i].method + " seed " + std::to_string(list[i].seed_label) + " done");
      }
    });
  }
  detail::run_parallel(tasks, jobs);

  SweepTable sweep;
  sweep.axis = axis;
  sweep.value_order = labels;
  if (!fgsm) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      sweep.rows[{labels[point_of[i]], list[i].method, list[i].data->name, list[i].seed_label}] = results[i].metrics;
    }
  } else {
    // Teacher-sourced noise is shared, student-sourced noise is per student.
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const double eps = c.ablation_values[p].get<double>();
      std::vector<TimeSeriesDataset> teacher_noise;
      for (std::size_t d = 0; d < data.size(); ++d) {
        teacher_noise.push_back(c.fgsm_source == "teacher" ? fgsm_dataset(teachers[d]->artifact.model, data[d].test, eps)
                                                           : TimeSeriesDataset{});
      }
      for (std::size_t i = 0; i < list.size(); ++i) {
        const std::size_t d = static_cast<std::size_t>(list[i].data - data.data());
        const auto& model = results[i].artifact.model;
        const TimeSeriesDataset noisy =
            c.fgsm_source == "teacher" ? teacher_noise[d] : fgsm_dataset(model, data[d].test, eps);
        TeacherReference ref;
        ref.logits = dataset_logits(teachers[d]->artifact.model, noisy);
        ref.predictions = argmax_rows(ref.logits, model.spec.num_classes);
        AttributionOptions none;
        none.occlusion = false;
        sweep.rows[{labels[p], list[i].method, list[i].data->name, list[i].seed_label}] =
            filter_metrics(eval_cfg, evaluate_student(model, noisy, ref, c.fidelity_tau, none));
      }
    }
  }
  write_file_atomic(root / "sweep.tsv", sweep.serialize());
  write_file_atomic(root / "summary.tsv", sweep.summary());
  write_file_atomic(std::filesystem::path(c.output_dir) / "config.json", config_echo(c));
  return sweep;
}

// ---------------------------------------------------------------------------
// Report

/// Files and cells a completed distill run must contain.
inline std::vector<std::string> missing_pieces(const std::filesystem::path& run_dir) {
  std::vector<std::string> missing;
  if (!std::filesystem::exists(run_dir / "config.json")) missing.push_back((run_dir / "config.json").string());
  if (!std::filesystem::exists(run_dir / "scores.tsv")) missing.push_back((run_dir / "scores.tsv").string());
  if (!missing.empty()) return missing;
  const auto c = parse_config(read_file(run_dir / "config.json"));
  const auto table = ScoreTable::parse(read_file(run_dir / "scores.tsv"));
  for (const auto& d : c.datasets) {
    const auto sel = run_dir / d.name / "teacher" / "selection.json";
    if (!std::filesystem::exists(sel)) missing.push_back(sel.string());
    for (const auto& st : c.students)
      for (Objective o : c.objectives)
        for (std::uint64_t s : c.seeds)
          for (const auto& m : c.metrics) {
            const auto& e = table.entries();
            auto it = e.find({method_name(c, st, o), d.name, s});
            if (it == e.end() || !it->second.count(m)) {
              missing.push_back("score " + method_name(c, st, o) + "/" + d.name + "/seed " + std::to_string(s) + "/" + m);
            }
          }
  }
  return missing;
}

namespace detail {

inline bool higher_is_better(const std::string& metric) {
  return metric == "auc_prc" || metric == "auc_roc" || metric == "accuracy" || metric == "top1_agreement";
}

inline std::string rank_tsv(const RankResult& r) {
  std::string s = "method\tavg_rank\twins\tlosses\n";
  for (const auto& [m, v] : r.per_method) {
    s += m + '\t' + format_double(v.avg_rank) + '\t' + std::to_string(v.wins) + '\t' + std::to_string(v.losses) + '\n';
  }
  return s;
}

inline std::vector<std::vector<double>> parse_maps(const std::string& text) {
  std::vector<std::vector<double>> maps;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    std::vector<double> row;
    while (std::getline(ls, field, ',')) row.push_back(std::stod(field));
    maps.push_back(std::move(row));
  }
  return maps;
}

}  // namespace detail

/// Renders tables from a completed run into <run_dir>/report. Output depends
/// only on the run directory contents.
inline std::vector<std::string> cmd_report(const std::filesystem::path& run_dir) {
  if (!std::filesystem::is_directory(run_dir)) {
    throw IncompleteRunError("run directory " + run_dir.string() + " does not exist",
                             {(run_dir / "config.json").string(), (run_dir / "scores.tsv").string()});
  }
  const auto missing = missing_pieces(run_dir);
  if (!missing.empty()) throw IncompleteRunError("run in " + run_dir.string() + " is incomplete", missing);

  const auto c = parse_config(read_file(run_dir / "config.json"));
  const auto table = ScoreTable::parse(read_file(run_dir / "scores.tsv"));
  const auto dir = run_dir / "report";
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& content) {
    write_file_atomic(dir / name, content);
    written.push_back((dir / name).string());
  };

  nlohmann::json summary = {{"config", nlohmann::json::parse(read_file(run_dir / "config.json"))},
                            {"environment", nlohmann::json::parse(environment_json())},
                            {"fidelity_tau", c.fidelity_tau},
                            {"preprocessing", "linear resampling, then z-normalization"}};
  for (const auto& metric : table.metrics()) {
    emit("pivot_" + metric + ".tsv", table.pivot(metric));
    for (const auto& d : table.datasets())
      for (const auto& m : table.methods())
        if (table.has(m, d, metric)) summary["means"][metric][d][m] = table.seed_mean(m, d, metric);
  }
  for (const auto& metric : c.metrics) {
    if (!detail::higher_is_better(metric)) continue;
    const auto ranks = rank_and_wins(table, metric);
    emit("ranks_" + metric + ".tsv", detail::rank_tsv(ranks));
    for (const auto& [m, v] : ranks.per_method) {
      summary["ranks"][metric][m] = {{"avg_rank", v.avg_rank}, {"wins", v.wins}, {"losses", v.losses}};
    }
  }
  std::string fidelity = "dataset\tmethod\ttop1_agreement\tpredictive_kl\ttau\n";
  std::string sal = "dataset\tmethod\tmetric\tmean\n";
  for (const auto& d : table.datasets())
    for (const auto& m : table.methods()) {
      if (table.has(m, d, "top1_agreement") || table.has(m, d, "predictive_kl")) {
        auto cell = [&](const char* k) { return table.has(m, d, k) ? format_double(table.seed_mean(m, d, k)) : "NA"; };
        fidelity += d + '\t' + m + '\t' + cell("top1_agreement") + '\t' + cell("predictive_kl") + '\t' +
                    format_double(c.fidelity_tau) + '\n';
      }
      for (const char* k : {"occlusion_mse", "gradient_mse", "ig_mse"})
        if (table.has(m, d, k)) sal += d + '\t' + m + '\t' + k + '\t' + format_double(table.seed_mean(m, d, k)) + '\n';
    }
  emit("fidelity.tsv", fidelity);
  emit("saliency_mse.tsv", sal);

  // Per-instance occlusion maps, long format for plotting.
  for (const auto& d : c.datasets) {
    std::string maps = "source\tseed\tinstance\tt\tvalue\n";
    bool any = false;
    auto add = [&](const std::string& source, const std::string& seed, const std::filesystem::path& file) {
      if (!std::filesystem::exists(file)) return;
      any = true;
      const auto rows = detail::parse_maps(read_file(file));
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t t = 0; t < rows[i].size(); ++t) {
          maps += source + '\t' + seed + '\t' + std::to_string(i) + '\t' + std::to_string(t) + '\t' +
                  format_double(rows[i][t]) + '\n';
        }
    };
    add("teacher", "NA", run_dir / d.name / "teacher" / "maps.csv");
    for (const auto& st : c.students)
      for (Objective o : c.objectives)
        for (std::uint64_t s : c.seeds) {
          add(method_name(c, st, o), std::to_string(s),
              run_dir / d.name / st.name / to_string(o) / ("seed_" + std::to_string(s)) / "maps.csv");
        }
    if (any) emit("saliency_maps_" + d.name + ".tsv", maps);
  }

  const auto ablation_root = run_dir / "ablation";
  if (std::filesystem::is_directory(ablation_root)) {
    std::vector<std::string> axes;
    for (const auto& e : std::filesystem::directory_iterator(ablation_root))
      if (std::filesystem::exists(e.path() / "summary.tsv")) axes.push_back(e.path().filename().string());
    std::sort(axes.begin(), axes.end());
    for (const auto& a : axes) {
      emit("ablation_" + a + ".tsv", read_file(ablation_root / a / "summary.tsv"));
      summary["ablations"].push_back(a);
    }
  }
  emit("summary.json", summary.dump(2) + '\n');
  return written;
}

}  // namespace tsd
