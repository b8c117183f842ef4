// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradient_cases.hpp"
#include "support.hpp"
#include "tsd/experiment.hpp"

namespace fs = std::filesystem;
using namespace tsd;
using namespace tsd::testing;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

void note(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

std::vector<std::vector<std::string>> tsv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(read_file(p));
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, '\t')) f.push_back(field);
    rows.push_back(std::move(f));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Verdict criterion_gradients() {
  constexpr int kDraws = 50;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst_primitive = 0.0, worst_composed = 0.0;
  std::size_t cases = 0, checked = 0, skipped = 0;
  std::string failures;
  for (const auto& c : gradient_cases()) {
    ++cases;
    std::size_t case_checked = 0, case_skipped = 0;
    for (int d = 0; d < kDraws; ++d) {
      const GradCheck r = c.run(rng);
      case_checked += r.checked;
      case_skipped += r.skipped;
      double& worst = c.composed ? worst_composed : worst_primitive;
      worst = std::max(worst, r.max_rel_error);
      if (r.max_rel_error >= (c.composed ? 1e-3 : 1e-4)) failures += " " + c.name + "(" + r.worst + ")";
    }
    // Elements straddling a ReLU kink have no derivative to compare.
    if (case_checked == 0 || case_skipped * 100 > case_checked + case_skipped) failures += " " + c.name + "(kinks)";
    checked += case_checked;
    skipped += case_skipped;
  }
  const double secs = seconds_since(t0);
  if (secs >= 60.0) failures += " runtime";
  return {failures.empty(), std::to_string(cases) + " cases x " + std::to_string(kDraws) + " draws, " +
                                std::to_string(checked) + " elements (" + std::to_string(skipped) +
                                " at kinks), max rel err primitive " + fmt(worst_primitive) + " < 1e-4, composed " +
                                fmt(worst_composed) + " < 1e-3, " + fmt(secs, 3) + " s" +
                                (failures.empty() ? "" : "; failing:" + failures)};
}

// ---------------------------------------------------------------------------
// 2. Saliency invariants

Model random_model(std::mt19937_64& rng, std::size_t classes, std::size_t len) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  ModelSpec spec;
  switch (pick(0, 2)) {
    case 0: spec = ModelSpec::linear(classes, len); break;
    case 1: spec = ModelSpec::fcn(pick(1, 3), pick(1, 4), classes, len); break;
    default: spec = ModelSpec::lstm(pick(1, 2), pick(1, 4), classes, len); break;
  }
  Model m = make_model(spec, rng());
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& [_, p] : m.params.tensors)
    for (auto& x : p.values) x += n(rng);
  return m;
}

Verdict criterion_saliency() {
  constexpr int kDraws = 200;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  const SaliencyVariant variants[] = {SaliencyVariant::kWhole, SaliencyVariant::kBinary, SaliencyVariant::kTargetScalar};
  double max_self = 0.0, min_score = 0.0, max_shift = 0.0, max_hot = 0.0;
  std::size_t profiles = 0;
  for (int d = 0; d < kDraws; ++d) {
    const std::size_t classes = pick(2, 4), len = pick(8, 24);
    const Model m = random_model(rng, classes, len);
    Model shifted = m;
    const double c = std::uniform_real_distribution<double>(-50.0, 50.0)(rng);
    for (auto& b : shifted.params.at("head.bias").values) b += c;
    const std::size_t width = pick(1, len);
    const auto grid = make_grid(len, pick(1, len - width + 1), width);
    const Instance x{random_vector(rng, len, -3.0, 3.0), pick(0, classes - 1)};
    const Instance bg{random_vector(rng, len, -3.0, 3.0), 0};
    const double tau = std::exp(std::uniform_real_distribution<double>(std::log(0.5), std::log(16.0))(rng));
    for (auto v : variants) {
      ++profiles;
      for (double s : temporal_saliency(m, x, x, grid, tau, v).scores) max_self = std::max(max_self, std::fabs(s));
      const auto p = temporal_saliency(m, x, bg, grid, tau, v);
      const auto q = temporal_saliency(shifted, x, bg, grid, tau, v);
      for (std::size_t k = 0; k < grid.size(); ++k) {
        if (v != SaliencyVariant::kTargetScalar) min_score = std::min(min_score, p.scores[k]);
        max_shift = std::max(max_shift, std::fabs(p.scores[k] - q.scores[k]));
      }
      if (v != SaliencyVariant::kTargetScalar) {
        for (double s : temporal_saliency(m, x, bg, grid, 1e6, v).scores) max_hot = std::max(max_hot, s);
      }
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = max_self == 0.0 && min_score >= 0.0 && max_shift <= 1e-9 && max_hot < 1e-6 && secs < 60.0;
  return {pass, std::to_string(kDraws) + " draws (" + std::to_string(profiles) + " profiles): self-background max |S| " +
                    fmt(max_self) + " (= 0), min WHOLE/BINARY score " + fmt(min_score) + " (>= 0), shift drift " +
                    fmt(max_shift) + " <= 1e-9, max score at tau=1e6 " + fmt(max_hot) + " < 1e-6, " + fmt(secs, 3) +
                    " s"};
}

// ---------------------------------------------------------------------------
// 3. TSD-loss scale invariance

Verdict criterion_scale_invariance() {
  constexpr int kDraws = 1000;
  std::mt19937_64 rng(303);
  double worst = 0.0;
  for (int d = 0; d < kDraws; ++d) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 60)(rng);
    const double scale = std::exp(std::uniform_real_distribution<double>(std::log(1e-4), std::log(1e2))(rng));
    SaliencyProfile s;
    s.scores = random_vector(rng, n, 0.0, scale);
    s.mean = arithmetic_mean(s.scores);
    for (double k : {0.01, 1.0, 37.0}) {
      SaliencyProfile ks = s;
      for (auto& v : ks.scores) v *= k;
      ks.mean = arithmetic_mean(ks.scores);
      worst = std::max(worst, tsd_loss(s, ks));
    }
  }
  return {worst < 1e-12, std::to_string(kDraws) + " random profiles x k in {0.01, 1, 37}: max tsd_loss " + fmt(worst) +
                             " < 1e-12"};
}

// ---------------------------------------------------------------------------
// 4. Metric oracles

Verdict criterion_metric_oracles() {
  constexpr int kCases = 1000;
  std::mt19937_64 rng(404);
  std::size_t ap_mismatch = 0, roc_mismatch = 0, ties = 0;
  for (int d = 0; d < kCases; ++d) {
    std::vector<double> scores;
    std::vector<bool> positive;
    random_binary_case(rng, 20, scores, positive);
    if (std::set<double>(scores.begin(), scores.end()).size() < scores.size()) ++ties;
    if (average_precision(scores, positive) != average_precision_oracle(scores, positive)) ++ap_mismatch;
    if (roc_auc_binary(scores, positive) != roc_auc_oracle(scores, positive)) ++roc_mismatch;
  }
  return {ap_mismatch == 0 && roc_mismatch == 0,
          std::to_string(kCases) + " random binary cases of <= 20 points (" + std::to_string(ties) +
              " with tied scores): AP mismatches " + std::to_string(ap_mismatch) + ", ROC mismatches " +
              std::to_string(roc_mismatch) + " (exact equality)"};
}

// ---------------------------------------------------------------------------
// 5. Attribution exactness

Verdict criterion_attribution() {
  std::mt19937_64 rng(505);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  double grad_err = 0.0, ig_err = 0.0;
  constexpr int kLinear = 200;
  for (int d = 0; d < kLinear; ++d) {
    const std::size_t classes = pick(2, 4), len = pick(2, 40);
    const Model m = linear_model(classes, len, random_vector(rng, classes * len, -2.0, 2.0),
                                 random_vector(rng, classes, -1.0, 1.0));
    const auto x = random_vector(rng, len, -3.0, 3.0), base = random_vector(rng, len, -3.0, 3.0);
    const std::size_t c = predicted_class(m, x);
    const auto& w = m.params.at("head.weight").values;
    const auto g = gradient_saliency(m, x);
    const std::size_t steps = std::vector<std::size_t>{1, 7, 64}[pick(0, 2)];
    const auto ig = integrated_gradients(m, x, base, steps);
    for (std::size_t t = 0; t < len; ++t) {
      grad_err = std::max(grad_err, std::fabs(g[t] - std::fabs(w[c * len + t])));
      ig_err = std::max(ig_err, std::fabs(ig[t] - (x[t] - base[t]) * w[c * len + t]));
    }
  }

  // Completeness on the criterion-6 student architecture.
  const auto test = prepare(generate_cbf(20, 100, 5), 100);
  const std::vector<double> zero(100, 0.0);
  double gap = 0.0;
  std::size_t explained = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Model m = make_model(ModelSpec::fcn(2, 4, 3, 100), seed);
    for (std::size_t i = 0; i < test.size(); i += 3) {
      const auto& x = test.instances[i].values;
      const std::size_t c = predicted_class(m, x);
      const auto ig = integrated_gradients(m, x, zero, 64, c);
      double total = 0.0;
      for (double v : ig) total += v;
      const double diff = predict_logits(m, x, 1)[c] - predict_logits(m, zero, 1)[c];
      gap = std::max(gap, std::fabs(total - diff));
      ++explained;
    }
  }
  return {grad_err <= 1e-10 && ig_err <= 1e-10 && gap < 1e-3,
          std::to_string(kLinear) + " linear models: max |grad - |w|| " + fmt(grad_err) + ", max |IG - (x-b)w| " +
              fmt(ig_err) + " (<= 1e-10); FCN(2,4) IG completeness gap over " + std::to_string(explained) +
              " instances at 64 steps " + fmt(gap) + " < 1e-3"};
}

// ---------------------------------------------------------------------------
// CLI helpers

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(TSD_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return files;
}

// ---------------------------------------------------------------------------
// 10. Determinism

Verdict criterion_determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  auto config = [](const fs::path& out) {
    return json{{"name", "determinism"},
                {"seed", 11},
                {"datasets", {{{"name", "CBF"}, {"kind", "cbf"}, {"train_per_class", 10}, {"test_per_class", 20}}}},
                {"teacher", {{"num_blocks", 2}, {"width", 8}}},
                {"num_teacher_seeds", 2},
                {"distill",
                 {{"beta_grid", {0.5, 10.0}}, {"num_subsequences", 10}, {"optimizer", {{"max_epochs", 40}, {"patience", 10}}}}},
                {"beta_search", true},
                {"seeds", {0, 1}},
                {"metrics", {"auc_prc", "auc_roc", "accuracy", "top1_agreement", "predictive_kl", "occlusion_mse",
                             "gradient_mse", "ig_mse"}},
                {"ig_steps", 16},
                {"ablation", {{"axis", "tau"}, {"values", {1, 8}}}},
                {"output_dir", out.string()}};
  };
  std::string failures;
  std::vector<fs::path> runs;
  for (const char* name : {"a", "b"}) {
    const fs::path out = work / name;
    fs::remove_all(out);
    const fs::path cfg = work / (std::string(name) + ".json");
    write_file_atomic(cfg, config(out).dump(2));
    const std::string jobs = std::string(name) == "a" ? "1" : "3";
    for (const std::string verb : {"train-teacher", "distill", "ablate"}) {
      if (run_cli(verb + " -q --jobs " + jobs + " --config " + cfg.string(), work / "cli.log") != 0) {
        failures += " " + verb + " exited nonzero (" + read_file(work / "cli.log") + ")";
      }
    }
    if (run_cli("report -q --out " + out.string(), work / "cli.log") != 0) failures += " report exited nonzero";
    runs.push_back(out);
  }
  if (!failures.empty()) return {false, failures};

  const auto a = snapshot(runs[0]), b = snapshot(runs[1]);
  std::size_t checkpoints = 0, metric_values = 0;
  std::string differing;
  double max_metric_diff = 0.0;
  for (const auto& [path, content] : a) {
    const auto it = b.find(path);
    if (it == b.end()) {
      failures += " missing " + path;
      continue;
    }
    if (path.ends_with("checkpoint.json")) {
      ++checkpoints;
      if (content != it->second) failures += " checkpoint differs: " + path;
    } else if (path.ends_with("metrics.json")) {
      const auto ja = json::parse(content), jb = json::parse(it->second);
      for (const auto& [k, v] : ja.items()) {
        ++metric_values;
        max_metric_diff = std::max(max_metric_diff, std::fabs(v.get<double>() - jb.at(k).get<double>()));
      }
    }
    if (content != it->second) {
      differing += (differing.empty() ? "" : ", ") + path;
      if (path != "config.json" && path != "report/summary.json") failures += " differs: " + path;
    }
  }
  if (a.size() != b.size()) failures += " file sets differ";
  const auto ta = ScoreTable::parse(read_file(runs[0] / "scores.tsv"));
  const auto tb = ScoreTable::parse(read_file(runs[1] / "scores.tsv"));
  for (const auto& [key, m] : ta.entries())
    for (const auto& [metric, v] : m) {
      ++metric_values;
      max_metric_diff = std::max(max_metric_diff, std::fabs(v - tb.entries().at(key).at(metric)));
    }
  const auto ra = tsv_rows(runs[0] / "ablation" / "tau" / "sweep.tsv");
  const auto rb = tsv_rows(runs[1] / "ablation" / "tau" / "sweep.tsv");
  if (ra.size() != rb.size()) failures += " sweep sizes differ";
  for (std::size_t i = 0; i < std::min(ra.size(), rb.size()); ++i) {
    ++metric_values;
    max_metric_diff = std::max(max_metric_diff, std::fabs(std::stod(ra[i][6]) - std::stod(rb[i][6])));
  }
  if (max_metric_diff > 1e-12) failures += " metric drift";
  if (checkpoints < 10) failures += " too few checkpoints";
  return {failures.empty(), "train-teacher, distill (beta search), ablate, report run twice (--jobs 1 vs 3): " +
                                std::to_string(checkpoints) + " checkpoints bitwise identical, " +
                                std::to_string(metric_values) + " metric values max diff " + fmt(max_metric_diff) +
                                " <= 1e-12, " + std::to_string(a.size()) + " files compared, differing only in [" + differing +
                                "] which record the output directory, " + fmt(seconds_since(t0), 3) + " s" +
                                (failures.empty() ? "" : ";" + failures)};
}

// ---------------------------------------------------------------------------
// 6-9, 11. Desk-scale CBF experiment

struct Experiment {
  ExperimentConfig config;
  ScoreTable scores;
  SweepTable variant_sweep;
  double seconds = 0.0;
};

Experiment run_experiment(const fs::path& out) {
  Experiment e;
  ExperimentConfig& c = e.config;
  c.name = "cbf-desk-scale";
  c.seed = 0;
  c.datasets = {DatasetSource{}};  // CBF, 10 train and 300 test per class, T = 100
  c.teacher = Architecture{Family::kFcn, 3, 32, {}};
  c.num_teacher_seeds = 5;
  c.students = {StudentEntry{"student", Architecture{Family::kFcn, 2, 4, {}}}};
  c.objectives = {Objective::kBase, Objective::kBaseKd, Objective::kTsd};
  c.distill.variant = SaliencyVariant::kWhole;
  c.beta_search = true;
  c.seeds = {0, 1, 2, 3, 4};
  c.output_dir = out.string();
  c.validate();
  fs::remove_all(out);

  const auto t0 = Clock::now();
  const Progress progress = [&](const std::string& m) { note("[" + fmt(seconds_since(t0), 4) + " s] " + m); };
  cmd_train_teacher(c, progress);
  e.scores = cmd_distill(c, 1, progress);
  ExperimentConfig ablation = c;
  ablation.objectives = {Objective::kTsd};
  ablation.ablation_axis = "variant";
  ablation.ablation_values = json::array({"TARGET_SCALAR"});
  e.variant_sweep = cmd_ablate(ablation, "variant", 1, progress);
  // Keep the echo describing the main distillation run.
  write_file_atomic(out / "config.json", config_echo(c));
  e.seconds = seconds_since(t0);
  return e;
}

double mean(const Experiment& e, const std::string& method, const std::string& metric) {
  return e.scores.seed_mean(method, "CBF", metric);
}

double sweep_mean(const SweepTable& s, const std::string& value, const std::string& method, const std::string& metric) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [k, m] : s.rows)
    if (std::get<0>(k) == value && std::get<1>(k) == method) {
      sum += m.at(metric);
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::nan("");
}

std::string beta_summary(const Experiment& e, const std::string& method) {
  std::string s;
  for (std::uint64_t seed : e.config.seeds) {
    s += (s.empty() ? "" : ",") + format_double(e.scores.entries().at({method, "CBF", seed}).at("beta"));
  }
  return s;
}

Verdict criterion_generalization(const Experiment& e) {
  const double base = mean(e, "BASE", "auc_prc"), kd = mean(e, "BASE_KD", "auc_prc"), tsd = mean(e, "TSD", "auc_prc");
  return {tsd >= base + 0.02 && tsd >= kd - 0.01,
          "5-seed mean test AUC-PRC: TSD " + fmt(tsd) + ", BASE " + fmt(base) + ", BASE_KD " + fmt(kd) +
              "; need TSD >= BASE + 0.02 (" + fmt(base + 0.02) + ") and TSD >= BASE_KD - 0.01 (" + fmt(kd - 0.01) +
              "); chosen beta KD [" + beta_summary(e, "BASE_KD") + "] TSD [" + beta_summary(e, "TSD") + "]; run " +
              fmt(e.seconds / 60.0, 3) + " min (target 15)"};
}

Verdict criterion_fidelity(const Experiment& e) {
  const double agree_tsd = mean(e, "TSD", "top1_agreement"), agree_base = mean(e, "BASE", "top1_agreement");
  const double kl_tsd = mean(e, "TSD", "predictive_kl"), kl_kd = mean(e, "BASE_KD", "predictive_kl");
  return {agree_tsd >= agree_base && kl_tsd <= kl_kd + 0.05,
          "top-1 agreement TSD " + fmt(agree_tsd) + " vs BASE " + fmt(agree_base) + "; predictive KL TSD " + fmt(kl_tsd) +
              " vs BASE_KD " + fmt(kl_kd) + " + 0.05 (tau " + fmt(e.config.fidelity_tau) + ")"};
}

Verdict criterion_interpretability(const Experiment& e) {
  const double tsd = mean(e, "TSD", "occlusion_mse"), kd = mean(e, "BASE_KD", "occlusion_mse");
  return {tsd <= kd, "occlusion saliency MSE to teacher: TSD " + fmt(tsd) + " <= BASE_KD " + fmt(kd) + " (BASE " +
                         fmt(mean(e, "BASE", "occlusion_mse")) + ")"};
}

Verdict criterion_variant(const Experiment& e) {
  const double whole = mean(e, "TSD", "auc_prc");
  const double scalar = sweep_mean(e.variant_sweep, "TARGET_SCALAR", "TSD", "auc_prc");
  return {whole >= scalar, "5-seed mean test AUC-PRC: WHOLE " + fmt(whole) + " >= TARGET_SCALAR " + fmt(scalar)};
}

/// Index of the best row by (higher val AUC-PRC, lower val loss), first wins ties.
std::size_t best_row(const std::vector<std::vector<std::string>>& log) {
  std::vector<ValScore> v;
  for (const auto& r : log) v.push_back({std::stod(r[5]), std::stod(r[6])});
  return select_best(v);
}

Verdict criterion_protocol(const Experiment& e, const fs::path& out) {
  const auto& opt = e.config.distill.optimizer;
  std::string failures;
  std::size_t logs = 0, past_decays = 0, max_epochs_hit = 0, searches = 0;

  auto check_log = [&](const fs::path& p, std::optional<std::size_t> recorded_best) {
    const auto log = tsv_rows(p);
    ++logs;
    for (std::size_t i = 0; i < log.size(); ++i) {
      const std::size_t epoch = std::stoul(log[i][0]);
      std::size_t halvings = 0;
      for (std::size_t d : {25u, 30u, 35u}) halvings += epoch >= d ? 1 : 0;
      if (epoch != i || std::stod(log[i][1]) != 0.01 * std::pow(0.5, static_cast<double>(halvings))) {
        failures += " lr@" + p.string() + ":" + log[i][0];
        break;
      }
    }
    if (log.size() > 35) ++past_decays;
    const std::size_t best = best_row(log);
    if (recorded_best && *recorded_best != best) failures += " best_epoch@" + p.string();
    if (log.size() == opt.max_epochs) {
      ++max_epochs_hit;
    } else if (log.size() != best + opt.patience + 1) {
      failures += " stop@" + p.string();
    }
  };

  const auto tdir = out / "CBF" / "teacher";
  const auto sel = json::parse(read_file(tdir / "selection.json"));
  std::vector<ValScore> teacher_scores;
  for (std::size_t k = 0; k < sel["val_auc_prc"].size(); ++k) {
    teacher_scores.push_back({sel["val_auc_prc"][k].get<double>(), sel["val_loss"][k].get<double>()});
  }
  const std::size_t selected = sel["selected"].get<std::size_t>();
  double max_auc = 0.0;
  for (const auto& s : teacher_scores) max_auc = std::max(max_auc, s.auc_prc);
  if (teacher_scores.size() != 5 || selected != select_best(teacher_scores) || teacher_scores[selected].auc_prc != max_auc) {
    failures += " teacher selection";
  }
  for (std::size_t k = 0; k < teacher_scores.size(); ++k) {
    const auto p = tdir / ("seed_" + std::to_string(k) + ".log.tsv");
    check_log(p, k == selected ? std::optional<std::size_t>(sel["best_epoch"].get<std::size_t>()) : std::nullopt);
  }

  std::vector<fs::path> student_dirs;
  for (const char* o : {"BASE", "BASE_KD", "TSD"})
    for (std::uint64_t s : e.config.seeds) student_dirs.push_back(out / "CBF" / "student" / o / ("seed_" + std::to_string(s)));
  for (std::uint64_t s : e.config.seeds) {
    student_dirs.push_back(out / "ablation" / "variant" / "TARGET_SCALAR" / "CBF" / "student" / "TSD" /
                           ("seed_" + std::to_string(s)));
  }
  for (const auto& dir : student_dirs) {
    check_log(dir / "log.tsv", std::nullopt);
    if (!fs::exists(dir / "beta_search.tsv")) continue;
    ++searches;
    const auto rows = tsv_rows(dir / "beta_search.tsv");
    std::vector<double> betas;
    std::vector<ValScore> scores;
    std::size_t chosen = rows.size();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      betas.push_back(std::stod(rows[k][0]));
      scores.push_back({std::stod(rows[k][1]), std::stod(rows[k][2])});
      if (rows[k][4] == "1") chosen = k;
      check_log(dir / ("beta_" + rows[k][0]) / "log.tsv", std::stoul(rows[k][3]));
    }
    if (betas != default_beta_grid()) failures += " beta grid@" + dir.string();
    if (chosen != select_best(scores)) failures += " beta choice@" + dir.string();
  }
  if (searches != 15) failures += " expected 15 beta searches, found " + std::to_string(searches);
  if (past_decays == 0) failures += " no log reaches the decay epochs";
  return {failures.empty(),
          std::to_string(logs) + " training logs: lr 0.01 halved exactly at epochs 25/30/35 (" +
              std::to_string(past_decays) + " logs run past epoch 35), stop at best_epoch + " +
              std::to_string(opt.patience) + " (" + std::to_string(max_epochs_hit) + " hit the " +
              std::to_string(opt.max_epochs) + "-epoch cap); " + std::to_string(searches) +
              " beta searches over {0.1, 0.5, 1, 10, 100, 200}; teacher seed " + std::to_string(selected) +
              " of 5 selected by val AUC-PRC " + fmt(max_auc) + (failures.empty() ? "" : ";" + failures)};
}

}  // namespace

int main() {
  std::cout << "tsd acceptance suite " << kVersion << std::endl;
  const fs::path work = fs::current_path() / "acceptance_work";
  fs::create_directories(work);
  std::size_t failed = 0;
  auto report = [&](int id, const std::string& title, const std::function<Verdict()>& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& ex) {
      v = {false, std::string("exception: ") + ex.what()};
    }
    if (!v.pass) ++failed;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  C" << id << " " << title << ": " << v.detail << std::endl;
  };

  report(1, "gradient suite", criterion_gradients);
  report(2, "saliency invariants", criterion_saliency);
  report(3, "tsd_loss scale invariance", criterion_scale_invariance);
  report(4, "metric oracles", criterion_metric_oracles);
  report(5, "attribution exactness", criterion_attribution);
  report(10, "determinism", [&] { return criterion_determinism(work / "determinism"); });

  std::optional<Experiment> exp;
  std::string exp_error;
  const fs::path exp_dir = work / "cbf";
  try {
    exp = run_experiment(exp_dir);
  } catch (const std::exception& ex) {
    exp_error = ex.what();
  }
  auto with_exp = [&](const std::function<Verdict(const Experiment&)>& fn) {
    return [&, fn] { return exp ? fn(*exp) : Verdict{false, "experiment failed: " + exp_error}; };
  };
  report(6, "CBF generalization", with_exp(criterion_generalization));
  report(7, "CBF fidelity", with_exp(criterion_fidelity));
  report(8, "CBF interpretability transfer", with_exp(criterion_interpretability));
  report(9, "CBF variant ablation", with_exp(criterion_variant));
  report(11, "protocol conformance", with_exp([&](const Experiment& e) { return criterion_protocol(e, exp_dir); }));

  std::cout << (failed == 0 ? "ALL PASS" : std::to_string(failed) + " of 11 criteria FAILED") << std::endl;
  return failed == 0 ? 0 : 1;
}
