#pragma once

// Training protocol: cross-entropy baselines, vanilla logit distillation and
// temporal saliency distillation, with Adam, step decay and early stopping
// on validation AUC-PRC.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsd/data.hpp"
#include "tsd/metrics.hpp"
#include "tsd/models.hpp"
#include "tsd/optim.hpp"
#include "tsd/rng.hpp"
#include "tsd/saliency.hpp"

namespace tsd {

/// Floor on the per-instance mean saliency used for normalization.
inline constexpr double kSaliencyMeanFloor = 1e-8;

inline const std::vector<double>& default_beta_grid() {
  static const std::vector<double> grid{0.1, 0.5, 1.0, 10.0, 100.0, 200.0};
  return grid;
}

enum class Objective { kBase, kBaseKd, kTsd };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kBase: return "BASE";
    case Objective::kBaseKd: return "BASE_KD";
    case Objective::kTsd: return "TSD";
  }
  return "?";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "BASE") return Objective::kBase;
  if (s == "BASE_KD") return Objective::kBaseKd;
  if (s == "TSD") return Objective::kTsd;
  throw std::invalid_argument("unknown objective '" + s + "' (expected BASE, BASE_KD or TSD)");
}

struct DistillConfig {
  double alpha = 1.0;
  double beta = 1.0;
  std::vector<double> beta_grid = default_beta_grid();
  double tau_saliency = 8.0;
  double tau_kd = 4.0;
  std::size_t num_subsequences = 50;
  std::size_t width = 5;
  SaliencyVariant variant = SaliencyVariant::kWhole;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  Objective objective = Objective::kTsd;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid distill config: " + m); };
    if (alpha < 0.0) fail("alpha must be >= 0");
    if (beta < 0.0) fail("beta must be >= 0");
    for (double b : beta_grid)
      if (b < 0.0) fail("beta_grid entries must be >= 0");
    if (!(tau_saliency > 0.0) || !(tau_kd > 0.0)) fail("temperatures must be > 0");
    if (num_subsequences < 1 || width < 1) fail("grid parameters must be positive");
    if (optimizer.patience > optimizer.max_epochs) fail("patience must not exceed max_epochs");
    if (optimizer.batch_size < 1 || optimizer.max_epochs < 1) fail("batch_size and max_epochs must be positive");
    if (!(optimizer.initial_lr > 0.0)) fail("initial_lr must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& o) {
  j = {{"initial_lr", o.initial_lr}, {"decay_factor", o.decay_factor}, {"decay_epochs", o.decay_epochs},
       {"batch_size", o.batch_size}, {"max_epochs", o.max_epochs},     {"patience", o.patience},
       {"beta1", o.beta1},           {"beta2", o.beta2},                {"eps", o.eps}};
}

namespace detail {
inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw std::invalid_argument("unknown key '" + k + "' in " + where);
    }
  }
}
}  // namespace detail

inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
  detail::reject_unknown(j,
                         {"initial_lr", "decay_factor", "decay_epochs", "batch_size", "max_epochs", "patience",
                          "beta1", "beta2", "eps"},
                         "optimizer");
  OptimizerConfig d;
  o.initial_lr = j.value("initial_lr", d.initial_lr);
  o.decay_factor = j.value("decay_factor", d.decay_factor);
  o.decay_epochs = j.value("decay_epochs", d.decay_epochs);
  o.batch_size = j.value("batch_size", d.batch_size);
  o.max_epochs = j.value("max_epochs", d.max_epochs);
  o.patience = j.value("patience", d.patience);
  o.beta1 = j.value("beta1", d.beta1);
  o.beta2 = j.value("beta2", d.beta2);
  o.eps = j.value("eps", d.eps);
}

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"beta_grid", c.beta_grid},
       {"tau_saliency", c.tau_saliency},
       {"tau_kd", c.tau_kd},
       {"num_subsequences", c.num_subsequences},
       {"width", c.width},
       {"variant", to_string(c.variant)},
       {"optimizer", c.optimizer},
       {"seed", c.seed},
       {"objective", to_string(c.objective)}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  detail::reject_unknown(j,
                         {"alpha", "beta", "beta_grid", "tau_saliency", "tau_kd", "num_subsequences", "width",
                          "variant", "optimizer", "seed", "objective"},
                         "distill");
  DistillConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.beta_grid = j.value("beta_grid", d.beta_grid);
  c.tau_saliency = j.value("tau_saliency", d.tau_saliency);
  c.tau_kd = j.value("tau_kd", d.tau_kd);
  c.num_subsequences = j.value("num_subsequences", d.num_subsequences);
  c.width = j.value("width", d.width);
  c.variant = variant_from_string(j.value("variant", to_string(d.variant)));
  c.optimizer = j.contains("optimizer") ? j.at("optimizer").get<OptimizerConfig>() : d.optimizer;
  c.seed = j.value("seed", d.seed);
  c.objective = objective_from_string(j.value("objective", to_string(d.objective)));
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double ce = 0.0;
  double kd = 0.0;
  double val_auc_prc = 0.0;
  double val_loss = 0.0;  // cross-entropy on the validation split
};

/// Validation score used for snapshot and model selection: higher AUC-PRC
/// wins, equal AUC-PRC falls back to lower validation cross-entropy.
struct ValScore {
  double auc_prc = -1.0;
  double loss = std::numeric_limits<double>::infinity();

  bool better_than(const ValScore& o) const { return auc_prc > o.auc_prc || (auc_prc == o.auc_prc && loss < o.loss); }
};

struct TrainedArtifact {
  Model model;
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  double best_val_auc_prc = 0.0;
  double best_val_loss = 0.0;
  DistillConfig config;

  ValScore val_score() const { return {best_val_auc_prc, best_val_loss}; }
};

inline std::string serialize_log(const std::vector<EpochLog>& history) {
  std::string out = "epoch\tlr\ttrain_loss\tce\tkd\tval_auc_prc\tval_loss\n";
  for (const auto& e : history) {
    out += std::to_string(e.epoch) + '\t' + format_double(e.lr) + '\t' + format_double(e.train_loss) + '\t' +
           format_double(e.ce) + '\t' + format_double(e.kd) + '\t' + format_double(e.val_auc_prc) + '\t' +
           format_double(e.val_loss) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

inline double total_loss(double ce, double kd, double alpha, double beta) { return alpha * ce + beta * kd; }

inline Var total_loss(const Var& ce, const Var& kd, double alpha, double beta) {
  return add(scale(ce, alpha), scale(kd, beta));
}

/// Profile divided by its mean, the mean floored at kSaliencyMeanFloor.
inline std::vector<double> normalized_scores(const SaliencyProfile& p) {
  const double mu = std::max(p.mean, kSaliencyMeanFloor);
  std::vector<double> out(p.scores.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p.scores[i] / mu;
  return out;
}

/// Smooth-L1 between mean-normalized student and teacher profiles.
inline double tsd_loss(const SaliencyProfile& teacher, const SaliencyProfile& student) {
  if (teacher.scores.size() != student.scores.size()) throw DimensionError("tsd_loss: grid mismatch", 0);
  if (teacher.variant != student.variant) throw std::invalid_argument("tsd_loss: saliency variants differ");
  return smooth_l1(normalized_scores(student), normalized_scores(teacher));
}

/// Differentiable form: student scores [B,G] on the tape, teacher normalized
/// scores as constants. Mean over instances of the per-instance loss.
inline Var tsd_loss(const Var& student_scores, const std::vector<double>& teacher_normalized) {
  Tape& t = *student_scores.tape();
  const Shape s = student_scores.shape();
  if (s.size() != 2 || teacher_normalized.size() != s[0] * s[1]) throw DimensionError("tsd_loss: grid mismatch", 1);
  Var mu = clamp_min(mean_rows(student_scores), kSaliencyMeanFloor);
  Var normalized = div_rows(student_scores, mu);
  return smooth_l1(normalized, t.constant(s, teacher_normalized));
}

/// tau^2 * mean_rows KL(P_tau(teacher) || P_tau(student)).
inline double base_kd_loss(const std::vector<double>& teacher_logits, const std::vector<double>& student_logits,
                           std::size_t num_classes, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("base_kd_loss: tau must be > 0");
  if (teacher_logits.size() != student_logits.size()) throw DimensionError("base_kd_loss: shape mismatch", 0);
  return tau * tau *
         predictive_kl(softened_rows(teacher_logits, num_classes, tau),
                       softened_rows(student_logits, num_classes, tau), num_classes);
}

inline Var base_kd_loss(const std::vector<double>& teacher_logits, const Var& student_logits, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("base_kd_loss: tau must be > 0");
  Tape& t = *student_logits.tape();
  const Shape s = student_logits.shape();
  if (teacher_logits.size() != student_logits.size()) throw DimensionError("base_kd_loss: shape mismatch", 0);
  Var pt = t.constant(s, softened_rows(teacher_logits, s[1], tau));
  return scale(mean(kl_rows(pt, softmax_rows(student_logits, tau))), tau * tau);
}

// ---------------------------------------------------------------------------
// Teacher saliency cache

/// Teacher profiles keyed by (train instance, background instance). The
/// teacher is frozen, so a pair's profile never changes across epochs.
class TeacherSaliencyCache {
 public:
  TeacherSaliencyCache(const Model& teacher, const TimeSeriesDataset& train, SubsequenceGrid grid, double tau,
                       SaliencyVariant variant)
      : teacher_(&teacher), train_(&train), grid_(std::move(grid)), tau_(tau), variant_(variant) {}

  /// Mean-normalized teacher scores for each (instance, background) pair, concatenated.
  std::vector<double> normalized(const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    std::vector<std::pair<std::size_t, std::size_t>> missing;
    {
      std::lock_guard lock(mu_);
      for (const auto& p : pairs)
        if (!cache_.count(p) && std::find(missing.begin(), missing.end(), p) == missing.end()) missing.push_back(p);
    }
    if (!missing.empty()) {
      std::vector<const std::vector<double>*> xs, bgs;
      std::vector<std::size_t> targets;
      for (const auto& [i, b] : missing) {
        xs.push_back(&train_->instances[i].values);
        bgs.push_back(&train_->instances[b].values);
        targets.push_back(train_->instances[i].label);
      }
      auto profiles = temporal_saliency_batch(*teacher_, xs, bgs, targets, grid_, tau_, variant_);
      std::lock_guard lock(mu_);
      for (std::size_t k = 0; k < missing.size(); ++k) cache_.emplace(missing[k], normalized_scores(profiles[k]));
    }
    std::vector<double> out;
    out.reserve(pairs.size() * grid_.size());
    std::lock_guard lock(mu_);
    for (const auto& p : pairs) {
      const auto& v = cache_.at(p);
      out.insert(out.end(), v.begin(), v.end());
    }
    return out;
  }

  bool matches(const Model* teacher, const TimeSeriesDataset* train, const SubsequenceGrid& grid, double tau,
               SaliencyVariant variant) const {
    return teacher == teacher_ && train == train_ && grid == grid_ && tau == tau_ && variant == variant_;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return cache_.size();
  }

 private:
  const Model* teacher_;
  const TimeSeriesDataset* train_;
  SubsequenceGrid grid_;
  double tau_;
  SaliencyVariant variant_;
  mutable std::mutex mu_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> cache_;
};

// ---------------------------------------------------------------------------
// Training

inline std::vector<double> class_probabilities(const Model& model, const TimeSeriesDataset& ds,
                                               std::size_t chunk = 256) {
  std::vector<double> probs;
  probs.reserve(ds.size() * model.spec.num_classes);
  const auto all = ds.all_indices();
  for (std::size_t begin = 0; begin < all.size(); begin += chunk) {
    const std::vector<std::size_t> idx(all.begin() + static_cast<std::ptrdiff_t>(begin),
                                       all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), begin + chunk)));
    auto logits = predict_logits(model, ds.flat(idx), idx.size());
    auto p = softened_rows(logits, model.spec.num_classes, 1.0);
    probs.insert(probs.end(), p.begin(), p.end());
  }
  return probs;
}

inline std::vector<double> dataset_logits(const Model& model, const TimeSeriesDataset& ds, std::size_t chunk = 256) {
  std::vector<double> out;
  out.reserve(ds.size() * model.spec.num_classes);
  const auto all = ds.all_indices();
  for (std::size_t begin = 0; begin < all.size(); begin += chunk) {
    const std::vector<std::size_t> idx(all.begin() + static_cast<std::ptrdiff_t>(begin),
                                       all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), begin + chunk)));
    auto logits = predict_logits(model, ds.flat(idx), idx.size());
    out.insert(out.end(), logits.begin(), logits.end());
  }
  return out;
}

inline double validation_auc_prc(const Model& model, const TimeSeriesDataset& val) {
  return auc_prc(class_probabilities(model, val), model.spec.num_classes, val.labels());
}

/// AUC-PRC and mean cross-entropy on a validation split.
inline ValScore validation_score(const Model& model, const TimeSeriesDataset& val) {
  const std::size_t classes = model.spec.num_classes;
  const auto probs = class_probabilities(model, val);
  const auto labels = val.labels();
  double ce = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) ce -= std::log(std::max(probs[i * classes + labels[i]], kKlFloor));
  return {auc_prc(probs, classes, labels), ce / static_cast<double>(labels.size())};
}

/// Per-epoch observer, e.g. for progress output.
using EpochCallback = std::function<void(const EpochLog&)>;

struct TrainContext {
  const Model* teacher = nullptr;
  TeacherSaliencyCache* cache = nullptr;
  EpochCallback on_epoch;
};

namespace detail {

inline void check_compatible(const ModelSpec& spec, const TimeSeriesDataset& ds, const char* what) {
  if (ds.series_length != spec.input_length) {
    throw DimensionError(std::string(what) + ": series length " + std::to_string(ds.series_length) +
                             " != model input length " + std::to_string(spec.input_length),
                         2);
  }
  if (ds.num_classes != spec.num_classes) {
    throw DimensionError(std::string(what) + ": dataset has " + std::to_string(ds.num_classes) +
                             " classes, model expects " + std::to_string(spec.num_classes),
                         1);
  }
}

}  // namespace detail

/// One training run of `spec` under `cfg`. The teacher is required for
/// BASE_KD and TSD objectives and is never modified.
inline TrainedArtifact train_run(const ModelSpec& spec, const TimeSeriesDataset& train, const TimeSeriesDataset& val,
                                 const DistillConfig& cfg, const TrainContext& ctx = {}) {
  cfg.validate();
  spec.validate();
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("training requires non-empty train and val splits");
  detail::check_compatible(spec, train, "train split");
  detail::check_compatible(spec, val, "val split");
  const bool use_teacher = cfg.objective != Objective::kBase;
  if (use_teacher) {
    if (ctx.teacher == nullptr) throw std::invalid_argument(to_string(cfg.objective) + " requires a teacher");
    if (ctx.teacher->spec.input_length != spec.input_length ||
        ctx.teacher->spec.input_channels != spec.input_channels ||
        ctx.teacher->spec.num_classes != spec.num_classes) {
      throw DimensionError("teacher and student input/output shapes differ", 2);
    }
  }

  SubsequenceGrid grid;
  std::unique_ptr<TeacherSaliencyCache> own_cache;
  TeacherSaliencyCache* cache = nullptr;
  if (cfg.objective == Objective::kTsd) {
    if (cfg.width > spec.input_length) {
      throw std::invalid_argument("TSD subsequence width exceeds series length");
    }
    grid = make_grid(spec.input_length, cfg.num_subsequences, cfg.width);
    if (ctx.cache != nullptr && ctx.cache->matches(ctx.teacher, &train, grid, cfg.tau_saliency, cfg.variant)) {
      cache = ctx.cache;
    } else {
      own_cache = std::make_unique<TeacherSaliencyCache>(*ctx.teacher, train, grid, cfg.tau_saliency, cfg.variant);
      cache = own_cache.get();
    }
  }

  std::vector<double> teacher_logits;
  if (cfg.objective == Objective::kBaseKd) teacher_logits = dataset_logits(*ctx.teacher, train);

  TrainedArtifact art;
  art.config = cfg;
  art.model = make_model(spec, derive_seed(cfg.seed, {hash_name("init")}));
  art.model.params.set_requires_grad(true);
  Model best = art.model;
  Adam adam(cfg.optimizer);
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {hash_name("shuffle")}));
  const BackgroundSelector selector(train, derive_seed(cfg.seed, {hash_name("background")}));
  const std::size_t classes = spec.num_classes;
  const std::size_t len = spec.input_length;
  const std::size_t ch = spec.input_channels;

  std::vector<std::size_t> order = train.all_indices();
  ValScore best_val;
  for (std::size_t epoch = 0; epoch < cfg.optimizer.max_epochs; ++epoch) {
    const double lr = learning_rate_at(cfg.optimizer, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum_loss = 0.0, sum_ce = 0.0, sum_kd = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.optimizer.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.optimizer.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      const std::size_t bsz = idx.size();
      std::vector<std::size_t> labels(bsz);
      for (std::size_t k = 0; k < bsz; ++k) labels[k] = train.instances[idx[k]].label;

      Tape tape;
      Var ce, kd;
      if (cfg.objective == Objective::kTsd) {
        std::vector<std::pair<std::size_t, std::size_t>> pairs(bsz);
        std::vector<double> rows;
        rows.reserve(bsz * (grid.size() + 1) * len);
        for (std::size_t k = 0; k < bsz; ++k) {
          const std::size_t b = selector.select(epoch, idx[k], labels[k]);
          pairs[k] = {idx[k], b};
          append_perturbation_rows(rows, train.instances[idx[k]].values, train.instances[b].values, grid);
        }
        const auto teacher_norm = cache->normalized(pairs);
        Var x = tape.constant(Shape{bsz * (grid.size() + 1), ch, len}, std::move(rows));
        Var logits = forward(tape, art.model, x);
        std::vector<std::size_t> orig(bsz);
        for (std::size_t k = 0; k < bsz; ++k) orig[k] = k * (grid.size() + 1);
        ce = cross_entropy(select_rows(logits, orig), labels);
        Var scores = saliency_from_logits(logits, bsz, grid.size(), labels, cfg.tau_saliency, cfg.variant);
        kd = tsd_loss(scores, teacher_norm);
      } else {
        Var x = tape.constant(Shape{bsz, ch, len}, train.flat(idx));
        Var logits = forward(tape, art.model, x);
        ce = cross_entropy(logits, labels);
        if (cfg.objective == Objective::kBaseKd) {
          std::vector<double> tl;
          tl.reserve(bsz * classes);
          for (std::size_t i : idx)
            tl.insert(tl.end(), teacher_logits.begin() + static_cast<std::ptrdiff_t>(i * classes),
                      teacher_logits.begin() + static_cast<std::ptrdiff_t>((i + 1) * classes));
          kd = base_kd_loss(tl, logits, cfg.tau_kd);
        }
      }
      Var loss = kd.tape() != nullptr ? total_loss(ce, kd, cfg.alpha, cfg.beta) : scale(ce, cfg.alpha);
      tape.backward(loss);
      adam.step(art.model.params, lr);
      const double w = static_cast<double>(bsz);
      sum_loss += w * loss.item();
      sum_ce += w * ce.item();
      sum_kd += kd.tape() != nullptr ? w * kd.item() : 0.0;
    }
    const double n = static_cast<double>(order.size());
    const ValScore vs = validation_score(art.model, val);
    EpochLog log{epoch, lr, sum_loss / n, sum_ce / n, sum_kd / n, vs.auc_prc, vs.loss};
    art.history.push_back(log);
    if (ctx.on_epoch) ctx.on_epoch(log);
    if (vs.better_than(best_val)) {
      best_val = vs;
      art.best_epoch = epoch;
      best = art.model;
    }
    if (epoch - art.best_epoch >= cfg.optimizer.patience) break;
  }
  art.best_val_auc_prc = best_val.auc_prc;
  art.best_val_loss = best_val.loss;
  art.model = std::move(best);
  art.model.params.set_requires_grad(false);
  return art;
}

/// Index of the best score; the first one wins exact ties.
inline std::size_t select_best(const std::vector<ValScore>& scores) {
  if (scores.empty()) throw std::invalid_argument("select_best: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i].better_than(scores[best])) best = i;
  return best;
}

struct TeacherSelection {
  TrainedArtifact best;
  std::vector<ValScore> val_scores;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<EpochLog>> logs;
  std::size_t selected = 0;
};

/// Seed for the k-th teacher initialization under a root seed.
inline std::uint64_t teacher_seed(std::uint64_t root, std::size_t k) {
  return derive_seed(root, {hash_name("teacher"), k});
}

/// Trains `num_seeds` cross-entropy runs and keeps the best by validation score.
inline TeacherSelection train_teacher(const ModelSpec& spec, const TimeSeriesDataset& train,
                                      const TimeSeriesDataset& val, const DistillConfig& config,
                                      std::size_t num_seeds = 5, const EpochCallback& on_epoch = {}) {
  if (num_seeds < 1) throw std::invalid_argument("train_teacher: num_seeds must be >= 1");
  TeacherSelection sel;
  std::vector<TrainedArtifact> runs;
  for (std::size_t k = 0; k < num_seeds; ++k) {
    DistillConfig cfg = config;
    cfg.objective = Objective::kBase;
    cfg.seed = teacher_seed(config.seed, k);
    TrainContext ctx;
    ctx.on_epoch = on_epoch;
    runs.push_back(train_run(spec, train, val, cfg, ctx));
    sel.val_scores.push_back(runs.back().val_score());
    sel.seeds.push_back(cfg.seed);
    sel.logs.push_back(runs.back().history);
  }
  sel.selected = select_best(sel.val_scores);
  sel.best = std::move(runs[sel.selected]);
  return sel;
}

/// Trains a student against a frozen teacher under `config.objective`.
inline TrainedArtifact distill(const TrainedArtifact& teacher, const ModelSpec& student_spec,
                               const TimeSeriesDataset& train, const TimeSeriesDataset& val,
                               const DistillConfig& config, TeacherSaliencyCache* cache = nullptr,
                               const EpochCallback& on_epoch = {}) {
  const ModelParams before = teacher.model.params;
  TrainContext ctx{&teacher.model, cache, on_epoch};
  TrainedArtifact out = train_run(student_spec, train, val, config, ctx);
  if (!(teacher.model.params == before)) throw std::logic_error("teacher parameters changed during distillation");
  return out;
}

struct BetaSearchResult {
  double best_beta = 0.0;
  TrainedArtifact best;
  std::vector<double> betas;
  std::vector<ValScore> val_scores;
  std::vector<std::size_t> best_epochs;
  std::vector<std::vector<EpochLog>> logs;
  std::vector<Model> models;  // best-epoch snapshot per beta
};

/// One distillation per beta (same seed); the best validation score wins,
/// exact ties go to the smaller beta.
inline BetaSearchResult grid_search_beta(const TrainedArtifact& teacher, const ModelSpec& student_spec,
                                         const TimeSeriesDataset& train, const TimeSeriesDataset& val,
                                         const DistillConfig& config, TeacherSaliencyCache* cache = nullptr) {
  if (config.beta_grid.empty()) throw std::invalid_argument("grid_search_beta: empty beta grid");
  BetaSearchResult res;
  res.betas = config.beta_grid;
  std::sort(res.betas.begin(), res.betas.end());
  std::vector<TrainedArtifact> runs;
  for (double b : res.betas) {
    DistillConfig cfg = config;
    cfg.beta = b;
    runs.push_back(distill(teacher, student_spec, train, val, cfg, cache));
    res.val_scores.push_back(runs.back().val_score());
    res.best_epochs.push_back(runs.back().best_epoch);
    res.logs.push_back(runs.back().history);
    res.models.push_back(runs.back().model);
  }
  const std::size_t k = select_best(res.val_scores);
  res.best_beta = res.betas[k];
  res.best = std::move(runs[k]);
  return res;
}

}  // namespace tsd
