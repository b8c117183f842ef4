#pragma once

// Test-set evaluation of a student against its teacher: generalization,
// fidelity and similarity of post-hoc attribution maps.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsd/data.hpp"
#include "tsd/distill.hpp"
#include "tsd/metrics.hpp"
#include "tsd/saliency.hpp"

namespace tsd {

struct AttributionOptions {
  bool occlusion = true;
  bool gradient = false;
  bool integrated_gradients = false;
  std::size_t occlusion_window = 1;
  double occlusion_baseline = 0.0;
  std::size_t ig_steps = 64;
};

struct AttributionMaps {
  std::vector<std::vector<double>> occlusion, gradient, integrated_gradients;
};

/// Maps for every instance, explaining class `targets[i]` of instance i.
inline AttributionMaps compute_attributions(const Model& model, const TimeSeriesDataset& ds,
                                            const std::vector<std::size_t>& targets, const AttributionOptions& opts) {
  AttributionMaps maps;
  const std::vector<double> zero(ds.series_length, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& x = ds.instances[i].values;
    if (opts.occlusion) {
      maps.occlusion.push_back(occlusion_map(model, x, opts.occlusion_window, opts.occlusion_baseline, targets[i]));
    }
    if (opts.gradient) maps.gradient.push_back(gradient_saliency(model, x, targets[i]));
    if (opts.integrated_gradients) {
      maps.integrated_gradients.push_back(integrated_gradients(model, x, zero, opts.ig_steps, targets[i]));
    }
  }
  return maps;
}

/// Mean per-instance MSE between two sets of maps.
inline double mean_map_mse(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("map sets differ in size", 0);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += saliency_mse(a[i], b[i]);
  return s / static_cast<double>(a.size());
}

/// Teacher outputs on a test split, computed once and shared by every student.
struct TeacherReference {
  std::vector<double> logits;
  std::vector<std::size_t> predictions;
  AttributionMaps maps;
};

inline TeacherReference make_teacher_reference(const Model& teacher, const TimeSeriesDataset& test,
                                               const AttributionOptions& opts) {
  TeacherReference ref;
  ref.logits = dataset_logits(teacher, test);
  ref.predictions = argmax_rows(ref.logits, teacher.spec.num_classes);
  ref.maps = compute_attributions(teacher, test, ref.predictions, opts);
  return ref;
}

/// Generalization metrics from class-probability rows.
inline std::map<std::string, double> generalization_metrics(const std::vector<double>& probs, std::size_t classes,
                                                           const std::vector<std::size_t>& labels) {
  return {{"auc_prc", auc_prc(probs, classes, labels)},
          {"auc_roc", auc_roc(probs, classes, labels)},
          {"accuracy", accuracy(argmax_rows(probs, classes), labels)}};
}

/// Full metric set for a student. Fidelity is measured at `fidelity_tau`;
/// attribution MSEs are reported for every map kind present in `ref.maps`.
inline std::map<std::string, double> evaluate_student(const Model& student, const TimeSeriesDataset& test,
                                                      const TeacherReference& ref, double fidelity_tau,
                                                      const AttributionOptions& opts) {
  const std::size_t classes = student.spec.num_classes;
  const auto logits = dataset_logits(student, test);
  auto out = generalization_metrics(softened_rows(logits, classes, 1.0), classes, test.labels());
  const auto preds = argmax_rows(logits, classes);
  out["top1_agreement"] = top1_agreement(ref.predictions, preds);
  out["predictive_kl"] = predictive_kl(softened_rows(ref.logits, classes, fidelity_tau),
                                       softened_rows(logits, classes, fidelity_tau), classes);
  if (opts.occlusion || opts.gradient || opts.integrated_gradients) {
    const auto maps = compute_attributions(student, test, ref.predictions, opts);
    if (opts.occlusion) out["occlusion_mse"] = mean_map_mse(ref.maps.occlusion, maps.occlusion);
    if (opts.gradient) out["gradient_mse"] = mean_map_mse(ref.maps.gradient, maps.gradient);
    if (opts.integrated_gradients) out["ig_mse"] = mean_map_mse(ref.maps.integrated_gradients, maps.integrated_gradients);
  }
  return out;
}

/// Copy of `ds` with every instance replaced by its FGSM perturbation
/// against `model` (student- or teacher-specific noise).
inline TimeSeriesDataset fgsm_dataset(const Model& model, const TimeSeriesDataset& ds, double epsilon) {
  TimeSeriesDataset out = ds;
  if (epsilon == 0.0) return out;
  for (auto& inst : out.instances) inst.values = fgsm_perturb(model, inst.values, inst.label, epsilon);
  return out;
}

}  // namespace tsd
