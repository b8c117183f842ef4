#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "tsd/models.hpp"

namespace tsd {

struct OptimizerConfig {
  double initial_lr = 0.01;
  double decay_factor = 0.5;
  std::vector<std::size_t> decay_epochs{25, 30, 35};
  std::size_t batch_size = 32;
  std::size_t max_epochs = 500;
  std::size_t patience = 50;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const OptimizerConfig&) const = default;
};

/// Step schedule: the rate is multiplied by decay_factor at each listed
/// (0-based) epoch, so epoch 25 is the first epoch at half rate.
inline double learning_rate_at(const OptimizerConfig& cfg, std::size_t epoch) {
  double lr = cfg.initial_lr;
  for (std::size_t e : cfg.decay_epochs)
    if (epoch >= e) lr *= cfg.decay_factor;
  return lr;
}

class Adam {
 public:
  explicit Adam(const OptimizerConfig& cfg) : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps) {}

  /// Applies one update to every parameter that requires grad, then zeroes grads.
  void step(ModelParams& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params.tensors) {
      if (!p.requires_grad) continue;
      auto& st = state_[name];
      if (st.m.size() != p.size()) {
        st.m.assign(p.size(), 0.0);
        st.v.assign(p.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
        p.values[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
      }
      p.zero_grad();
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, State> state_;
};

}  // namespace tsd
