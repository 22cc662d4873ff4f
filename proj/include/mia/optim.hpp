#pragma once

// Adam and the per-step learning-rate schedule.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "mia/config.hpp"
#include "mia/parameter.hpp"

namespace mia {

/// Learning rate of `step` at 0-based `epoch`: steps 1 and 3 are constant, step 2 decays in blocks.
inline double lr_schedule(int step, std::size_t epoch, const TrainConfig& cfg = TrainConfig{}) {
  if (step < 1 || step > 3) throw std::invalid_argument("unknown training step " + std::to_string(step));
  const double base = cfg.lr[step - 1];
  if (step != 2) return base;
  return base * std::pow(cfg.step2_decay_factor, static_cast<double>(epoch / cfg.step2_decay_every));
}

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_(param) {}
  const std::string& parameter() const { return param_; }

 private:
  std::string param_;
};

class Adam {
 public:
  struct Moments {
    Tensor m;
    Tensor v;
  };

  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  explicit Adam(const TrainConfig& c) : Adam(c.adam_beta1, c.adam_beta2, c.adam_eps) {}

  void reset() {
    state_.clear();
    t_ = 0;
  }

  /// One update of every parameter with requires_grad set. Gradients are checked before anything moves.
  void step(ParameterStore& params, double lr) {
    params.for_each([&](Parameter& p) {
      if (!p.requires_grad) return;
      if (!p.grad.all_finite()) throw NonFiniteGradient(p.name);
    });
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    params.for_each([&](Parameter& p) {
      if (!p.requires_grad) return;
      auto [it, fresh] = state_.try_emplace(p.name);
      if (fresh) it->second = {Tensor(p.value.shape()), Tensor(p.value.shape())};
      Moments& s = it->second;
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = p.grad[i];
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
        p.value[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
      }
    });
  }

  std::size_t steps_taken() const { return t_; }
  void set_steps_taken(std::size_t t) { t_ = t; }
  const std::map<std::string, Moments>& state() const { return state_; }
  std::map<std::string, Moments>& state() { return state_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace mia
