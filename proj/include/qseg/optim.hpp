// Adam with a polynomial learning-rate decay. Weight decay is zero at this
// scale, so plain Adam; moments live here keyed by parameter name and are
// serialized alongside the parameters so resumed runs continue exactly.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "qseg/tape.hpp"

namespace qseg {

struct AdamState {
  Mat m, v;
};

class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // Bias-corrected update of every parameter in the store from its
  // accumulated gradient. Iteration is name-sorted via the store.
  void step(ParameterStore& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    params.for_each([&](Parameter& p) {
      AdamState& st = state_for(p);
      for (size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad.v[k];
        st.m.v[k] = beta1 * st.m.v[k] + (1.0 - beta1) * g;
        st.v.v[k] = beta2 * st.v.v[k] + (1.0 - beta2) * g * g;
        const double mhat = st.m.v[k] / c1;
        const double vhat = st.v.v[k] / c2;
        p.value.v[k] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    });
  }

  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t) { t_ = t; }

  AdamState& state_for(Parameter& p) {
    auto [it, inserted] = state_.try_emplace(p.name);
    if (inserted) {
      it->second.m = Mat(p.value.rows, p.value.cols);
      it->second.v = Mat(p.value.rows, p.value.cols);
    }
    return it->second;
  }

  const std::map<std::string, AdamState>& state() const { return state_; }
  std::map<std::string, AdamState>& state() { return state_; }

 private:
  std::map<std::string, AdamState> state_;
  int64_t t_ = 0;
};

// lr * (1 - step/total)^power, the usual poly schedule. `step` counts from 0.
inline double poly_lr(double base_lr, int64_t step, int64_t total_steps, double power = 0.9) {
  if (total_steps <= 0) throw std::invalid_argument("poly_lr: total_steps must be positive");
  if (step < 0 || step >= total_steps) throw std::invalid_argument("poly_lr: step out of range");
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * std::pow(frac, power);
}

}  // namespace qseg
