#pragma once

// Adam with decoupled weight decay, and the one-cycle learning-rate policy
// (cosine rise to max_lr over the warmup fraction, cosine fall to
// max_lr/final_div).

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mlkd/common.hpp"
#include "mlkd/tensor.hpp"

namespace mlkd {

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  template <typename Params>
  static AdamState init(const Params& params) {
    AdamState st;
    for (const auto& [name, p] : params) {
      st.m.emplace_back(p.numel(), T(0));
      st.v.emplace_back(p.numel(), T(0));
    }
    return st;
  }
};

/// Bias-corrected Adam update. Weight decay is decoupled and applied to the
/// parameter before the Adam delta. A non-finite gradient aborts the whole
/// step (no parameter is touched) and surfaces a NumericError.
template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState<T>& state,
               double lr, double weight_decay) {
  if (params.size() != state.m.size())
    throw ConfigError("adam_step: state does not match parameter list");
  for (auto& [name, p] : params) {
    for (T g : p.grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("adam_step: non-finite gradient in " + name);
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi].second;
    auto& grad = p.grad();
    auto& value = p.value();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (size_t i = 0; i < value.size(); ++i) {
      if (weight_decay != 0.0) value[i] -= static_cast<T>(lr * weight_decay) * value[i];
      T g = grad[i];
      m[i] = static_cast<T>(state.beta1) * m[i] + static_cast<T>(1.0 - state.beta1) * g;
      v[i] = static_cast<T>(state.beta2) * v[i] + static_cast<T>(1.0 - state.beta2) * g * g;
      T mhat = m[i] / static_cast<T>(bc1);
      T vhat = v[i] / static_cast<T>(bc2);
      value[i] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(state.eps));
    }
  }
}

struct OneCycleSchedule {
  int64_t total_steps = 1;
  double max_lr = 1e-4;
  double warmup_frac = 0.3;
  double div = 25.0;
  double final_div = 1e4;

  /// lr at `step` in [0, total_steps). Peak is hit exactly once, at the end
  /// of warmup.
  double lr_at(int64_t step) const {
    if (step < 0 || step >= total_steps)
      throw std::invalid_argument("one_cycle_lr: step " + std::to_string(step) +
                                  " outside [0, " + std::to_string(total_steps) + ")");
    int64_t warm = static_cast<int64_t>(warmup_frac * static_cast<double>(total_steps));
    double low = max_lr / div;
    double floor_lr = max_lr / final_div;
    if (step <= warm) {
      if (warm == 0) return max_lr;
      double t = static_cast<double>(step) / static_cast<double>(warm);
      return low + (max_lr - low) * 0.5 * (1.0 - std::cos(M_PI * t));
    }
    int64_t span = total_steps - 1 - warm;
    if (span <= 0) return max_lr;
    double t = static_cast<double>(step - warm) / static_cast<double>(span);
    return floor_lr + (max_lr - floor_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
  }
};

inline double one_cycle_lr(int64_t step, int64_t total_steps, double max_lr, double warmup_frac,
                           double div, double final_div) {
  OneCycleSchedule s{total_steps, max_lr, warmup_frac, div, final_div};
  return s.lr_at(step);
}

}  // namespace mlkd
