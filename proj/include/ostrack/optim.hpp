#pragma once

#include <cmath>
#include <vector>

#include "ostrack/tensor.hpp"

namespace ostrack {

/// A set of parameters sharing one learning rate.
template <class T>
struct ParamGroup {
  std::vector<Tensor<T>> params;
  double lr = 4e-4;
};

/// AdamW hyperparameters and per-parameter moments.
template <class T>
struct OptimState {
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr_scale = 1.0;  // step-decay multiplier applied on top of each group's lr
  long step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// Default two-group split: backbone at 4e-5, everything else at 4e-4.
template <class T>
std::vector<ParamGroup<T>> default_groups(std::vector<Tensor<T>> backbone, std::vector<Tensor<T>> other) {
  return {ParamGroup<T>{std::move(backbone), 4e-5}, ParamGroup<T>{std::move(other), 4e-4}};
}

/// One decoupled-weight-decay Adam update over all groups, using each parameter's grad.
/// Parameters without a grad are treated as having a zero gradient.
template <class T>
void adamw_step(std::vector<ParamGroup<T>>& groups, OptimState<T>& opt) {
  if (opt.step < 0) throw ContractError("adamw_step: negative step counter");
  std::size_t count = 0;
  for (const auto& g : groups) count += g.params.size();
  if (opt.m.empty()) {
    for (const auto& g : groups)
      for (const auto& p : g.params) {
        opt.m.emplace_back(p.size(), T(0));
        opt.v.emplace_back(p.size(), T(0));
      }
  }
  if (opt.m.size() != count) throw DimensionError("adamw_step: optimizer state does not match parameter list");
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  std::size_t slot = 0;
  for (auto& group : groups) {
    const double lr = group.lr * opt.lr_scale;
    for (auto& p : group.params) {
      auto& m = opt.m[slot];
      auto& v = opt.v[slot];
      ++slot;
      if (m.size() != p.size()) throw DimensionError("adamw_step: moment shape differs from parameter " + to_string(p.shape()));
      if (p.has_grad() && p.grad().size() != p.size()) throw DimensionError("adamw_step: grad shape differs from parameter");
      auto theta = p.mutable_data();
      const auto grad = p.grad();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
        m[i] = static_cast<T>(opt.beta1 * m[i] + (1.0 - opt.beta1) * g);
        v[i] = static_cast<T>(opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double t = theta[i];
        t -= lr * opt.weight_decay * t;
        t -= lr * mhat / (std::sqrt(vhat) + opt.eps);
        theta[i] = static_cast<T>(t);
      }
    }
  }
}

/// Step decay: ×0.1 once training passes `fraction` of the total steps.
inline double step_decay_scale(long step, long total_steps, double fraction = 0.8) {
  return static_cast<double>(step) >= fraction * static_cast<double>(total_steps) ? 0.1 : 1.0;
}

}  // namespace ostrack
