#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ostrack/tensor.hpp"

namespace ostrack {

namespace detail {

template <class T>
std::vector<std::vector<double>> tape_gradients(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>>& params) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    auto loss = f();
    backward_pass(tape, loss);
  }
  std::vector<std::vector<double>> grads;
  for (auto& p : params) {
    std::vector<double> g(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.begin());
    grads.push_back(std::move(g));
  }
  return grads;
}

template <class T>
double five_point(const std::function<Tensor<T>()>& f, Tensor<T>& p, std::size_t i, double h) {
  auto values = p.mutable_data();
  const T saved = values[i];
  auto at = [&](double offset) {
    values[i] = static_cast<T>(saved + offset);
    const double v = static_cast<double>(f().item());
    values[i] = saved;
    return v;
  };
  return (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
}

inline double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace detail

/// Compares tape gradients of a scalar function against the five-point central difference
/// (f(θ−2h) − 8f(θ−h) + 8f(θ+h) − f(θ+2h)) / 12h over every element of every parameter.
/// The O(h⁴) truncation lets h stay large enough that rounding in f does not swamp
/// near-zero gradients.
/// Returns the max relative error, with denominator max(|a|, |b|, 1e-6).
///
/// `f` must be deterministic and build its graph from `params` on whatever tape
/// is active when it is called.
template <class T>
double finite_difference_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, double h = 1e-3) {
  const auto analytic = detail::tape_gradients(f, params);
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k].size(); ++i)
      worst = std::max(worst, detail::relative_error(analytic[k][i], detail::five_point(f, params[k], i, h)));
  return worst;
}

/// Same comparison for a low-precision tape, with the differences taken on a 64-bit copy of
/// the function at the same parameter values. In float, rounding in f is about 1e-7·|f|, so
/// any step small enough to stay clear of ReLU kinks leaves the quotient mostly noise; the
/// 64-bit reference removes that noise without touching the gradients under test.
///
/// `params` and `ref_params` must line up tensor by tensor and hold equal values.
template <class T>
double finite_difference_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                               const std::function<Tensor<double>()>& ref_f, std::vector<Tensor<double>> ref_params,
                               double h = 1e-4) {
  if (params.size() != ref_params.size()) throw DimensionError("gradient check: parameter lists differ");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != ref_params[k].shape()) throw DimensionError("gradient check: parameter shapes differ");
    for (std::size_t i = 0; i < params[k].size(); ++i)
      if (static_cast<double>(params[k][i]) != ref_params[k][i])
        throw InvariantError("gradient check: reference parameters hold different values");
  }
  const auto analytic = detail::tape_gradients(f, params);
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k].size(); ++i)
      worst = std::max(worst, detail::relative_error(analytic[k][i], detail::five_point(ref_f, ref_params[k], i, h)));
  return worst;
}

}  // namespace ostrack
