#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "capsroute/errors.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0;
  std::size_t probe_count = 0;
  std::size_t worst_input = 0;
  std::size_t worst_coordinate = 0;
  std::size_t kinks_skipped = 0;

  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

struct FdOptions {
  double step = 1e-5;
  /// Optional per-input override of `step`; zero entries fall back to it.
  std::vector<double> tensor_steps;
  std::size_t probes_per_tensor = 20;
  std::uint64_t seed = 0;
};

using TensorList = std::vector<Tensor<double>>;

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Objective value plus the on/off pattern of every piecewise-linear unit
/// (ReLU, hinge) it passes through. Two evaluations with different patterns
/// lie on different linear pieces.
struct PiecewiseValue {
  long double value = 0;
  std::vector<bool> pattern;
};

using PiecewiseObjective = std::function<PiecewiseValue(const TensorList&)>;

/**
 * Central-difference check of analytic gradients of a scalar objective.
 * Coordinates are visited in random order until probes_per_tensor of them
 * have been probed (all of them for small tensors). A probe whose +step and
 * -step evaluations differ in activation pattern straddles a kink, where a
 * central difference is meaningless; it is skipped, counted, and the next
 * coordinate is used instead. probe_mask (optional) selects which inputs are
 * differentiable.
 */
inline GradCheckReport finite_difference_check(const std::string& name, const PiecewiseObjective& objective,
                                               const TensorList& analytic, TensorList inputs, const FdOptions& opt = {},
                                               const std::vector<bool>& probe_mask = {}) {
  if (analytic.size() != inputs.size()) throw DimensionError(name + ": one gradient per input required");
  GradCheckReport report{name, 0.0, 0, 0, 0, 0};
  std::mt19937_64 rng(opt.seed);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (!probe_mask.empty() && !probe_mask[t]) continue;
    require_same_shape(inputs[t], analytic[t], "finite_difference_check");
    const double h = t < opt.tensor_steps.size() && opt.tensor_steps[t] > 0 ? opt.tensor_steps[t] : opt.step;
    const std::size_t n = inputs[t].size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    std::shuffle(coords.begin(), coords.end(), rng);
    std::size_t probed = 0;
    for (std::size_t c : coords) {
      if (probed == opt.probes_per_tensor) break;
      const double saved = inputs[t][c];
      inputs[t][c] = saved + h;
      const PiecewiseValue plus = objective(inputs);
      inputs[t][c] = saved - h;
      const PiecewiseValue minus = objective(inputs);
      inputs[t][c] = saved;
      const double a = analytic[t][c];
      if (!std::isfinite(plus.value) || !std::isfinite(minus.value) || !std::isfinite(a)) {
        throw NumericError(name + ": non-finite value during finite-difference probe");
      }
      if (plus.pattern != minus.pattern) {
        ++report.kinks_skipped;
        continue;
      }
      const double numeric = static_cast<double>((plus.value - minus.value) / (2.0L * h));
      const double err = relative_error(a, numeric);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = t;
        report.worst_coordinate = c;
      }
      ++probed;
      ++report.probe_count;
    }
  }
  return report;
}

/// Smooth objectives: no activation pattern to compare.
inline GradCheckReport finite_difference_check(const std::string& name,
                                               const std::function<long double(const TensorList&)>& objective,
                                               const TensorList& analytic, TensorList inputs, const FdOptions& opt = {},
                                               const std::vector<bool>& probe_mask = {}) {
  PiecewiseObjective wrapped = [&objective](const TensorList& x) { return PiecewiseValue{objective(x), {}}; };
  return finite_difference_check(name, wrapped, analytic, std::move(inputs), opt, probe_mask);
}

/// Checks a tensor-valued op through the scalar projection sum(w * op(x))
/// with fixed random weights w; backward(x, w) must return d/dx.
inline GradCheckReport check_tensor_op(const std::string& name,
                                       const std::function<Tensor<double>(const TensorList&)>& forward,
                                       const std::function<TensorList(const TensorList&, const Tensor<double>&)>& backward,
                                       const TensorList& inputs, const FdOptions& opt = {},
                                       const std::vector<bool>& probe_mask = {}) {
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  const Tensor<double> probe_out = forward(inputs);
  const Tensor<double> weights = random_normal<double>(probe_out.shape(), rng);
  auto objective = [&](const TensorList& x) {
    const Tensor<double> y = forward(x);
    long double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<long double>(weights[i]) * y[i];
    return s;
  };
  TensorList grads = backward(inputs, weights);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!probe_mask.empty() && !probe_mask[i]) grads[i] = Tensor<double>(inputs[i].shape());
  }
  return finite_difference_check(name, objective, grads, inputs, opt, probe_mask);
}

}  // namespace capsroute
