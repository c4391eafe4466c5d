#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "densepipe/tensor.hpp"

namespace densepipe {

/// An operation under test: forward maps inputs to one output tensor;
/// backward maps (inputs, upstream gradient of the output) to one gradient
/// per input. Inputs listed in `fixed` are not differentiated.
struct GradCheckCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> forward;
  std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)> backward;
  std::vector<bool> fixed;
  /// Returns an empty string when the inputs are a valid probe point,
  /// otherwise the reason they are not.
  std::function<std::string(const std::vector<Tensor>&)> probe_guard;
};

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
  bool rejected = false;
  std::string note;
};

/// Rejects probe points within `margin` of a ReLU kink.
inline std::function<std::string(const std::vector<Tensor>&)> relu_guard(std::size_t input = 0,
                                                                         double margin = 1e-4) {
  return [input, margin](const std::vector<Tensor>& inputs) -> std::string {
    for (double v : inputs.at(input).values()) {
      if (std::abs(v) < margin) return "probe point at or near the ReLU kink (x = 0) is nondifferentiable";
    }
    return {};
  };
}

/// Compares analytic gradients with central differences (step 1e-5) of the
/// scalar L = sum(r * forward(inputs)) for a fixed random projection r.
/// Relative error is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport grad_check(const GradCheckCase& test, double tolerance, std::uint64_t seed = 1) {
  constexpr double step = 1e-5;
  GradCheckReport report;
  report.name = test.name;
  if (test.probe_guard) {
    if (std::string why = test.probe_guard(test.inputs); !why.empty()) {
      report.rejected = true;
      report.note = why;
      return report;
    }
  }
  std::vector<Tensor> inputs = test.inputs;
  const Tensor out = test.forward(inputs);
  Rng rng = Rng::stream(seed, "grad_check_projection");
  Tensor projection(out.shape());
  for (double& v : projection.values()) v = rng.uniform(-1.0, 1.0);

  const auto objective = [&](const std::vector<Tensor>& in) {
    const Tensor y = test.forward(in);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += projection[i] * y[i];
    return s;
  };

  const std::vector<Tensor> analytic = test.backward(inputs, projection);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (t < test.fixed.size() && test.fixed[t]) continue;
    if (t >= analytic.size() || analytic[t].shape() != inputs[t].shape()) {
      report.note = "backward returned no gradient of the right shape for input " + std::to_string(t);
      return report;
    }
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double saved = inputs[t][i];
      inputs[t][i] = saved + step;
      const double plus = objective(inputs);
      inputs[t][i] = saved - step;
      const double minus = objective(inputs);
      inputs[t][i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[t][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace densepipe
