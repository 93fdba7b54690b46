#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "afnn/tape.hpp"
#include "afnn/tensor.hpp"

namespace afnn {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  /// Entries whose gradient is small relative to the largest one are compared
  /// against this fraction of the largest magnitude instead of their own.
  double floor_fraction = 1e-2;
  /// When > 0, only this many evenly spaced coordinates per input are probed.
  std::size_t max_coords_per_input = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` builds its graph on the supplied tape from the given
/// input vars and returns a [1]-shaped result.
template <class F>
GradCheckReport grad_check(F&& f, const std::vector<Tensor<double>>& inputs, GradCheckOptions opt = {}) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, bool with_grad,
                      std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x, with_grad));
    Var<double> out = f(tape, vars);
    if (out.value().size() != 1) {
      throw ShapeError("grad_check: function must return a scalar, got " + shape_str(out.shape()));
    }
    if (grads) {
      tape.backward(out);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return out.value()[0];
  };

  std::vector<Tensor<double>> analytic;
  evaluate(inputs, true, &analytic);

  std::vector<Tensor<double>> probe = inputs;
  std::vector<std::vector<std::size_t>> coords(inputs.size());
  std::vector<std::vector<double>> numeric(inputs.size());
  double scale = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = inputs[k].size();
    const std::size_t take =
        opt.max_coords_per_input > 0 ? std::min(n, opt.max_coords_per_input) : n;
    for (std::size_t j = 0; j < take; ++j) coords[k].push_back(j * n / take);
    for (std::size_t idx : coords[k]) {
      const double orig = probe[k][idx];
      probe[k][idx] = orig + opt.h;
      const double fp = evaluate(probe, false, nullptr);
      probe[k][idx] = orig - opt.h;
      const double fm = evaluate(probe, false, nullptr);
      probe[k][idx] = orig;
      const double d = (fp - fm) / (2.0 * opt.h);
      numeric[k].push_back(d);
      scale = std::max({scale, std::abs(d), std::abs(analytic[k][idx])});
    }
  }

  GradCheckReport report;
  const double floor = std::max(1e-12, opt.floor_fraction * scale);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t j = 0; j < coords[k].size(); ++j) {
      const std::size_t idx = coords[k][j];
      const double a = analytic[k][idx];
      const double nd = numeric[k][j];
      const double abs_err = std::abs(a - nd);
      const double rel = abs_err / std::max({std::abs(a), std::abs(nd), floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.coords_checked == 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.worst_input = k;
        report.worst_index = idx;
      }
      ++report.coords_checked;
    }
  }
  report.passed = report.max_rel_error <= opt.tol;
  return report;
}

}  // namespace afnn
