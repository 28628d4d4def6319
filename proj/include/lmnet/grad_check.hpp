#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lmnet/autodiff.hpp"
#include "lmnet/errors.hpp"

namespace lmnet {

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Compare at most this many scalars per input (0 = all). Sampled
  // indices are drawn from a fixed-seed generator.
  std::size_t max_per_input = 0;
  std::uint64_t seed = 0;
  // A central difference is only an oracle if f is smooth over [x-eps, x+eps].
  // With this set, a scalar whose one-sided slopes disagree (a ReLU or max
  // kink inside the step) is retried with eps/10, down to min_eps. The test
  // looks at f alone, never at the analytic gradient.
  bool refine_kinks = false;
  double min_eps = 1e-7;
};

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
  double step = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // scalars that needed a smaller step
  GradCheckEntry worst;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the tape gradient of a scalar function against central
/// differences (f(x+eps) - f(x-eps)) / 2eps for every (or a sample of
/// every) scalar of `inputs`. The function is evaluated twice at the start;
/// disagreement means it is not deterministic and the check is refused.
inline GradCheckReport grad_check(const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                                  std::vector<Tensor<double>> inputs, const GradCheckOptions& opt = {}) {
  auto eval_value = [&](const std::vector<Tensor<double>>& xs) {
    NoGradGuard guard;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(constant(x));
    Var<double> out = f(vars);
    if (out.value().size() != 1) throw ValueError("grad_check: function must return a scalar");
    return out.value()[0];
  };

  const double first = eval_value(inputs);
  const double second = eval_value(inputs);
  if (!(first == second)) throw ValueError("grad_check: function is not deterministic (two forward passes disagree)");

  std::vector<Var<double>> params;
  for (const auto& x : inputs) params.push_back(parameter(x));
  Var<double> out = f(params);
  if (out.value().size() != 1) throw ValueError("grad_check: function must return a scalar");
  backward(out);

  GradCheckReport report;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].size();
    std::vector<std::size_t> indices(n);
    for (std::size_t k = 0; k < n; ++k) indices[k] = k;
    if (opt.max_per_input && n > opt.max_per_input) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(opt.max_per_input);
      std::sort(indices.begin(), indices.end());
    }
    const bool has = params[i].has_grad();
    for (std::size_t k : indices) {
      const double analytic = has ? params[i].grad()[k] : 0.0;
      const double orig = inputs[i][k];
      // Among eps, eps/10, ... keep the step whose one-sided slopes agree
      // best: a kink inside the step pushes toward smaller steps, rounding
      // noise (about ulp(f)/h) pushes back.
      double h = opt.eps, numeric = 0, best = 0;
      for (double step = opt.eps;; step /= 10) {
        inputs[i][k] = orig + step;
        const double up = eval_value(inputs);
        inputs[i][k] = orig - step;
        const double down = eval_value(inputs);
        inputs[i][k] = orig;
        const double central = (up - down) / (2 * step);
        const double disagreement = relative_error((up - first) / step, (first - down) / step);
        if (step == opt.eps || disagreement < best) {
          best = disagreement;
          numeric = central;
          h = step;
        }
        // The oracle has to be well inside the tolerance it is judged against.
        if (!opt.refine_kinks || best <= opt.tolerance / 10 || step / 10 < opt.min_eps) break;
      }
      if (h != opt.eps) ++report.refined;
      const double err = relative_error(analytic, numeric);
      ++report.checked;
      if (report.checked == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = {i, k, analytic, numeric, err, h};
      }
    }
  }
  report.passed = report.max_rel_error <= opt.tolerance;
  return report;
}

}  // namespace lmnet
