#pragma once

#include <functional>
#include <vector>

#include "stnreid/rng.hpp"
#include "stnreid/tensor.hpp"

namespace stnreid {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int worst_input = -1;
  long long worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  long long elements_checked = 0;
};

using ScalarFn = std::function<double(const std::vector<TensorD>&)>;
using GradFn = std::function<std::vector<TensorD>(const std::vector<TensorD>&)>;

// Central finite differences vs analytic gradients, element by element, in
// double precision. Reports the worst relative error; never throws on a
// mismatch so negative controls can assert failure.
inline GradCheckReport gradient_check(const ScalarFn& value_fn, const GradFn& grad_fn,
                                      std::vector<TensorD> inputs, double eps, double rel_tol) {
  require(eps >= 1e-4 && eps <= 1e-2, "gradcheck", "eps must be in [1e-4, 1e-2]");
  GradCheckReport report;
  const std::vector<TensorD> analytic = grad_fn(inputs);
  require(analytic.size() == inputs.size(), "gradcheck",
          "grad closure returned wrong number of gradients");

  for (size_t t = 0; t < inputs.size(); ++t) {
    require(analytic[t].same_dims(inputs[t]), "gradcheck", "gradient dims mismatch input dims");
    for (long long i = 0; i < inputs[t].numel(); ++i) {
      const double saved = inputs[t][i];
      inputs[t][i] = saved + eps;
      const double up = value_fn(inputs);
      inputs[t][i] = saved - eps;
      const double down = value_fn(inputs);
      inputs[t][i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
      const double rel = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_input = static_cast<int>(t);
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err < rel_tol;
  return report;
}

// Same comparison on a random subset of elements per input; large parameter
// tensors (the full localization net) would otherwise need hundreds of
// thousands of forward passes.
inline GradCheckReport gradient_check_sampled(const ScalarFn& value_fn, const GradFn& grad_fn,
                                              std::vector<TensorD> inputs, double eps,
                                              double rel_tol, int max_per_input, Rng& rng) {
  require(eps >= 1e-4 && eps <= 1e-2, "gradcheck", "eps must be in [1e-4, 1e-2]");
  GradCheckReport report;
  const std::vector<TensorD> analytic = grad_fn(inputs);
  require(analytic.size() == inputs.size(), "gradcheck",
          "grad closure returned wrong number of gradients");

  for (size_t t = 0; t < inputs.size(); ++t) {
    const long long n = inputs[t].numel();
    std::vector<long long> picks;
    if (n <= max_per_input) {
      picks.resize(static_cast<size_t>(n));
      for (long long i = 0; i < n; ++i) picks[static_cast<size_t>(i)] = i;
    } else {
      for (int i = 0; i < max_per_input; ++i)
        picks.push_back(rng.uniform_int(static_cast<int>(n)));
    }
    for (long long i : picks) {
      const double saved = inputs[t][i];
      inputs[t][i] = saved + eps;
      const double up = value_fn(inputs);
      inputs[t][i] = saved - eps;
      const double down = value_fn(inputs);
      inputs[t][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
      const double rel = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_input = static_cast<int>(t);
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err < rel_tol;
  return report;
}

}  // namespace stnreid
