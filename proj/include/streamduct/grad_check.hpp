#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "streamduct/autodiff.hpp"

namespace streamduct {

/// Scalar function of a list of tensors, expressed on a Graph.
using GraphFunction = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheckReport {
  bool ok = true;                       // false if f was non-finite anywhere
  std::string diagnostic;               // why ok is false
  double max_relative_error = 0.0;      // over all parameters
  std::vector<double> per_parameter;    // max relative error per input tensor
};

/// Compare reverse-mode gradients with central differences.
///
/// Relative error per element is |analytic - numeric| / max(1, |numeric|).
inline GradCheckReport grad_check(const GraphFunction& f, const std::vector<Tensor>& point,
                                  double eps = 1e-6) {
  if (!(eps >= 1e-8 && eps <= 1e-4)) throw InvalidArgument("grad_check: eps must lie in [1e-8, 1e-4]");
  GradCheckReport report;

  auto evaluate = [&](const std::vector<Tensor>& at) {
    Graph g(false);
    std::vector<Var> vars;
    for (const Tensor& t : at) vars.push_back(g.constant(t));
    return f(g, vars).value()[0];
  };

  Graph g(true);
  std::vector<Var> vars;
  for (const Tensor& t : point) vars.push_back(g.leaf(t));
  const Var out = f(g, vars);
  if (out.value().size() != 1 || !std::isfinite(out.value()[0])) {
    report.ok = false;
    report.diagnostic = "function value at the base point is not a finite scalar";
    return report;
  }
  g.backward(out);

  std::vector<Tensor> probe = point;
  for (std::size_t p = 0; p < point.size(); ++p) {
    double worst = 0.0;
    const Tensor& analytic = vars[p].grad();
    for (std::size_t i = 0; i < point[p].size(); ++i) {
      const double x0 = point[p][i];
      probe[p][i] = x0 + eps;
      const double fp = evaluate(probe);
      probe[p][i] = x0 - eps;
      const double fm = evaluate(probe);
      probe[p][i] = x0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.ok = false;
        report.diagnostic = "non-finite value perturbing parameter " + std::to_string(p) +
                            " element " + std::to_string(i);
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(numeric)));
    }
    report.per_parameter.push_back(worst);
    report.max_relative_error = std::max(report.max_relative_error, worst);
  }
  return report;
}

}  // namespace streamduct
