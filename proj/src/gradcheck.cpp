#include "capsworld/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace capsworld::ad {

namespace {

struct Evaluation {
  double value;
  std::uint64_t signature;
};

Evaluation evaluate(const GraphFn& f) {
  Graph<double> g(Graph<double>::Options{.checked = true, .track_branches = true});
  const double v = f(g).item();
  if (!std::isfinite(v)) throw NumericDomainError("finite_diff_check: non-finite function value");
  return {v, g.branch_signature()};
}

}  // namespace

FiniteDiffReport finite_diff_check(const GraphFn& f, const std::vector<Tensor<double>*>& inputs, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");

  std::vector<bool> had_grad;
  for (auto* t : inputs) {
    had_grad.push_back(t->requires_grad());
    t->set_requires_grad(true);
  }

  std::vector<std::vector<double>> analytic;
  {
    Graph<double> g(Graph<double>::Options{.checked = true, .track_branches = true});
    auto loss = f(g);
    if (!std::isfinite(loss.item())) throw NumericDomainError("finite_diff_check: non-finite function value");
    g.backward(loss);
    for (auto* t : inputs) {
      analytic.emplace_back(t->grad().begin(), t->grad().end());
      for (double v : analytic.back()) {
        if (!std::isfinite(v)) throw NumericDomainError("finite_diff_check: non-finite analytic gradient");
      }
    }
  }

  FiniteDiffReport report;
  std::size_t flat = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k]->data();
    for (std::size_t i = 0; i < data.size(); ++i, ++flat) {
      const double saved = data[i];
      data[i] = saved + h;
      const Evaluation plus = evaluate(f);
      data[i] = saved - h;
      const Evaluation minus = evaluate(f);
      data[i] = saved;
      if (plus.signature != minus.signature) {
        ++report.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_index = flat;
      }
    }
  }

  for (std::size_t k = 0; k < inputs.size(); ++k) inputs[k]->set_requires_grad(had_grad[k]);
  return report;
}

FiniteDiffReport finite_diff_check(const std::function<Var<double>(Graph<double>&, Var<double>)>& f,
                                   const Tensor<double>& x, double h) {
  Tensor<double> local = x;
  return finite_diff_check([&](Graph<double>& g) { return f(g, g.param(local)); }, {&local}, h);
}

}  // namespace capsworld::ad
