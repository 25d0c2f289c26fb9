#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "capsworld/autodiff.hpp"

namespace capsworld::ad {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +h and -h evaluations took different branches
  /// (relu side, max winner): the function is not differentiable there.
  std::size_t skipped = 0;
  /// Flat index (across all inputs, in order) of the worst coordinate.
  std::size_t worst_index = 0;
};

/// Scalar-valued computation. It must bind every checked tensor with
/// graph.param() so that backward() deposits into it.
using GraphFn = std::function<Var<double>(Graph<double>&)>;

/// Compares backward() against central differences (f(x+h e) - f(x-h e)) / 2h
/// for every coordinate of every input. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8). Throws NumericDomainError on non-finite
/// evaluations.
FiniteDiffReport finite_diff_check(const GraphFn& f, const std::vector<Tensor<double>*>& inputs, double h);

/// Single-input form: f receives the bound input.
FiniteDiffReport finite_diff_check(const std::function<Var<double>(Graph<double>&, Var<double>)>& f,
                                   const Tensor<double>& x, double h);

}  // namespace capsworld::ad
