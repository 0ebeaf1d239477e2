#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace chom {

struct LbfgsOptions {
  int max_iterations = 500;
  int history = 10;
  /// Stop when the Euclidean gradient norm falls below this.
  double gradient_tolerance = 1e-8;
  /// Stop when an accepted step changes f by less than this times max(1, |f|).
  double value_tolerance = 1e-13;
};

struct LbfgsResult {
  double value = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string stop_reason;
};

/// f(x) with the gradient written to grad.
using GradientObjective = std::function<double(std::span<const double> x, std::span<double> grad)>;

/// Limited-memory BFGS with Armijo backtracking; x is updated in place.
/// Throws std::runtime_error when no finite value can be reached from x.
LbfgsResult minimize_lbfgs(const GradientObjective& f, std::vector<double>& x, const LbfgsOptions& options = {});

}  // namespace chom
