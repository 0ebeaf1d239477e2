#include "chom/lbfgs.h"

#include <cmath>
#include <deque>
#include <numeric>
#include <stdexcept>

namespace chom {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

struct Pair {
  std::vector<double> s, y;
  double rho;
};

// Two-loop recursion: d = -H g.
void direction(const std::deque<Pair>& memory, std::span<const double> g, std::vector<double>& d) {
  d.assign(g.begin(), g.end());
  std::vector<double> alpha(memory.size());
  for (std::size_t k = memory.size(); k-- > 0;) {
    alpha[k] = memory[k].rho * dot(memory[k].s, d);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= alpha[k] * memory[k].y[i];
  }
  if (!memory.empty()) {
    const auto& last = memory.back();
    const double gamma = dot(last.s, last.y) / dot(last.y, last.y);
    for (double& v : d) v *= gamma;
  }
  for (std::size_t k = 0; k < memory.size(); ++k) {
    const double beta = memory[k].rho * dot(memory[k].y, d);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += (alpha[k] - beta) * memory[k].s[i];
  }
  for (double& v : d) v = -v;
}

}  // namespace

LbfgsResult minimize_lbfgs(const GradientObjective& f, std::vector<double>& x, const LbfgsOptions& options) {
  const std::size_t n = x.size();
  LbfgsResult r;
  std::vector<double> g(n), trial(n), gtrial(n), d;
  double fx = f(x, g);
  ++r.evaluations;
  if (!std::isfinite(fx)) throw std::runtime_error("objective is not finite at the starting point");
  std::deque<Pair> memory;
  r.value = fx;
  for (; r.iterations < options.max_iterations; ++r.iterations) {
    r.gradient_norm = std::sqrt(dot(g, g));
    if (r.gradient_norm <= options.gradient_tolerance) {
      r.converged = true;
      r.stop_reason = "gradient";
      return r;
    }
    direction(memory, g, d);
    double slope = dot(g, d);
    if (!(slope < 0.0)) {
      memory.clear();
      direction(memory, g, d);
      slope = dot(g, d);
    }
    double step = memory.empty() ? std::min(1.0, 1.0 / r.gradient_norm) : 1.0;
    bool accepted = false;
    double ftrial = 0.0;
    for (int bt = 0; bt < 60; ++bt) {
      for (std::size_t i = 0; i < n; ++i) trial[i] = x[i] + step * d[i];
      ftrial = f(trial, gtrial);
      ++r.evaluations;
      if (std::isfinite(ftrial) && ftrial <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!memory.empty()) {
        memory.clear();
        continue;
      }
      r.stop_reason = "line search";
      r.converged = r.gradient_norm <= 1e3 * options.gradient_tolerance;
      return r;
    }
    Pair p{std::vector<double>(n), std::vector<double>(n), 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      p.s[i] = trial[i] - x[i];
      p.y[i] = gtrial[i] - g[i];
    }
    const double sy = dot(p.s, p.y);
    if (sy > 1e-12 * std::sqrt(dot(p.s, p.s) * dot(p.y, p.y))) {
      p.rho = 1.0 / sy;
      memory.push_back(std::move(p));
      if (static_cast<int>(memory.size()) > options.history) memory.pop_front();
    }
    const double change = fx - ftrial;
    x.swap(trial);
    g.swap(gtrial);
    fx = ftrial;
    r.value = fx;
    if (change <= options.value_tolerance * std::max(1.0, std::abs(fx))) {
      ++r.iterations;
      r.gradient_norm = std::sqrt(dot(g, g));
      r.converged = true;
      r.stop_reason = "value";
      return r;
    }
  }
  r.gradient_norm = std::sqrt(dot(g, g));
  r.stop_reason = "iterations";
  return r;
}

}  // namespace chom
