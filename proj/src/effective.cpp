#include "chom/effective.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "chom/rng.h"

namespace chom {

CorrectorShape CorrectorShape::from_ratio(const BoxDomain& box, double support_ratio, double spacing) {
  if (!(support_ratio > 0.0 && support_ratio <= 1.0)) throw std::invalid_argument("support ratio must lie in (0, 1]");
  return {support_ratio * box.half_width, spacing};
}

// ---------------------------------------------------------------------------
// Objective

namespace {

// Evaluation nodes are the support box plus one ring, so the divergence
// telescopes to fluxes where grad_h g = 0; the flux needs one ring more and
// the central difference another.
constexpr int kPad = 3;

}  // namespace

VariationalObjective::VariationalObjective(const CoefficientField& field, const HamiltonianSpec& spec,
                                           const Vec& theta, const CorrectorShape& shape)
    : dim_(field.dimension()), h_(shape.spacing), half_width_(shape.half_width), theta_(theta), spec_(spec) {
  if (!(shape.spacing > 0.0) || !(shape.half_width > 0.0)) throw std::invalid_argument("invalid corrector shape");
  if (spec.kind == HamiltonianKind::kCustom) {
    throw std::invalid_argument("the variational objective needs dH/dp (quadratic or power kind)");
  }
  const double cells = 2.0 * shape.half_width / shape.spacing;
  if (std::abs(cells - std::round(cells)) > 1e-9 * cells) {
    throw std::invalid_argument("corrector half-width must be a multiple of the spacing");
  }
  spec_.nondivergence = false;
  n_ = static_cast<int>(std::lround(cells)) + 1;
  if (n_ < 3) throw std::invalid_argument("corrector grid needs at least 3 nodes per axis");
  np_ = n_ + 2 * kPad;
  std::size_t total = 1;
  for (int k = 0; k < dim_; ++k) {
    stride_[static_cast<std::size_t>(k)] = total;
    total *= static_cast<std::size_t>(np_);
  }
  field_.resize(total);
  drift_.assign(total, Vec{});
  a_.assign(total, 0.0);
  for (std::size_t i = 0; i < total; ++i) {
    bool flux = true, ring = true, inner = true;
    Vec y{};
    for (int k = 0; k < dim_; ++k) {
      const int c = static_cast<int>((i / stride_[static_cast<std::size_t>(k)]) % static_cast<std::size_t>(np_));
      flux = flux && c >= kPad - 2 && c < n_ + kPad + 2;
      ring = ring && c >= kPad - 1 && c < n_ + kPad + 1;
      inner = inner && c > kPad && c < n_ + kPad - 1;
      y[static_cast<std::size_t>(k)] = -half_width_ + (c - kPad) * h_;
    }
    if (!flux) continue;
    flux_nodes_.push_back(i);
    field_[i] = field.eval(y);
    drift_[i] = spec.drift(y);
    a_[i] = field_[i].a();
    if (ring && field.in_cluster(y)) eval_.push_back(i);
    if (inner) variables_.push_back(i);
  }
  if (eval_.empty()) throw std::invalid_argument("no in-cluster node in the corrector box");
}

namespace {

Vec padded_position(std::size_t i, int dim, int np, double w, double h) {
  Vec y{};
  std::size_t r = i;
  for (int k = 0; k < dim; ++k) {
    y[static_cast<std::size_t>(k)] = -w + (static_cast<int>(r % static_cast<std::size_t>(np)) - kPad) * h;
    r /= static_cast<std::size_t>(np);
  }
  return y;
}

}  // namespace

Vec VariationalObjective::variable_position(std::size_t v) const {
  return padded_position(variables_[v], dim_, np_, half_width_, h_);
}

Vec VariationalObjective::node_position(std::size_t e) const {
  return padded_position(eval_[e], dim_, np_, half_width_, h_);
}

void VariationalObjective::fill_padded(std::span<const double> g, std::vector<double>& padded) const {
  if (g.size() != variables_.size()) throw std::invalid_argument("corrector size does not match the shape");
  padded.assign(field_.size(), 0.0);
  for (std::size_t v = 0; v < variables_.size(); ++v) padded[variables_[v]] = g[v];
}

void VariationalObjective::node_terms(const std::vector<double>& padded, std::vector<double>& phi,
                                      std::vector<Vec>* dh, bool parallel) const {
  // p = theta + grad_h g and the flux a p on every node the divergence touches.
  std::vector<Vec> p(field_.size(), Vec{});
  const auto nf = static_cast<std::int64_t>(flux_nodes_.size());
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t s = 0; s < nf; ++s) {
    const std::size_t j = flux_nodes_[static_cast<std::size_t>(s)];
    Vec q = theta_;
    for (int k = 0; k < dim_; ++k) {
      const std::size_t st = stride_[static_cast<std::size_t>(k)];
      q[static_cast<std::size_t>(k)] += (padded[j + st] - padded[j - st]) / (2.0 * h_);
    }
    p[j] = q;
  }
  phi.resize(eval_.size());
  if (dh) dh->resize(eval_.size());
  const auto ne = static_cast<std::int64_t>(eval_.size());
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t s = 0; s < ne; ++s) {
    const auto e = static_cast<std::size_t>(s);
    const std::size_t i = eval_[e];
    double div = 0.0;
    for (int k = 0; k < dim_; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const std::size_t st = stride_[ks];
      div += (a_[i + st] * p[i + st][ks] - a_[i - st] * p[i - st][ks]) / (2.0 * h_);
    }
    phi[e] = 0.5 * div + hamiltonian(spec_, field_[i], drift_[i], p[i]);
    if (dh) (*dh)[e] = hamiltonian_gradient(spec_, field_[i], drift_[i], p[i]);
  }
}

std::vector<double> VariationalObjective::node_values(std::span<const double> g, bool parallel) const {
  std::vector<double> padded, phi;
  fill_padded(g, padded);
  node_terms(padded, phi, nullptr, parallel);
  return phi;
}

double VariationalObjective::hard_max(std::span<const double> g, bool parallel) const {
  const auto phi = node_values(g, parallel);
  return *std::max_element(phi.begin(), phi.end());
}

double VariationalObjective::softmax(std::span<const double> g, double beta, std::span<double> grad, bool parallel,
                                     double* hard_max_out) const {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  if (grad.size() != variables_.size()) throw std::invalid_argument("gradient size does not match the shape");
  std::vector<double> padded, phi;
  std::vector<Vec> dh;
  fill_padded(g, padded);
  node_terms(padded, phi, &dh, parallel);
  double top = -std::numeric_limits<double>::infinity();
  for (double v : phi) top = std::max(top, v);
  if (hard_max_out) *hard_max_out = top;
  if (!std::isfinite(top)) {
    std::fill(grad.begin(), grad.end(), 0.0);
    return top;
  }
  std::vector<double> w(field_.size(), 0.0);
  double sum = 0.0;
  for (std::size_t e = 0; e < eval_.size(); ++e) {
    const double x = std::exp(beta * (phi[e] - top));
    w[eval_[e]] = x;
    sum += x;
  }
  for (std::size_t i : eval_) w[i] /= sum;
  const double n = static_cast<double>(eval_.size());
  const double value = top + std::log(sum / n) / beta;

  // Adjoint of phi with respect to the discrete gradient at each core node,
  // then of the central difference with respect to g.
  std::vector<Vec> q(field_.size(), Vec{});
  std::vector<std::size_t> eval_slot(field_.size(), static_cast<std::size_t>(-1));
  for (std::size_t e = 0; e < eval_.size(); ++e) eval_slot[eval_[e]] = e;
  const auto nf = static_cast<std::int64_t>(flux_nodes_.size());
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t s = 0; s < nf; ++s) {
    const std::size_t j = flux_nodes_[static_cast<std::size_t>(s)];
    Vec r{};
    const std::size_t e = eval_slot[j];
    for (int k = 0; k < dim_; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const std::size_t st = stride_[ks];
      double v = e != static_cast<std::size_t>(-1) ? w[j] * dh[e][ks] : 0.0;
      v += a_[j] / (4.0 * h_) * (w[j - st] - w[j + st]);
      r[ks] = v;
    }
    q[j] = r;
  }
  const auto nv = static_cast<std::int64_t>(variables_.size());
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t s = 0; s < nv; ++s) {
    const std::size_t v = variables_[static_cast<std::size_t>(s)];
    double acc = 0.0;
    for (int k = 0; k < dim_; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const std::size_t st = stride_[ks];
      acc += (q[v - st][ks] - q[v + st][ks]) / (2.0 * h_);
    }
    grad[static_cast<std::size_t>(s)] = acc;
  }
  return value;
}

std::vector<double> VariationalObjective::expand(std::span<const double> g) const {
  std::vector<double> padded;
  fill_padded(g, padded);
  std::size_t total = 1;
  for (int k = 0; k < dim_; ++k) total *= static_cast<std::size_t>(n_);
  std::vector<double> out(total, 0.0);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t r = i, pi = 0;
    for (int k = 0; k < dim_; ++k) {
      pi += (r % static_cast<std::size_t>(n_) + kPad) * stride_[static_cast<std::size_t>(k)];
      r /= static_cast<std::size_t>(n_);
    }
    out[i] = padded[pi];
  }
  return out;
}

VariationalResult variational_Hbar(const CoefficientField& field, const HamiltonianSpec& spec, const Vec& theta,
                                   const CorrectorShape& shape, const OptimizerConfig& config,
                                   std::span<const double> initial) {
  if (config.beta_schedule.empty()) throw std::invalid_argument("empty beta schedule");
  VariationalObjective obj(field, spec, theta, shape);
  std::vector<double> x(obj.variable_count(), 0.0);
  if (!initial.empty()) {
    if (initial.size() != x.size()) throw std::invalid_argument("initial corrector size does not match the shape");
    x.assign(initial.begin(), initial.end());
  }
  VariationalResult result;
  result.theta = theta;
  result.node_count = obj.node_count();
  result.variable_count = obj.variable_count();
  result.zero_corrector_value = obj.hard_max(std::vector<double>(x.size(), 0.0), config.parallel);
  result.value = obj.hard_max(x, config.parallel);
  result.corrector = x;
  result.selected_stage = -1;
  const double logn = std::log(static_cast<double>(obj.node_count()));
  for (double beta : config.beta_schedule) {
    AnnealingStage stage;
    stage.beta = beta;
    double last = std::numeric_limits<double>::quiet_NaN();
    const GradientObjective fn = [&](std::span<const double> g, std::span<double> grad) {
      double top = 0.0;
      const double s = obj.softmax(g, beta, grad, config.parallel, &top);
      const double tol = 1e-12 * std::max(1.0, std::abs(top));
      if (!(s <= top + tol && top <= s + logn / beta + tol)) stage.sandwich_holds = false;
      last = s;
      return s;
    };
    LbfgsResult r;
    try {
      r = minimize_lbfgs(fn, x, config.lbfgs);
    } catch (const std::runtime_error& e) {
      throw OptimizerDivergence(fmt::format("optimizer diverged at beta = {}: {}", beta, e.what()), x, last);
    }
    if (!std::isfinite(r.value)) throw OptimizerDivergence("optimizer reached a non-finite objective", x, r.value);
    stage.softmax = r.value;
    stage.hard_max = obj.hard_max(x, config.parallel);
    stage.iterations = r.iterations;
    stage.gradient_norm = r.gradient_norm;
    stage.converged = r.converged;
    result.sandwich_holds = result.sandwich_holds && stage.sandwich_holds;
    result.stages.push_back(stage);
    if (stage.hard_max < result.value) {
      result.value = stage.hard_max;
      result.corrector = x;
      result.selected_stage = static_cast<int>(result.stages.size()) - 1;
    }
  }
  return result;
}

GradientCheck check_objective_gradient(const VariationalObjective& objective, std::span<const double> g, double beta,
                                       std::size_t probes, std::uint64_t seed, double step, double floor) {
  const std::size_t n = objective.variable_count();
  std::vector<double> grad(n), scratch(n), x(g.begin(), g.end());
  objective.softmax(g, beta, grad);
  Philox rng(seed, 0x6A7D);
  GradientCheck out;
  std::vector<double> dir(n);
  for (std::size_t p = 0; p < probes; ++p) {
    double norm = 0.0;
    for (double& v : dir) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    double exact = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dir[i] /= norm;
      exact += grad[i] * dir[i];
    }
    for (std::size_t i = 0; i < n; ++i) x[i] = g[i] + step * dir[i];
    const double fp = objective.softmax(x, beta, scratch);
    for (std::size_t i = 0; i < n; ++i) x[i] = g[i] - step * dir[i];
    const double fm = objective.softmax(x, beta, scratch);
    const double fd = (fp - fm) / (2.0 * step);
    out.max_relative_error =
        std::max(out.max_relative_error, std::abs(fd - exact) / std::max(std::abs(exact), floor));
    ++out.probes;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tables

const char* to_string(HbarMethod m) {
  switch (m) {
    case HbarMethod::kVariational: return "variational";
    case HbarMethod::kFeynmanKac: return "feynman_kac";
    case HbarMethod::kAnalytic: return "analytic";
  }
  return "unknown";
}

ThetaGrid ThetaGrid::cartesian(int dimension, double half_width, int per_axis) {
  check_dimension(dimension);
  if (per_axis < 2 || !(half_width > 0.0)) throw std::invalid_argument("invalid Cartesian theta grid");
  ThetaGrid g;
  g.kind = ThetaGridKind::kCartesian;
  g.dimension = dimension;
  g.per_axis = per_axis;
  g.half_width = half_width;
  g.spacing = 2.0 * half_width / (per_axis - 1);
  std::size_t total = 1;
  for (int k = 0; k < dimension; ++k) total *= static_cast<std::size_t>(per_axis);
  for (std::size_t i = 0; i < total; ++i) {
    Vec t{};
    std::size_t r = i;
    for (int k = 0; k < dimension; ++k) {
      const auto c = static_cast<int>(r % static_cast<std::size_t>(per_axis));
      // Symmetric node placement so that theta and -theta are both exact.
      t[static_cast<std::size_t>(k)] = (2 * c - (per_axis - 1)) * (half_width / (per_axis - 1));
      r /= static_cast<std::size_t>(per_axis);
    }
    g.points.push_back(t);
  }
  return g;
}

ThetaGrid ThetaGrid::polar(int directions, std::vector<double> radii) {
  if (directions < 1 || radii.empty()) throw std::invalid_argument("invalid polar theta grid");
  if (!std::is_sorted(radii.begin(), radii.end()) || radii.front() <= 0.0) {
    throw std::invalid_argument("polar radii must be positive and increasing");
  }
  ThetaGrid g;
  g.kind = ThetaGridKind::kPolar;
  g.dimension = 2;
  g.directions = directions;
  g.radii = std::move(radii);
  for (int j = 0; j < directions; ++j) {
    const double phi = 2.0 * std::numbers::pi * j / directions;
    // Exact axis values for the coordinate directions.
    const double c = (4 * j) % directions == 0 ? std::round(std::cos(phi)) : std::cos(phi);
    const double s = (4 * j) % directions == 0 ? std::round(std::sin(phi)) : std::sin(phi);
    for (double r : g.radii) g.points.push_back(make_vec(r * c, r * s));
  }
  return g;
}

ThetaGrid ThetaGrid::list(int dimension, std::vector<Vec> points) {
  check_dimension(dimension);
  ThetaGrid g;
  g.kind = ThetaGridKind::kList;
  g.dimension = dimension;
  g.points = std::move(points);
  return g;
}

EffectiveHamiltonianTable analytic_table(const ThetaGrid& grid, const std::function<double(const Vec&)>& Hbar) {
  EffectiveHamiltonianTable t;
  t.grid = grid;
  t.method = HbarMethod::kAnalytic;
  for (const auto& th : grid.points) t.values.push_back(Hbar(th));
  t.errors.assign(t.values.size(), 0.0);
  return t;
}

EffectiveHamiltonianTable variational_table(const CoefficientField& field, const HamiltonianSpec& spec,
                                            const ThetaGrid& grid, const CorrectorShape& shape,
                                            const OptimizerConfig& config, std::vector<VariationalResult>* details) {
  EffectiveHamiltonianTable t;
  t.grid = grid;
  t.method = HbarMethod::kVariational;
  const std::size_t n = grid.points.size();
  std::vector<VariationalResult> results(n);
  OptimizerConfig inner = config;
  inner.parallel = false;
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic) if (config.parallel)
  for (std::int64_t s = 0; s < static_cast<std::int64_t>(n); ++s) {
    try {
      results[static_cast<std::size_t>(s)] =
          variational_Hbar(field, spec, grid.points[static_cast<std::size_t>(s)], shape, inner);
    } catch (...) {
#pragma omp critical(chom_variational_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  for (const auto& r : results) {
    t.values.push_back(r.value);
    // The gap between the last soft max and the hard max bounds the annealing error.
    t.errors.push_back(r.stages.back().hard_max - r.stages.back().softmax);
  }
  if (details) *details = std::move(results);
  return t;
}

EffectiveHamiltonianTable feynman_kac_table(const CoefficientField& field, const DriftField& b, const ThetaGrid& grid,
                                            const Vec& x0, const EnsembleOptions& ensemble, int blocks) {
  EnsembleOptions opts = ensemble;
  opts.normalization = Normalization::kGenerator;
  const auto ens = simulate_ensemble(field, Control::feedback(b), x0, opts);
  EffectiveHamiltonianTable t;
  t.grid = grid;
  t.method = HbarMethod::kFeynmanKac;
  for (const auto& th : grid.points) {
    const auto est = feynman_kac_Hbar(ens, th, blocks);
    t.values.push_back(est.value);
    t.errors.push_back(est.standard_error);
  }
  return t;
}

namespace {

// Index triples (i0, i1, i2) of consecutive points on grid lines with their line coordinates.
struct LineTriple {
  std::size_t i[3];
  double t[3];
};

std::vector<LineTriple> line_triples(const ThetaGrid& g) {
  std::vector<LineTriple> out;
  if (g.kind == ThetaGridKind::kCartesian) {
    const auto n = static_cast<std::size_t>(g.per_axis);
    for (std::size_t i = 0; i < g.points.size(); ++i) {
      std::size_t stride = 1;
      for (int k = 0; k < g.dimension; ++k) {
        const std::size_t c = (i / stride) % n;
        if (c >= 1 && c + 1 < n) {
          out.push_back({{i - stride, i, i + stride}, {-g.spacing, 0.0, g.spacing}});
        }
        stride *= n;
      }
    }
  } else if (g.kind == ThetaGridKind::kPolar) {
    const auto nr = g.radii.size();
    const int D = g.directions;
    for (int j = 0; j < D; ++j) {
      // Diameter through the origin when the opposite ray exists, else the ray itself.
      std::vector<std::pair<double, std::size_t>> line;
      for (std::size_t r = 0; r < nr; ++r) line.push_back({g.radii[r], static_cast<std::size_t>(j) * nr + r});
      if (D % 2 == 0) {
        if (j >= D / 2) continue;
        const auto jo = static_cast<std::size_t>(j + D / 2);
        for (std::size_t r = 0; r < nr; ++r) line.push_back({-g.radii[r], jo * nr + r});
      }
      std::sort(line.begin(), line.end());
      for (std::size_t k = 1; k + 1 < line.size(); ++k) {
        out.push_back({{line[k - 1].second, line[k].second, line[k + 1].second},
                       {line[k - 1].first, line[k].first, line[k + 1].first}});
      }
    }
  }
  return out;
}

}  // namespace

ConvexityReport check_convexity(const EffectiveHamiltonianTable& table, double slack) {
  ConvexityReport rep;
  for (const auto& tr : line_triples(table.grid)) {
    const double lambda = (tr.t[2] - tr.t[1]) / (tr.t[2] - tr.t[0]);
    const double chord = lambda * table.values[tr.i[0]] + (1.0 - lambda) * table.values[tr.i[2]];
    const double e0 = table.errors[tr.i[0]], e1 = table.errors[tr.i[1]], e2 = table.errors[tr.i[2]];
    const double tol =
        3.0 * std::sqrt(e1 * e1 + lambda * lambda * e0 * e0 + (1.0 - lambda) * (1.0 - lambda) * e2 * e2) + slack;
    const double excess = table.values[tr.i[1]] - chord - tol;
    ++rep.lines_checked;
    if (excess > 0.0) {
      rep.convex = false;
      rep.worst_violation = std::max(rep.worst_violation, excess);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Legendre transform

namespace {

// Largest distance from a point of the grid's hull to the nearest grid point.
double covering_radius(const ThetaGrid& g) {
  if (g.kind == ThetaGridKind::kCartesian) return 0.5 * g.spacing * std::sqrt(static_cast<double>(g.dimension));
  if (g.kind == ThetaGridKind::kPolar) {
    const double arc = std::sin(std::numbers::pi / g.directions);
    double rho = g.radii.front();
    for (std::size_t k = 0; k < g.radii.size(); ++k) {
      const double gap = k + 1 < g.radii.size() ? 0.5 * (g.radii[k + 1] - g.radii[k]) : 0.0;
      const double r = k + 1 < g.radii.size() ? g.radii[k + 1] : g.radii[k];
      rho = std::max(rho, std::hypot(gap, r * arc));
    }
    return rho;
  }
  return 0.0;
}

bool on_grid_boundary(const ThetaGrid& g, std::size_t i) {
  if (g.kind == ThetaGridKind::kCartesian) {
    for (int k = 0; k < g.dimension; ++k)
      if (std::abs(std::abs(g.points[i][static_cast<std::size_t>(k)]) - g.half_width) <= 1e-12 * g.half_width)
        return true;
    return false;
  }
  if (g.kind == ThetaGridKind::kPolar) return i % g.radii.size() == g.radii.size() - 1;
  return false;
}

double table_lipschitz(const EffectiveHamiltonianTable& t) {
  double lip = 0.0;
  const auto& g = t.grid;
  if (g.kind == ThetaGridKind::kCartesian) {
    const auto n = static_cast<std::size_t>(g.per_axis);
    for (std::size_t i = 0; i < g.points.size(); ++i) {
      std::size_t stride = 1;
      for (int k = 0; k < g.dimension; ++k) {
        if ((i / stride) % n + 1 < n) lip = std::max(lip, std::abs(t.values[i + stride] - t.values[i]) / g.spacing);
        stride *= n;
      }
    }
    return lip;
  }
  for (std::size_t i = 0; i < g.points.size(); ++i)
    for (std::size_t j = i + 1; j < g.points.size(); ++j) {
      const double d = distance(g.points[i], g.points[j]);
      if (d > 0.0) lip = std::max(lip, std::abs(t.values[i] - t.values[j]) / d);
    }
  return lip;
}

}  // namespace

RateFunctionTable legendre_transform(const EffectiveHamiltonianTable& table, const ThetaGrid& ygrid) {
  if (table.size() == 0) throw std::invalid_argument("empty effective Hamiltonian table");
  RateFunctionTable rate;
  rate.grid = ygrid;
  rate.convex_input = check_convexity(table).convex;
  rate.lipschitz = table_lipschitz(table);
  const double rho = covering_radius(table.grid);
  const auto ny = static_cast<std::int64_t>(ygrid.points.size());
  rate.values.resize(ygrid.points.size());
  rate.modulus.resize(ygrid.points.size());
  rate.boundary_maximizer.resize(ygrid.points.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < ny; ++s) {
    const auto j = static_cast<std::size_t>(s);
    const Vec& y = ygrid.points[j];
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < table.size(); ++i) {
      const double v = dot(table.theta(i), y) - table.values[i];
      if (v > best) {
        best = v;
        arg = i;
      }
    }
    rate.values[j] = best;
    rate.modulus[j] = (norm(y) + rate.lipschitz) * rho;
    rate.boundary_maximizer[j] = on_grid_boundary(table.grid, arg) ? 1 : 0;
  }
  return rate;
}

RateFunctionTable legendre_transform(const EffectiveHamiltonianTable& table) {
  const double lip = table_lipschitz(table);
  const int per_axis = table.grid.kind == ThetaGridKind::kCartesian ? table.grid.per_axis : 41;
  return legendre_transform(table, ThetaGrid::cartesian(table.grid.dimension, std::max(lip, 1e-6), per_axis));
}

EffectiveHamiltonianTable legendre_dual(const RateFunctionTable& rate, const ThetaGrid& thetas) {
  EffectiveHamiltonianTable t;
  t.grid = thetas;
  t.method = HbarMethod::kAnalytic;
  for (const auto& th : thetas.points) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rate.size(); ++j) {
      if (std::isfinite(rate.values[j])) best = std::max(best, dot(th, rate.velocity(j)) - rate.values[j]);
    }
    t.values.push_back(best);
  }
  t.errors.assign(t.values.size(), 0.0);
  return t;
}

HopfLaxValue hopf_lax(const std::function<double(const Vec&)>& f, const RateFunctionTable& rate, double t,
                      const Vec& x) {
  if (!(t > 0.0)) throw std::invalid_argument("hopf_lax needs t > 0");
  HopfLaxValue out;
  out.value = -std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t j = 0; j < rate.size(); ++j) {
    if (!std::isfinite(rate.values[j])) continue;
    const Vec y = x + t * rate.velocity(j);
    const double v = f(y) - t * rate.values[j];
    if (v > out.value) {
      out.value = v;
      out.maximizer = y;
      arg = j;
    }
  }
  out.boundary_maximizer = on_grid_boundary(rate.grid, arg);
  return out;
}

// ---------------------------------------------------------------------------
// Equivalence

EquivalenceReport equivalence_check(const CoefficientField& field, const DriftField& b, const ThetaGrid& thetas,
                                    const EquivalenceOptions& options) {
  const auto spec = HamiltonianSpec::quadratic(b);
  const auto fk = feynman_kac_table(field, b, thetas, options.x0, options.ensemble, options.blocks);
  const auto var = variational_table(field, spec, thetas, options.shape, options.optimizer);
  EquivalenceReport rep;
  for (std::size_t i = 0; i < thetas.points.size(); ++i) {
    EquivalenceRow row;
    row.theta = thetas.points[i];
    row.feynman_kac = fk.values[i];
    row.feynman_kac_error = fk.errors[i];
    row.variational = var.values[i];
    row.gap = row.variational - row.feynman_kac;
    row.holds = row.feynman_kac - 3.0 * row.feynman_kac_error <= row.variational;
    const double scale = std::max({std::abs(row.variational), std::abs(row.feynman_kac), 1e-3});
    row.finite_size = std::abs(row.gap) > 0.25 * scale;
    rep.all_hold = rep.all_hold && row.holds;
    rep.rows.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Output

namespace {

std::string vec_columns(const std::string& prefix, int d) {
  std::string s;
  for (int k = 0; k < d; ++k) s += fmt::format("{}_{},", prefix, k + 1);
  return s;
}

std::string vec_values(const Vec& v, int d) {
  std::string s;
  for (int k = 0; k < d; ++k) s += fmt::format("{:.17g},", v[static_cast<std::size_t>(k)]);
  return s;
}

}  // namespace

std::string table_csv(const EffectiveHamiltonianTable& table) {
  const int d = table.grid.dimension;
  std::string out = vec_columns("theta", d) + "value,error,method\n";
  for (std::size_t i = 0; i < table.size(); ++i) {
    out += vec_values(table.theta(i), d) +
           fmt::format("{:.17g},{:.17g},{}\n", table.values[i], table.errors[i], to_string(table.method));
  }
  return out;
}

std::string table_json(const EffectiveHamiltonianTable& table) {
  nlohmann::json j;
  j["version"] = 1;
  j["method"] = to_string(table.method);
  j["dimension"] = table.grid.dimension;
  const char* kinds[] = {"cartesian", "polar", "list"};
  j["grid"] = {{"kind", kinds[static_cast<int>(table.grid.kind)]}};
  if (table.grid.kind == ThetaGridKind::kCartesian) {
    j["grid"]["per_axis"] = table.grid.per_axis;
    j["grid"]["half_width"] = table.grid.half_width;
  } else if (table.grid.kind == ThetaGridKind::kPolar) {
    j["grid"]["directions"] = table.grid.directions;
    j["grid"]["radii"] = table.grid.radii;
  }
  auto& th = j["thetas"] = nlohmann::json::array();
  for (const auto& t : table.grid.points) th.push_back(std::vector<double>(t.begin(), t.begin() + table.grid.dimension));
  j["values"] = table.values;
  j["errors"] = table.errors;
  return j.dump(2);
}

std::string rate_csv(const RateFunctionTable& rate) {
  const int d = rate.grid.dimension;
  std::string out = vec_columns("y", d) + "value,modulus,boundary\n";
  for (std::size_t i = 0; i < rate.size(); ++i) {
    out += vec_values(rate.velocity(i), d) +
           fmt::format("{:.17g},{:.17g},{}\n", rate.values[i], rate.modulus[i], int(rate.boundary_maximizer[i]));
  }
  return out;
}

std::string equivalence_csv(const EquivalenceReport& report) {
  std::string out = "theta_1,theta_2,feynman_kac,feynman_kac_error,variational,gap,holds,finite_size\n";
  for (const auto& r : report.rows) {
    out += fmt::format("{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{},{}\n", r.theta[0], r.theta[1],
                       r.feynman_kac, r.feynman_kac_error, r.variational, r.gap, int(r.holds), int(r.finite_size));
  }
  return out;
}

std::string table_svg(std::span<const EffectiveHamiltonianTable> tables) {
  struct Series {
    std::string label;
    std::vector<std::pair<double, double>> pts;
  };
  std::vector<Series> series;
  for (const auto& t : tables) {
    const auto& g = t.grid;
    if (g.kind == ThetaGridKind::kPolar) {
      for (int j = 0; j < g.directions; ++j) {
        Series s{fmt::format("{} dir {}", to_string(t.method), j), {}};
        for (std::size_t r = 0; r < g.radii.size(); ++r)
          s.pts.push_back({g.radii[r], t.values[static_cast<std::size_t>(j) * g.radii.size() + r]});
        series.push_back(std::move(s));
      }
    } else {
      // Points on each coordinate axis, against the signed coordinate.
      for (int k = 0; k < g.dimension; ++k) {
        Series s{fmt::format("{} axis {}", to_string(t.method), k + 1), {}};
        for (std::size_t i = 0; i < t.size(); ++i) {
          const Vec& th = t.theta(i);
          bool on_axis = true;
          for (int l = 0; l < g.dimension; ++l)
            if (l != k && th[static_cast<std::size_t>(l)] != 0.0) on_axis = false;
          if (on_axis) s.pts.push_back({th[static_cast<std::size_t>(k)], t.values[i]});
        }
        std::sort(s.pts.begin(), s.pts.end());
        if (!s.pts.empty()) series.push_back(std::move(s));
      }
    }
  }
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (auto [x, y] : s.pts) {
      if (!std::isfinite(y)) continue;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (!(x1 > x0)) x0 -= 1, x1 += 1;
  if (!(y1 > y0)) y0 -= 1, y1 += 1;
  const double W = 640, H = 420, m = 50;
  auto sx = [&](double x) { return m + (x - x0) / (x1 - x0) * (W - 2 * m); };
  auto sy = [&](double y) { return H - m - (y - y0) / (y1 - y0) * (H - 2 * m); };
  std::ostringstream os;
  os << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n", W, H);
  os << fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", m, m,
                    W - 2 * m, H - 2 * m);
  os << fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"12\">|theta| in [{:.3g}, {:.3g}]</text>\n", m, H - 15, x0, x1);
  os << fmt::format("<text x=\"5\" y=\"{}\" font-size=\"12\">H-bar in [{:.3g}, {:.3g}]</text>\n", m - 10, y0, y1);
  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::string pts;
    for (auto [x, y] : series[k].pts)
      if (std::isfinite(y)) pts += fmt::format("{:.2f},{:.2f} ", sx(x), sy(y));
    os << fmt::format("<polyline fill=\"none\" stroke=\"{}\" points=\"{}\"><title>{}</title></polyline>\n",
                      colors[k % 8], pts, series[k].label);
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace chom
