#include "chom/hjb.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include <fmt/format.h>

namespace chom {

namespace {

constexpr char kSnapshotMagic[8] = {'C', 'H', 'O', 'M', 'S', 'N', 'P', '1'};

template <typename T>
void put(std::vector<char>& out, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const char> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw std::runtime_error("truncated snapshot");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

Grid::Grid(const CoefficientField& field, double epsilon, const GridSpec& spec)
    : field_(&field), epsilon_(epsilon), spec_(spec) {
  check_dimension(spec.dimension);
  if (spec.dimension != field.dimension()) throw std::invalid_argument("grid and field dimensions differ");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (!(spec.spacing > 0.0) || !(spec.half_width > 0.0)) throw std::invalid_argument("invalid grid spacing or width");
  const double cells = 2.0 * spec.half_width / spec.spacing;
  if (std::abs(cells - std::round(cells)) > 1e-9 * cells) {
    throw std::invalid_argument("2 * half_width must be a multiple of the spacing");
  }
  n_ = static_cast<int>(std::round(cells)) + 1;
  if (n_ < 3) throw std::invalid_argument("grid needs at least 3 nodes per axis");
  std::size_t total = 1;
  for (int k = 0; k < spec.dimension; ++k) {
    strides_[static_cast<std::size_t>(k)] = total;
    total *= static_cast<std::size_t>(n_);
  }
  kinds_.resize(total);
  for (std::size_t i = 0; i < total; ++i) {
    bool outer = false;
    for (int k = 0; k < spec.dimension; ++k) {
      const auto c = (i / strides_[static_cast<std::size_t>(k)]) % static_cast<std::size_t>(n_);
      outer = outer || c == 0 || c + 1 == static_cast<std::size_t>(n_);
    }
    if (outer) {
      kinds_[i] = NodeKind::kOuter;
    } else if (field.in_cluster(environment_position(i))) {
      kinds_[i] = NodeKind::kInterior;
      interior_.push_back(i);
    } else {
      kinds_[i] = NodeKind::kExterior;
    }
  }
}

Vec Grid::position(std::size_t i) const {
  Vec x{};
  for (int k = 0; k < spec_.dimension; ++k) {
    const auto c = (i / strides_[static_cast<std::size_t>(k)]) % static_cast<std::size_t>(n_);
    x[static_cast<std::size_t>(k)] = -spec_.half_width + static_cast<double>(c) * spec_.spacing;
  }
  return x;
}

std::size_t Grid::nearest(const Vec& x) const {
  std::size_t idx = 0;
  for (int k = 0; k < spec_.dimension; ++k) {
    const double c = std::round((x[static_cast<std::size_t>(k)] + spec_.half_width) / spec_.spacing);
    const auto ci = static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(n_ - 1)));
    idx += ci * strides_[static_cast<std::size_t>(k)];
  }
  return idx;
}

std::vector<std::size_t> Grid::nodes_within(double w) const {
  std::vector<std::size_t> out;
  for (std::size_t i : interior_)
    if (norm_inf(position(i)) <= w + 1e-12) out.push_back(i);
  return out;
}

void Grid::check_mask(const ClusterGraph& graph, int component) const {
  for (std::size_t i = 0; i < size(); ++i) {
    if (kinds_[i] == NodeKind::kOuter) continue;
    const bool inside = contains(graph, component, environment_position(i));
    if (inside != (kinds_[i] == NodeKind::kInterior)) {
      throw std::logic_error(fmt::format("mask/cluster mismatch at node {}", i));
    }
  }
}

const char* to_string(SchemeVariant v) {
  return v == SchemeVariant::kLaxFriedrichs ? "lax_friedrichs" : "upwind_divergence";
}

SchemeVariant scheme_variant_from_string(const std::string& s) {
  if (s == "lax_friedrichs") return SchemeVariant::kLaxFriedrichs;
  if (s == "upwind_divergence") return SchemeVariant::kUpwindDivergence;
  throw std::invalid_argument("unknown scheme variant: " + s);
}

HjbStepper::HjbStepper(const Grid& grid, const HamiltonianSpec& spec, const SolverOptions& options)
    : grid_(&grid), spec_(spec), options_(options) {
  if (!(options.cfl > 0.0 && options.cfl <= 0.5)) throw std::invalid_argument("cfl must lie in (0, 1/2]");
  spec_.nondivergence = options.variant == SchemeVariant::kLaxFriedrichs;
  count_deficits_ = spec.kind != HamiltonianKind::kCustom;
  if (!count_deficits_ && !options.global_dissipation) {
    throw std::invalid_argument("custom Hamiltonians need a global dissipation constant");
  }
  const int dim = grid.dimension();
  const double h = grid.spacing();
  const auto& nodes = grid.interior();
  field_.resize(nodes.size());
  drift_.resize(nodes.size());
  base_rate_.resize(nodes.size());
  alpha_.assign(nodes.size() * kMaxDim, 0.0);
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    const Vec y = grid.environment_position(nodes[j]);
    field_[j] = grid.field().eval(y);
    drift_[j] = spec.drift(y);
    double rate = 0.0;
    for (int k = 0; k < dim; ++k) {
      rate += grid.epsilon() * field_[j].a() / (h * h);
      if (options.variant == SchemeVariant::kUpwindDivergence) {
        rate += std::abs(0.5 * field_[j].div_a()[static_cast<std::size_t>(k)]) / h;
      }
    }
    base_rate_[j] = rate;
  }
}

double HjbStepper::local_gradient(std::size_t i, std::span<const double> u) const {
  const Grid& g = *grid_;
  double best = 0.0;
  for (int k = 0; k < g.dimension(); ++k) {
    const std::size_t s = g.stride(k);
    best = std::max(best, std::max(std::abs(u[i + s] - u[i]), std::abs(u[i] - u[i - s])) / g.spacing());
  }
  return best;
}

double HjbStepper::prepare(std::span<const double> u, std::span<const double> other) {
  const Grid& g = *grid_;
  if (u.size() != g.size() || (!other.empty() && other.size() != g.size())) {
    throw std::invalid_argument("iterate size does not match the grid");
  }
  const int dim = g.dimension();
  const double h = g.spacing();
  const auto& nodes = g.interior();
  const auto m = static_cast<std::int64_t>(nodes.size());
  std::vector<double> rates(nodes.size());
#pragma omp parallel for schedule(static) if (options_.parallel)
  for (std::int64_t js = 0; js < m; ++js) {
    const auto j = static_cast<std::size_t>(js);
    Vec alpha{};
    if (options_.global_dissipation) {
      alpha.fill(*options_.global_dissipation);
    } else {
      double P = 0.0;
      if (options_.gradient_bound) {
        P = *options_.gradient_bound;
      } else {
        P = local_gradient(nodes[j], u);
        if (!other.empty()) P = std::max(P, local_gradient(nodes[j], other));
      }
      alpha = hamiltonian_p_lipschitz(spec_, field_[j], drift_[j], P, dim);
    }
    double rate = base_rate_[j];
    for (int k = 0; k < dim; ++k) {
      alpha_[j * kMaxDim + static_cast<std::size_t>(k)] = alpha[static_cast<std::size_t>(k)];
      rate += alpha[static_cast<std::size_t>(k)] / h;
    }
    rates[j] = rate;
  }
  max_rate_ = 0.0;
  for (double r : rates) max_rate_ = std::max(max_rate_, r);
  if (!std::isfinite(max_rate_)) throw std::runtime_error("non-finite values in the HJB iterate");
  dt_ = max_rate_ > 0.0 ? options_.cfl / max_rate_ : std::numeric_limits<double>::infinity();
  return dt_;
}

void HjbStepper::set_dt(double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (dt * max_rate_ > 1.0) {
    throw CflViolation(fmt::format(
        "dt * max_i sum_k (eps a_i / h^2 + alpha_ik / h) = {:.6g} > 1: the explicit step is not monotone",
        dt * max_rate_));
  }
  dt_ = dt;
}

double HjbStepper::update_interior(std::size_t j, std::span<const double> u, std::size_t* deficits) const {
  const Grid& g = *grid_;
  const std::size_t i = g.interior()[j];
  const int dim = g.dimension();
  const double h = g.spacing();
  const double ui = u[i];
  const FieldPoint& fp = field_[j];
  const double diffusion = g.epsilon() * fp.a() / (2.0 * h * h);
  Vec p{};
  double second = 0.0;
  double dissipation = 0.0;
  double upwind = 0.0;
  for (int k = 0; k < dim; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const std::size_t s = g.stride(k);
    const double up = u[i + s];
    const double down = u[i - s];
    const double d2 = up - 2.0 * ui + down;
    p[ks] = (up - down) / (2.0 * h);
    second += diffusion * d2;
    dissipation += alpha_[j * kMaxDim + ks] * d2 / (2.0 * h);
    if (options_.variant == SchemeVariant::kUpwindDivergence) {
      const double v = 0.5 * fp.div_a()[ks];
      upwind += v > 0.0 ? v * (up - ui) / h : v * (ui - down) / h;
    }
  }
  const double ham = hamiltonian(spec_, fp, drift_[j], p);
  if (deficits && count_deficits_) {
    const Vec grad = hamiltonian_gradient(spec_, fp, drift_[j], p);
    for (int k = 0; k < dim; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      if (std::abs(grad[ks]) > alpha_[j * kMaxDim + ks] * (1.0 + 1e-12) + 1e-300) ++*deficits;
    }
  }
  return ui + dt_ * (second + ham + upwind + dissipation);
}

double HjbStepper::update_node(std::size_t i, std::span<const double> u) const {
  if (grid_->kind(i) != NodeKind::kInterior) return u[i];
  const auto& nodes = grid_->interior();
  const auto it = std::lower_bound(nodes.begin(), nodes.end(), i);
  return update_interior(static_cast<std::size_t>(it - nodes.begin()), u, nullptr);
}

std::size_t HjbStepper::step(std::span<const double> u, std::span<double> out) const {
  if (!options_.parallel) return step_serial(u, out);
  std::copy(u.begin(), u.end(), out.begin());
  const auto m = static_cast<std::int64_t>(grid_->interior().size());
  const auto& nodes = grid_->interior();
  std::size_t deficits = 0;
#pragma omp parallel for schedule(static) reduction(+ : deficits)
  for (std::int64_t j = 0; j < m; ++j) {
    std::size_t local = 0;
    out[nodes[static_cast<std::size_t>(j)]] = update_interior(static_cast<std::size_t>(j), u, &local);
    deficits += local;
  }
  return deficits;
}

std::size_t HjbStepper::step_serial(std::span<const double> u, std::span<double> out) const {
  std::copy(u.begin(), u.end(), out.begin());
  const auto& nodes = grid_->interior();
  std::size_t deficits = 0;
  for (std::size_t j = 0; j < nodes.size(); ++j) out[nodes[j]] = update_interior(j, u, &deficits);
  return deficits;
}

std::vector<double> sample_on_grid(const Grid& grid, const ScalarFunction& f) {
  std::vector<double> v(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) v[i] = f(grid.position(i));
  return v;
}

namespace {

// Advances one or two iterates in lockstep to the targets, sizing every step
// from the stepper; `visit` sees the state after each step.
template <typename Visit>
void march(HjbStepper& stepper, const SolverOptions& options, std::vector<double>& u, std::vector<double>* u2,
           const std::vector<double>& targets, HjbSolution& sol, Visit&& visit) {
  std::vector<double> next(u.size()), next2(u2 ? u2->size() : 0);
  double t = 0.0;
  sol.min_dt = std::numeric_limits<double>::infinity();
  for (double target : targets) {
    while (t < target) {
      double dt = u2 ? stepper.prepare(u, *u2) : stepper.prepare(u);
      if (options.dt) dt = *options.dt;
      // Land exactly on the target; tiny remainders are absorbed into this step.
      if (t + dt >= target - 1e-12 * std::max(1.0, target)) dt = target - t;
      stepper.set_dt(dt);
      sol.dissipation_deficits += stepper.step(u, next);
      u.swap(next);
      if (u2) {
        sol.dissipation_deficits += stepper.step(*u2, next2);
        u2->swap(next2);
      }
      t = (dt == target - t) ? target : t + dt;
      ++sol.steps;
      sol.min_dt = std::min(sol.min_dt, dt);
      sol.max_dt = std::max(sol.max_dt, dt);
      sol.stability_number = std::max(sol.stability_number, stepper.stability_number());
      visit();
    }
    sol.snapshots.push_back({target, u});
  }
  for (double v : u)
    if (!std::isfinite(v)) throw std::runtime_error("HJB iterate became non-finite");
}

std::vector<double> targets_for(const SolverOptions& options) {
  if (!(options.T >= 0.0) || !std::isfinite(options.T)) throw std::invalid_argument("T must be non-negative");
  std::vector<double> targets;
  for (double t : options.snapshot_times) {
    if (t < 0.0 || t > options.T) throw std::invalid_argument("snapshot time outside [0, T]");
    targets.push_back(t);
  }
  targets.push_back(options.T);
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
  return targets;
}

}  // namespace

HjbSolution solve_hjb_fd(const Grid& grid, const HamiltonianSpec& spec, const ScalarFunction& f,
                         const SolverOptions& options) {
  auto u = sample_on_grid(grid, f);
  HjbStepper stepper(grid, spec, options);
  HjbSolution sol;
  march(stepper, options, u, nullptr, targets_for(options), sol, [] {});
  if (sol.steps == 0) sol.min_dt = 0.0;
  return sol;
}

ControlEstimate solve_hjb_control_mc(const CoefficientField& field, const HamiltonianSpec& spec,
                                     const ScalarFunction& f, double epsilon, double t, const Vec& x,
                                     std::span<const Control> controls, const ControlMcOptions& options) {
  if (controls.empty()) throw std::invalid_argument("empty control family");
  if (!(epsilon > 0.0) || !(t >= 0.0)) throw std::invalid_argument("invalid epsilon or t");
  const Vec x0 = (1.0 / epsilon) * x;
  if (!field.in_cluster(x0)) throw std::invalid_argument("x / eps must lie in the cluster");
  SimulationOptions sim;
  sim.T = t / epsilon;
  sim.dt = options.dt;
  sim.normalization = Normalization::kGenerator;
  step_count(sim.T, sim.dt);

  ControlEstimate est;
  for (std::size_t c = 0; c < controls.size(); ++c) {
    std::vector<double> j(options.paths);
    const auto n = static_cast<std::int64_t>(options.paths);
#pragma omp parallel for schedule(dynamic, 8)
    for (std::int64_t s = 0; s < n; ++s) {
      const auto path = simulate_sde(field, controls[c], x0, sim, options.seed, static_cast<std::uint64_t>(s));
      j[static_cast<std::size_t>(s)] =
          f(epsilon * path.states.back()) - epsilon * running_cost(field, spec, path);
    }
    double mean = 0.0;
    for (double v : j) mean += v;
    mean /= static_cast<double>(j.size());
    double ss = 0.0;
    for (double v : j) ss += (v - mean) * (v - mean);
    const double se = j.size() > 1 ? std::sqrt(ss / static_cast<double>(j.size() - 1) / static_cast<double>(j.size())) : 0.0;
    est.per_control.push_back({mean, se});
    if (c == 0 || mean > est.value) {
      est.value = mean;
      est.standard_error = se;
      est.best = c;
    }
  }
  return est;
}

ComparisonReport comparison_check(const Grid& grid, const HamiltonianSpec& spec, const ScalarFunction& f1,
                                  const ScalarFunction& f2, const SolverOptions& options, double tolerance) {
  auto u1 = sample_on_grid(grid, f1);
  auto u2 = sample_on_grid(grid, f2);
  HjbStepper stepper(grid, spec, options);
  ComparisonReport r;
  r.max_data_difference = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    r.max_data_difference = std::max(r.max_data_difference, u1[i] - u2[i]);
    r.sup_data_gap = std::max(r.sup_data_gap, std::abs(u1[i] - u2[i]));
  }
  r.max_difference = r.max_data_difference;
  r.sup_solution_gap = r.sup_data_gap;
  HjbSolution sol;
  SolverOptions opts = options;
  opts.snapshot_times.clear();
  march(stepper, opts, u1, &u2, targets_for(opts), sol, [&] {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      r.max_difference = std::max(r.max_difference, u1[i] - u2[i]);
      r.sup_solution_gap = std::max(r.sup_solution_gap, std::abs(u1[i] - u2[i]));
    }
  });
  r.steps = sol.steps;
  r.comparison_holds = r.max_difference <= r.max_data_difference + tolerance;
  r.contraction_holds = r.sup_solution_gap <= r.sup_data_gap + tolerance;
  return r;
}

ConvergenceTable convergence_study(const CoefficientField& field, const HamiltonianSpec& spec,
                                   const ScalarFunction& f, std::span<const ConvergenceCase> cases,
                                   const std::function<double(double, const Vec&)>& u_hom,
                                   const SolverOptions& options) {
  ConvergenceTable table;
  for (const auto& c : cases) {
    Grid grid(field, c.epsilon, c.grid);
    SolverOptions opts = options;
    if (opts.snapshot_times.empty()) {
      for (int k = 1; k <= 4; ++k) opts.snapshot_times.push_back(options.T * k / 4.0);
    }
    const auto sol = solve_hjb_fd(grid, spec, f, opts);
    const auto inner = grid.nodes_within(0.5 * c.grid.half_width);
    ConvergenceRow row;
    row.epsilon = c.epsilon;
    row.spacing = c.grid.spacing;
    row.steps = sol.steps;
    row.dissipation_deficits = sol.dissipation_deficits;
    double scale = 0.0;
    for (const auto& snap : sol.snapshots) {
      for (std::size_t i : inner) {
        const Vec x = grid.position(i);
        const double exact = u_hom(snap.time, x);
        const double e = std::abs(snap.values[i] - exact);
        row.error = std::isnan(e) ? e : std::max(row.error, e);
        if (std::isnan(e)) break;
        scale = std::max(scale, std::abs(exact));
      }
    }
    row.relative_error = scale > 0.0 ? row.error / scale : row.error;
    table.rows.push_back(row);
  }
  table.monotone = true;
  for (std::size_t k = 1; k < table.rows.size(); ++k)
    table.monotone = table.monotone && table.rows[k].error < table.rows[k - 1].error;
  return table;
}

std::string grid_function_csv(const Grid& grid, const GridFunction& u) {
  std::ostringstream os;
  for (int k = 0; k < grid.dimension(); ++k) os << 'x' << k + 1 << ',';
  os << "t,value\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec x = grid.position(i);
    for (int k = 0; k < grid.dimension(); ++k) os << fmt::format("{:.17g},", x[static_cast<std::size_t>(k)]);
    os << fmt::format("{:.17g},{:.17g}\n", u.time, u.values[i]);
  }
  return os.str();
}

std::vector<char> grid_function_binary(const Grid& grid, const GridFunction& u) {
  std::vector<char> out(kSnapshotMagic, kSnapshotMagic + 8);
  put<std::int32_t>(out, grid.dimension());
  put<std::int32_t>(out, grid.nodes_per_axis());
  put<double>(out, grid.half_width());
  put<double>(out, grid.spacing());
  put<double>(out, grid.epsilon());
  put<double>(out, u.time);
  put<std::uint64_t>(out, u.values.size());
  for (double v : u.values) put<double>(out, v);
  return out;
}

GridFunction grid_function_from_binary(std::span<const char> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSnapshotMagic, 8) != 0) {
    throw std::runtime_error("not a grid snapshot");
  }
  std::size_t pos = 8;
  get<std::int32_t>(bytes, pos);
  get<std::int32_t>(bytes, pos);
  get<double>(bytes, pos);
  get<double>(bytes, pos);
  get<double>(bytes, pos);
  GridFunction u;
  u.time = get<double>(bytes, pos);
  const auto n = get<std::uint64_t>(bytes, pos);
  if (n > (bytes.size() - pos) / sizeof(double)) throw std::runtime_error("truncated snapshot");
  u.values.resize(n);
  for (auto& v : u.values) v = get<double>(bytes, pos);
  return u;
}

}  // namespace chom
