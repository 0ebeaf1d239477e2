#include "runner.h"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <omp.h>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "chom/cluster.h"
#include "chom/coefficients.h"
#include "chom/corrector.h"
#include "chom/diffusion.h"
#include "chom/effective.h"
#include "chom/environment.h"
#include "chom/hjb.h"
#include "chom/rng.h"

namespace chom::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

std::string hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::string g17(double v) { return fmt::format("{:.17g}", v); }

/// Files are written to a staging directory and moved into place on commit.
class Staging {
 public:
  explicit Staging(fs::path out) : out_(std::move(out)) {
    // Topmost directory this run creates, removed again on failure.
    for (fs::path p = fs::absolute(out_); !p.empty() && !fs::exists(p); p = p.parent_path()) {
      created_ = p;
      if (p == p.parent_path()) break;
    }
    fs::create_directories(out_);
    staging_ = out_ / ".staging";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~Staging() {
    std::error_code ec;
    fs::remove_all(staging_, ec);
    if (!committed_ && !created_.empty()) fs::remove_all(created_, ec);
  }
  Staging(const Staging&) = delete;
  Staging& operator=(const Staging&) = delete;

  void write(const std::string& name, const std::string& content) {
    std::ofstream f(staging_ / name, std::ios::binary);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("cannot write " + (staging_ / name).string());
    files_.push_back({name, content.size(), fnv1a64(content)});
  }

  RunResult commit(const std::string& manifest) {
    write("manifest.json", manifest);
    for (const auto& f : files_) fs::rename(staging_ / f.name, out_ / f.name);
    committed_ = true;
    RunResult r;
    r.files = files_;
    r.manifest = out_ / "manifest.json";
    return r;
  }

  const std::vector<OutputFile>& files() const { return files_; }

 private:
  fs::path out_;
  fs::path staging_;
  fs::path created_;
  bool committed_ = false;
  std::vector<OutputFile> files_;
};

// ---------------------------------------------------------------------------
// Building blocks from the config

DriftField make_drift(const ExperimentConfig& c) {
  if (c.field.fourier) {
    const auto& f = *c.field.fourier;
    return DriftField::random_fourier(c.environment.dimension, f.modes, f.amplitude, f.length_scale, f.seed);
  }
  return DriftField::constant(c.field.drift);
}

HamiltonianSpec make_spec(const ExperimentConfig& c) {
  if (c.field.hamiltonian == "power") return HamiltonianSpec::power(c.field.alpha, c.field.coefficient);
  return HamiltonianSpec::quadratic(make_drift(c));
}

BoxDomain make_box(const ExperimentConfig& c) { return BoxDomain{c.environment.dimension, c.environment.half_width}; }

bool percolation(const ExperimentConfig& c) { return c.environment.kind == "percolation"; }

PointConfiguration make_sample(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& e = c.environment;
  return condition_on_origin(e.intensity, make_box(c), seed, e.max_attempts);
}

struct Environment {
  std::optional<PointConfiguration> sample;
  std::shared_ptr<CoefficientField> field;
};

Environment make_environment(const ExperimentConfig& c, std::uint64_t seed) {
  Environment env;
  if (percolation(c)) {
    env.sample = make_sample(c, seed);
    env.field = std::make_shared<CoefficientField>(CoefficientField::on_cluster(*env.sample, c.field.smoothing_radius));
  } else {
    env.field = std::make_shared<CoefficientField>(
        CoefficientField::full_space(c.environment.dimension, c.environment.level));
  }
  return env;
}

ScalarFunction make_data(const DataBlock& d) {
  if (d.kind == "cone") return [](const Vec& x) { return -std::sqrt(1.0 + norm2(x)); };
  if (d.kind == "bump") return [](const Vec& x) { return std::exp(-norm2(x)); };
  const Vec theta = d.theta;
  return [theta](const Vec& x) { return dot(theta, x); };
}

ThetaGrid make_theta_grid(const ThetaGridBlock& g, int dim) {
  if (g.kind == "polar") return ThetaGrid::polar(g.directions, g.radii);
  if (g.kind == "cartesian") return ThetaGrid::cartesian(dim, g.half_width, g.per_axis);
  return ThetaGrid::list(dim, g.points);
}

SolverOptions make_solver_options(const ExperimentConfig& c) {
  SolverOptions o;
  o.T = c.solver.T;
  o.cfl = c.solver.cfl;
  o.dt = c.solver.dt;
  o.variant = scheme_variant_from_string(c.solver.variant);
  o.snapshot_times = c.solver.snapshot_times;
  return o;
}

double spacing_for(const SolverBlock& s, std::size_t i) { return s.spacings.size() == 1 ? s.spacings[0] : s.spacings[i]; }

/// Rejects an explicit dt that breaks the stability inequality on the initial data.
void prevalidate_cfl(const ExperimentConfig& c, const CoefficientField& field, const HamiltonianSpec& spec) {
  if (!c.solver.dt) return;
  const auto f = make_data(c.solver.data);
  for (std::size_t i = 0; i < c.solver.epsilons.size(); ++i) {
    const Grid grid(field, c.solver.epsilons[i], GridSpec{c.environment.dimension, c.solver.half_width,
                                                          spacing_for(c.solver, i)});
    HjbStepper stepper(grid, spec, make_solver_options(c));
    stepper.prepare(sample_on_grid(grid, f));
    try {
      stepper.set_dt(*c.solver.dt);
    } catch (const CflViolation& e) {
      throw ConfigError(fmt::format("solver.dt: {} (epsilon = {}, spacing = {})", e.what(), c.solver.epsilons[i],
                                    spacing_for(c.solver, i)));
    }
  }
}

EnsembleOptions fk_ensemble(const FeynmanKacBlock& fk) {
  EnsembleOptions o;
  o.horizons = {fk.T};
  o.dt = fk.dt;
  o.normalization = Normalization::kGenerator;
  o.paths = fk.paths;
  o.seed = fk.seed;
  return o;
}

/// Analytic H-bar of a constant environment with constant drift.
std::optional<std::function<double(const Vec&)>> analytic_hbar(const ExperimentConfig& c) {
  if (percolation(c) || c.field.fourier) return std::nullopt;
  const HamiltonianSpec spec = make_spec(c);
  FieldPoint fp;
  fp.m = c.environment.level;
  const Vec b = c.field.drift;
  return [spec, fp, b](const Vec& theta) { return hamiltonian(spec, fp, b, theta); };
}

std::string vec_header(const std::string& prefix, int d) {
  std::string s;
  for (int k = 0; k < d; ++k) s += fmt::format("{}_{},", prefix, k + 1);
  return s;
}

std::string vec_cells(const Vec& v, int d) {
  std::string s;
  for (int k = 0; k < d; ++k) s += g17(v[static_cast<std::size_t>(k)]) + ",";
  return s;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(); }

// ---------------------------------------------------------------------------
// Subcommands

json run_sample(const ExperimentConfig& c, Staging& out, std::ostream& log) {
  std::string stats = "seed,points,rejections,components,proxy_size,boundary_components,volume_fraction,first_arrival\n";
  json summary = json::array();
  for (std::uint64_t seed : c.environment.seeds) {
    const PointConfiguration config =
        percolation(c) ? make_sample(c, seed) : sample_poisson(c.environment.intensity, make_box(c), seed);
    const ClusterGraph graph(config);
    const auto proxy = graph.unbounded_proxy();
    const std::size_t proxy_size = proxy ? graph.component_size(*proxy) : 0;
    const double window = std::min(c.environment.half_width, 5.0);
    const double fraction = proxy ? volume_fraction(graph, *proxy, Vec{}, window, 8) : 0.0;
    int first = -1;
    if (proxy && contains(graph, *proxy, Vec{})) {
      const auto arr = induced_arrivals(config, graph, 0, 1, 1);
      if (!arr.truncated) first = arr.indices.front();
    }
    out.write(fmt::format("configuration_{}.json", seed), to_json(config));
    out.write(fmt::format("edges_{}.csv", seed), graph.edge_list_csv());
    stats += fmt::format("{},{},{},{},{},{},{},{}\n", seed, config.size(), config.rejections, graph.component_count(),
                         proxy_size, graph.boundary_component_count(), g17(fraction), first);
    summary.push_back({{"seed", seed},
                       {"points", config.size()},
                       {"components", graph.component_count()},
                       {"proxy_size", proxy_size},
                       {"boundary_components", graph.boundary_component_count()},
                       {"volume_fraction", fraction},
                       {"first_arrival", first}});
    log << fmt::format("sample: seed {} points {} proxy {}\n", seed, config.size(), proxy_size);
  }
  out.write("stats.csv", stats);
  return {{"samples", summary}};
}

json run_solve(const ExperimentConfig& c, Staging& out, std::ostream& log) {
  const std::uint64_t seed = c.environment.seeds.front();
  const Environment env = make_environment(c, seed);
  const HamiltonianSpec spec = make_spec(c);
  prevalidate_cfl(c, *env.field, spec);
  const auto f = make_data(c.solver.data);
  const int d = c.environment.dimension;
  std::vector<Control> controls{Control::zero()};
  if (c.solver.data.kind == "linear" && c.field.hamiltonian == "quadratic") {
    controls.push_back(Control::constant(0.5 * c.solver.data.theta));
    controls.push_back(Control::constant(c.solver.data.theta));
  }
  std::string summary =
      "epsilon,spacing,steps,min_dt,max_dt,stability_number,deficits,u_fd,u_mc,u_mc_se,mc_below_fd\n";
  json rows = json::array();
  for (std::size_t i = 0; i < c.solver.epsilons.size(); ++i) {
    const double eps = c.solver.epsilons[i];
    const Grid grid(*env.field, eps, GridSpec{d, c.solver.half_width, spacing_for(c.solver, i)});
    const HjbSolution sol = solve_hjb_fd(grid, spec, f, make_solver_options(c));
    const double u0 = sol.final_state().values[grid.nearest(Vec{})];
    ControlMcOptions mc;
    mc.dt = c.solver.mc.dt;
    mc.paths = c.solver.mc.paths;
    mc.seed = c.solver.mc.seed;
    double mc_value = std::numeric_limits<double>::quiet_NaN();
    double mc_se = std::numeric_limits<double>::quiet_NaN();
    if (c.field.hamiltonian == "quadratic") {
      const auto est = solve_hjb_control_mc(*env.field, spec, f, eps, c.solver.T, Vec{}, controls, mc);
      mc_value = est.value;
      mc_se = est.standard_error;
    }
    const bool below = std::isnan(mc_value) || mc_value - 3.0 * mc_se <= u0 + 1e-12;
    summary += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", g17(eps), g17(grid.spacing()), sol.steps,
                           g17(sol.min_dt), g17(sol.max_dt), g17(sol.stability_number), sol.dissipation_deficits,
                           g17(u0), g17(mc_value), g17(mc_se), int(below));
    if (c.solver.write_grids) {
      for (std::size_t s = 0; s < sol.snapshots.size(); ++s) {
        out.write(fmt::format("u_eps{}_t{}.csv", i, s), grid_function_csv(grid, sol.snapshots[s]));
      }
    }
    rows.push_back({{"epsilon", eps},
                    {"steps", sol.steps},
                    {"u_fd", u0},
                    {"u_mc", finite_or_null(mc_value)},
                    {"u_mc_se", finite_or_null(mc_se)},
                    {"mc_below_fd", below}});
    log << fmt::format("solve: eps {} steps {} u(T,0) {:.6g} mc {:.6g}\n", eps, sol.steps, u0, mc_value);
  }
  out.write("solve.csv", summary);
  return {{"rows", rows}, {"seed", seed}};
}

json run_effective(const ExperimentConfig& c, Staging& out, std::ostream& log) {
  const int d = c.environment.dimension;
  const HamiltonianSpec spec = make_spec(c);
  const DriftField b = make_drift(c);
  const ThetaGrid grid = make_theta_grid(c.effective.theta_grid, d);
  const bool quadratic = c.field.hamiltonian == "quadratic";
  const auto& ec = c.effective;
  OptimizerConfig opt;
  opt.beta_schedule = ec.beta_schedule;
  opt.lbfgs.max_iterations = ec.max_iterations;
  const CorrectorShape shape = CorrectorShape::from_ratio(make_box(c), ec.support_ratio, ec.spacing);
  const auto f = make_data(c.solver.data);
  json per_seed = json::array();
  for (std::uint64_t seed : c.environment.seeds) {
    const Environment env = make_environment(c, seed);
    std::vector<EffectiveHamiltonianTable> tables;
    json entry{{"seed", seed}};

    if (ec.variational) {
      // Gradient check of the objective before any optimization.
      Vec probe_theta{};
      for (const Vec& t : grid.points)
        if (norm2(t) > 0.0) {
          probe_theta = t;
          break;
        }
      const VariationalObjective objective(*env.field, spec, probe_theta, shape);
      Philox rng(mix_seed(seed, 77));
      std::vector<double> g(objective.variable_count());
      for (double& v : g) v = 0.1 * rng.normal();
      const GradientCheck check =
          check_objective_gradient(objective, g, ec.beta_schedule.back(), ec.gradient_probes, mix_seed(seed, 78));
      out.write(fmt::format("gradient_check_{}.json", seed),
                json{{"max_relative_error", check.max_relative_error},
                     {"probes", check.probes},
                     {"tolerance", ec.gradient_tolerance},
                     {"passed", check.max_relative_error <= ec.gradient_tolerance}}
                    .dump(2));
      if (!(check.max_relative_error <= ec.gradient_tolerance)) {
        throw std::runtime_error(fmt::format("objective gradient check failed: relative error {} > {}",
                                             check.max_relative_error, ec.gradient_tolerance));
      }
      entry["gradient_check"] = check.max_relative_error;
    }

    if (quadratic && ec.variational) {
      EquivalenceOptions eo;
      eo.shape = shape;
      eo.optimizer = opt;
      eo.ensemble = fk_ensemble(ec.feynman_kac);
      eo.blocks = ec.feynman_kac.blocks;
      const EquivalenceReport rep = equivalence_check(*env.field, b, grid, eo);
      EffectiveHamiltonianTable fk{grid, {}, {}, HbarMethod::kFeynmanKac};
      EffectiveHamiltonianTable var{grid, {}, {}, HbarMethod::kVariational};
      for (const auto& row : rep.rows) {
        fk.values.push_back(row.feynman_kac);
        fk.errors.push_back(row.feynman_kac_error);
        var.values.push_back(row.variational);
        var.errors.push_back(0.0);
      }
      out.write(fmt::format("equivalence_{}.csv", seed), equivalence_csv(rep));
      entry["equivalence_holds"] = rep.all_hold;
      tables.push_back(fk);
      tables.push_back(var);
    } else if (quadratic) {
      tables.push_back(feynman_kac_table(*env.field, b, grid, Vec{}, fk_ensemble(ec.feynman_kac), ec.feynman_kac.blocks));
    } else {
      tables.push_back(variational_table(*env.field, spec, grid, shape, opt));
    }
    if (const auto exact = analytic_hbar(c)) tables.push_back(analytic_table(grid, *exact));

    for (const auto& t : tables) {
      const std::string tag = to_string(t.method);
      out.write(fmt::format("hbar_{}_{}.csv", tag, seed), table_csv(t));
      out.write(fmt::format("hbar_{}_{}.json", tag, seed), table_json(t));
    }
    out.write(fmt::format("hbar_{}.svg", seed), table_svg(tables));

    // Legendre transform and Hopf-Lax from the first table.
    const RateFunctionTable rate = legendre_transform(tables.front());
    out.write(fmt::format("rate_{}.csv", seed), rate_csv(rate));
    std::string hl = vec_header("x", d) + "t,value," + vec_header("v", d) + "boundary\n";
    for (const Vec& x : ec.hopf_lax_points) {
      const HopfLaxValue v = hopf_lax(f, rate, ec.hopf_lax_time, x);
      hl += vec_cells(x, d) + fmt::format("{},{},", g17(ec.hopf_lax_time), g17(v.value)) + vec_cells(v.maximizer, d) +
            fmt::format("{}\n", int(v.boundary_maximizer));
    }
    out.write(fmt::format("hopf_lax_{}.csv", seed), hl);
    const ConvexityReport convex = check_convexity(tables.front());
    entry["convex"] = convex.convex;
    entry["rate_lipschitz"] = rate.lipschitz;
    per_seed.push_back(entry);
    log << fmt::format("effective: seed {} tables {}\n", seed, tables.size());
  }
  return {{"seeds", per_seed}};
}

json run_ldp(const ExperimentConfig& c, Staging& out, std::ostream& log) {
  if (c.field.hamiltonian != "quadratic") throw ConfigError("field.hamiltonian: ldp needs the quadratic Hamiltonian");
  const int d = c.environment.dimension;
  const std::uint64_t seed = c.environment.seeds.front();
  const Environment env = make_environment(c, seed);
  const DriftField b = make_drift(c);
  EnsembleOptions eo;
  eo.horizons = c.ldp.horizons;
  eo.dt = c.ldp.dt;
  eo.normalization = Normalization::kGenerator;
  eo.paths = c.ldp.paths;
  eo.seed = c.ldp.seed;
  const TrajectoryEnsemble ens = simulate_ensemble(*env.field, Control::feedback(b), Vec{}, eo);
  const auto rates = empirical_rate_function(ens, c.ldp.velocities);

  const ThetaGrid grid = make_theta_grid(c.ldp.theta_grid, d);
  EffectiveHamiltonianTable fk{grid, {}, {}, HbarMethod::kFeynmanKac};
  for (const Vec& theta : grid.points) {
    const ScalarEstimate e = feynman_kac_Hbar(ens, theta, c.effective.feynman_kac.blocks);
    fk.values.push_back(e.value);
    fk.errors.push_back(e.standard_error);
  }
  out.write("hbar_feynman_kac.csv", table_csv(fk));
  const RateFunctionTable legendre = legendre_transform(fk, ThetaGrid::list(d, c.ldp.velocities));
  std::string csv = "horizon,bandwidth," + vec_header("v", d) + "empirical,hits,legendre,modulus,relative_gap\n";
  json rows = json::array();
  for (const auto& r : rates) {
    std::size_t vi = 0;
    while (vi < c.ldp.velocities.size() && distance(c.ldp.velocities[vi], r.velocity) > 0.0) ++vi;
    const double I = legendre.values[vi];
    const double gap = std::abs(r.value - I) / std::max(std::abs(I), legendre.modulus[vi]);
    csv += fmt::format("{},{},", g17(r.horizon), g17(r.bandwidth)) + vec_cells(r.velocity, d) +
           fmt::format("{},{},{},{},{}\n", g17(r.value), r.hits, g17(I), g17(legendre.modulus[vi]), g17(gap));
    rows.push_back({{"horizon", r.horizon},
                    {"velocity", vi},
                    {"empirical", finite_or_null(r.value)},
                    {"legendre", I},
                    {"relative_gap", finite_or_null(gap)}});
  }
  out.write("ldp.csv", csv);
  log << fmt::format("ldp: {} paths, {} horizons\n", ens.size(), ens.horizons.size());
  return {{"rows", rows}, {"seed", seed}};
}

GradientField make_corrector_field(const ExperimentConfig& c, const PointConfiguration& config) {
  const auto& k = c.corrector;
  const int d = c.environment.dimension;
  if (k.field == "bump-sum") return GradientField::bump_sum(config, k.radius, k.amplitude);
  if (k.field == "bump") return GradientField::bump(d, k.center, k.radius, k.amplitude);
  if (k.field == "constant") return GradientField::constant(d, k.vector);
  if (k.field == "rotational") return GradientField::rotational(d);
  // Grid data of the bump on a node grid around it.
  const double h = 0.125;
  const int n = 2 * static_cast<int>(std::ceil(k.radius / h)) + 5;
  Vec origin = k.center;
  for (int a = 0; a < d; ++a) origin[static_cast<std::size_t>(a)] -= 0.5 * (n - 1) * h;
  std::size_t total = 1;
  for (int a = 0; a < d; ++a) total *= static_cast<std::size_t>(n);
  std::vector<double> values(total);
  for (std::size_t i = 0; i < total; ++i) {
    Vec x = origin;
    std::size_t rem = i;
    for (int a = 0; a < d; ++a) {
      x[static_cast<std::size_t>(a)] += static_cast<double>(rem % static_cast<std::size_t>(n)) * h;
      rem /= static_cast<std::size_t>(n);
    }
    const double s = norm2(x - k.center) / (k.radius * k.radius);
    values[i] = s < 1.0 ? k.amplitude * std::pow(1.0 - s, 4) : 0.0;
  }
  return GradientField::grid_interpolant(d, std::move(values), n, origin, h);
}

json run_corrector(const ExperimentConfig& c, Staging& out, std::ostream& log) {
  if (!percolation(c)) throw ConfigError("environment.kind: corrector diagnostics need a percolation environment");
  const auto& k = c.corrector;
  const std::uint64_t seed = c.environment.seeds.front();
  const PointConfiguration config = make_sample(c, seed);
  const ClusterGraph graph(config);
  auto field_of = [&c](const PointConfiguration& cfg) {
    GradientField G = make_corrector_field(c, cfg);
    if (c.corrector.mollifier_radius > 0.0) return mollify_gradient(G, c.corrector.mollifier_radius);
    return G;
  };
  const GradientField G = field_of(config);

  const LoopReport loops = closed_loop_residual(graph, G, k.loops, k.loop_seed);
  out.write("loops.json", loop_report_json(loops));

  SublinearityOptions so;
  so.probe_density = k.probe_density;
  so.ray_arrivals = k.ray_arrivals;
  so.epsilons = k.epsilons;
  so.sections = k.sections;
  const SublinearityReport sub = sublinearity_scan(graph, G, k.radii, so);
  out.write("sublinearity.csv", sublinearity_csv(sub));
  out.write("sublinearity.json", sublinearity_json(sub));

  std::vector<PointConfiguration> ensemble;
  const BoxDomain ebox{c.environment.dimension, k.ensemble_half_width};
  for (std::size_t i = 0; i < k.ensemble; ++i) {
    ensemble.push_back(
        condition_on_origin(c.environment.intensity, ebox, mix_seed(seed, 1000 + i), c.environment.max_attempts));
  }
  const InducedMean mean = induced_mean(ensemble, field_of, 0);
  std::string samples = "index,value\n";
  for (std::size_t i = 0; i < mean.samples.size(); ++i) samples += fmt::format("{},{}\n", i, g17(mean.samples[i]));
  out.write("induced_mean_samples.csv", samples);

  const auto probes = cluster_probes(graph, k.radii.back(), k.probe_density);
  const FieldNorms norms = field_norms(G, probes);

  json summary{{"field", G.label()},
               {"provenance", to_string(G.provenance())},
               {"sup_bound", finite_or_null(G.sup_bound())},
               {"probe_sup", norms.sup},
               {"l_norm", norms.l_norm},
               {"delta", norms.delta},
               {"max_abs_circulation", finite_or_null(loops.max_abs_circulation)},
               {"closed", loops.closed},
               {"induced_mean", mean.mean},
               {"induced_mean_se", finite_or_null(mean.standard_error)},
               {"induced_mean_used", mean.used},
               {"induced_mean_truncated", mean.truncated},
               {"zero_within_3se", mean.zero_within_3se()},
               {"final_ratio", sub.ratios.back()}};
  out.write("corrector.json", summary.dump(2));
  log << fmt::format("corrector: circulation {:.3g} induced mean {:.4g} +- {:.2g}\n", loops.max_abs_circulation,
                     mean.mean, mean.standard_error);
  return summary;
}

json run_converge(const ExperimentConfig& c, Staging& out, std::ostream& log) {
  const std::uint64_t seed = c.environment.seeds.front();
  const Environment env = make_environment(c, seed);
  const HamiltonianSpec spec = make_spec(c);
  prevalidate_cfl(c, *env.field, spec);
  const int d = c.environment.dimension;
  const auto f = make_data(c.solver.data);
  std::function<double(double, const Vec&)> u_hom;
  std::string hbar_source;
  const auto exact = analytic_hbar(c);
  if (c.solver.data.kind == "linear") {
    const Vec theta = c.solver.data.theta;
    double hbar = 0.0;
    if (exact) {
      hbar = (*exact)(theta);
      hbar_source = "analytic";
    } else {
      if (c.field.hamiltonian != "quadratic") throw ConfigError("field.hamiltonian: H-bar needs the quadratic kind here");
      const auto ens = simulate_ensemble(*env.field, Control::feedback(make_drift(c)), Vec{},
                                         fk_ensemble(c.effective.feynman_kac));
      hbar = feynman_kac_Hbar(ens, theta, c.effective.feynman_kac.blocks).value;
      hbar_source = "feynman-kac";
    }
    u_hom = [theta, hbar](double t, const Vec& x) { return dot(theta, x) + t * hbar; };
  } else {
    const ThetaGrid grid = make_theta_grid(c.effective.theta_grid, d);
    EffectiveHamiltonianTable table;
    if (exact) {
      table = analytic_table(grid, *exact);
      hbar_source = "analytic";
    } else {
      if (c.field.hamiltonian != "quadratic") throw ConfigError("field.hamiltonian: H-bar needs the quadratic kind here");
      table = feynman_kac_table(*env.field, make_drift(c), grid, Vec{}, fk_ensemble(c.effective.feynman_kac),
                                c.effective.feynman_kac.blocks);
      hbar_source = "feynman-kac";
    }
    out.write("hbar.csv", table_csv(table));
    auto rate = std::make_shared<RateFunctionTable>(legendre_transform(table));
    u_hom = [rate, f](double t, const Vec& x) { return t > 0.0 ? hopf_lax(f, *rate, t, x).value : f(x); };
  }
  std::vector<ConvergenceCase> cases;
  for (std::size_t i = 0; i < c.solver.epsilons.size(); ++i) {
    cases.push_back({c.solver.epsilons[i], GridSpec{d, c.solver.half_width, spacing_for(c.solver, i)}});
  }
  const ConvergenceTable table = convergence_study(*env.field, spec, f, cases, u_hom, make_solver_options(c));
  std::string csv = "epsilon,spacing,steps,error,relative_error,deficits\n";
  json rows = json::array();
  for (const auto& r : table.rows) {
    csv += fmt::format("{},{},{},{},{},{}\n", g17(r.epsilon), g17(r.spacing), r.steps, g17(r.error),
                       g17(r.relative_error), r.dissipation_deficits);
    rows.push_back({{"epsilon", r.epsilon}, {"error", finite_or_null(r.error)}});
    log << fmt::format("converge: eps {} error {:.4g}\n", r.epsilon, r.error);
  }
  out.write("converge.csv", csv);
  return {{"rows", rows}, {"monotone", table.monotone}, {"hbar_source", hbar_source}, {"seed", seed}};
}

std::optional<int> env_workers() {
  const char* v = std::getenv("CHOM_WORKERS");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 4096) throw ConfigError(fmt::format("CHOM_WORKERS: expected a positive integer, got '{}'", v));
  return static_cast<int>(n);
}

}  // namespace

RunResult run(const std::string& subcommand, ExperimentConfig config, const RunOptions& options, std::ostream& log) {
  if (std::find(subcommands().begin(), subcommands().end(), subcommand) == subcommands().end()) {
    throw ConfigError("subcommand: unknown '" + subcommand + "'");
  }
  if (options.seed_override) override_seeds(config, *options.seed_override);
  fs::path out_dir = options.out.empty() ? fs::path(config.output_directory) : options.out;
  if (out_dir.empty()) throw ConfigError("output.directory: missing (or pass --out)");
  const int workers = options.workers > 0 ? options.workers : env_workers().value_or(0);
  if (workers > 0) omp_set_num_threads(workers);

  Staging out(out_dir);
  const std::string canonical = canonical_json(config);
  out.write("config.json", canonical);
  json result;
  if (subcommand == "sample") result = run_sample(config, out, log);
  else if (subcommand == "solve") result = run_solve(config, out, log);
  else if (subcommand == "effective") result = run_effective(config, out, log);
  else if (subcommand == "ldp") result = run_ldp(config, out, log);
  else if (subcommand == "corrector") result = run_corrector(config, out, log);
  else result = run_converge(config, out, log);
  out.write("summary.json", result.dump(2));

  json manifest;
  manifest["version"] = 1;
  manifest["subcommand"] = subcommand;
  manifest["config_hash"] = hex(fnv1a64(canonical));
  manifest["hash"] = "fnv1a64";
  manifest["seeds"] = {{"environment", config.environment.seeds},
                       {"solver_mc", config.solver.mc.seed},
                       {"feynman_kac", config.effective.feynman_kac.seed},
                       {"ldp", config.ldp.seed},
                       {"corrector_loops", config.corrector.loop_seed}};
  if (options.seed_override) manifest["seed_override"] = *options.seed_override;
  auto& files = manifest["files"] = json::array();
  for (const auto& f : out.files()) files.push_back({{"path", f.name}, {"bytes", f.bytes}, {"fnv1a64", hex(f.hash)}});
  return out.commit(manifest.dump(2));
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"chom: homogenization experiments on continuum percolation clusters"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  int workers = 0;
  std::optional<std::uint64_t> seed_override;
  for (const auto& name : subcommands()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " pipeline");
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory (overrides output.directory)");
    sub->add_option("--workers", workers, "worker threads (default: CHOM_WORKERS or all cores)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--seed-override", seed_override, "replace every seed of the config");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  const std::string subcommand = app.get_subcommands().front()->get_name();
  try {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) throw ConfigError("--config: cannot read '" + config_path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const ExperimentConfig config = parse_config(ss.str());
    RunOptions options;
    options.out = out_dir;
    options.workers = workers;
    options.seed_override = seed_override;
    const RunResult r = run(subcommand, config, options, err);
    out << r.manifest.string() << "\n";
    return kOk;
  } catch (const ConfigError& e) {
    err << "invalid configuration: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace chom::cli
