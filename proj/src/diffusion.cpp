#include "chom/diffusion.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <fmt/format.h>

#include "chom/rng.h"

namespace chom {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;

struct StepInputs {
  const CoefficientField* field;
  const Control* control;
  Normalization normalization;
  double dt;
};

// One Euler-Maruyama step with Brownian increment dB; returns the control used.
Vec euler_step(const StepInputs& in, double t, Vec& x, const Vec& dB) {
  const FieldPoint fp = in.field->eval(x);
  const Vec c = (*in.control)(t, x);
  const double a = fp.a();
  if (in.normalization == Normalization::kControlled) {
    x += fp.sigma() * dB + in.dt * (fp.div_a() + a * c);
  } else {
    x += (kInvSqrt2 * fp.sigma()) * dB + in.dt * (0.5 * fp.div_a() + a * c);
  }
  return c;
}

void check_finite(const Vec& x, std::size_t step) {
  if (!all_finite(x)) throw NonFiniteState(step, fmt::format("non-finite state at step {}", step));
}

void validate(const SimulationOptions& o) {
  if (!(o.dt > 0.0) || !std::isfinite(o.dt)) throw std::invalid_argument("dt must be positive");
  if (!(o.T >= 0.0) || !std::isfinite(o.T)) throw std::invalid_argument("T must be non-negative");
}

Vec brownian_increment(Philox& rng, int dim, double sqrt_dt) {
  Vec dB{};
  for (int k = 0; k < dim; ++k) dB[static_cast<std::size_t>(k)] = sqrt_dt * rng.normal();
  return dB;
}

std::vector<std::size_t> horizon_steps(const EnsembleOptions& o) {
  if (o.horizons.empty()) throw std::invalid_argument("at least one horizon required");
  if (!(o.dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (o.paths == 0) throw std::invalid_argument("ensemble must contain at least one path");
  std::vector<std::size_t> steps;
  for (double T : o.horizons) {
    const std::size_t n = step_count(T, o.dt);
    if (!steps.empty() && n <= steps.back()) throw std::invalid_argument("horizons must be increasing");
    steps.push_back(n);
  }
  return steps;
}

// Fills endpoints[h][stream] (and the excursion) for one path.
void run_path(const CoefficientField& field, const Control& control, const Vec& x0, const EnsembleOptions& o,
              const std::vector<std::size_t>& steps, std::size_t stream, TrajectoryEnsemble& out) {
  const int dim = field.dimension();
  Philox rng(o.seed, stream);
  const StepInputs in{&field, &control, o.normalization, o.dt};
  const double sqrt_dt = std::sqrt(o.dt);
  Vec x = x0;
  double excursion = o.track_excursion ? distance_to_support(field, x) : 0.0;
  std::size_t h = 0, k = 0;
  while (h < steps.size() && steps[h] == 0) out.endpoints[h++][stream] = x;
  for (; h < steps.size(); ++k) {
    euler_step(in, static_cast<double>(k) * o.dt, x, brownian_increment(rng, dim, sqrt_dt));
    check_finite(x, k + 1);
    if (o.track_excursion) excursion = std::max(excursion, distance_to_support(field, x));
    while (h < steps.size() && steps[h] == k + 1) out.endpoints[h++][stream] = x;
  }
  if (o.track_excursion) out.max_excursion[stream] = excursion;
}

TrajectoryEnsemble prepare(const CoefficientField& field, const Control& control, const Vec& x0,
                           const EnsembleOptions& o) {
  TrajectoryEnsemble e;
  e.horizons = o.horizons;
  e.endpoints.assign(o.horizons.size(), std::vector<Vec>(o.paths));
  if (o.track_excursion) e.max_excursion.assign(o.paths, 0.0);
  e.x0 = x0;
  e.dt = o.dt;
  e.normalization = o.normalization;
  e.control = control.label();
  e.seed = o.seed;
  e.dimension = field.dimension();
  return e;
}

}  // namespace

const char* to_string(Normalization n) {
  return n == Normalization::kControlled ? "controlled" : "generator";
}

Control Control::zero() { return Control{}; }

Control Control::time_function(std::function<Vec(double)> c, std::string label) {
  if (!c) throw std::invalid_argument("empty control function");
  Control out;
  out.kind_ = Kind::kTimeFunction;
  out.time_fn_ = std::move(c);
  out.label_ = std::move(label);
  return out;
}

Control Control::constant(const Vec& c) {
  return time_function([c](double) { return c; },
                       fmt::format("constant({:.17g},{:.17g},{:.17g})", c[0], c[1], c[2]));
}

Control Control::feedback(DriftField b) {
  Control out;
  out.kind_ = Kind::kFeedback;
  out.feedback_ = std::move(b);
  out.label_ = "feedback";
  return out;
}

Vec Control::operator()(double t, const Vec& x) const {
  switch (kind_) {
    case Kind::kZero:
      return Vec{};
    case Kind::kTimeFunction:
      return time_fn_(t);
    case Kind::kFeedback:
      return feedback_(x);
  }
  return Vec{};
}

std::size_t step_count(double T, double dt) {
  const double n = T / dt;
  const double r = std::round(n);
  if (!(T >= 0.0) || std::abs(n - r) > 1e-9 * std::max(1.0, n)) {
    throw std::invalid_argument(fmt::format("horizon {} is not a multiple of dt = {}", T, dt));
  }
  return static_cast<std::size_t>(r);
}

SDEPath simulate_sde(const CoefficientField& field, const Control& control, const Vec& x0,
                     const SimulationOptions& options, std::uint64_t seed, std::uint64_t stream) {
  validate(options);
  const std::size_t n = step_count(options.T, options.dt);
  Philox rng(seed, stream);
  std::vector<Vec> increments(n);
  const double sqrt_dt = std::sqrt(options.dt);
  for (auto& dB : increments) dB = brownian_increment(rng, field.dimension(), sqrt_dt);
  return simulate_sde(field, control, x0, options.dt, options.normalization, increments);
}

SDEPath simulate_sde(const CoefficientField& field, const Control& control, const Vec& x0, double dt,
                     Normalization normalization, std::span<const Vec> increments) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  check_finite(x0, 0);
  SDEPath path;
  path.times.reserve(increments.size() + 1);
  path.states.reserve(increments.size() + 1);
  path.control_trace.reserve(increments.size());
  const StepInputs in{&field, &control, normalization, dt};
  Vec x = x0;
  path.times.push_back(0.0);
  path.states.push_back(x);
  for (std::size_t k = 0; k < increments.size(); ++k) {
    const double t = static_cast<double>(k) * dt;
    path.control_trace.push_back(euler_step(in, t, x, increments[k]));
    check_finite(x, k + 1);
    path.times.push_back(static_cast<double>(k + 1) * dt);
    path.states.push_back(x);
  }
  return path;
}

TrajectoryEnsemble simulate_ensemble(const CoefficientField& field, const Control& control, const Vec& x0,
                                     const EnsembleOptions& options) {
  const auto steps = horizon_steps(options);
  TrajectoryEnsemble e = prepare(field, control, x0, options);
  const auto n = static_cast<std::int64_t>(options.paths);
  std::string failure;
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t s = 0; s < n; ++s) {
    try {
      run_path(field, control, x0, options, steps, static_cast<std::size_t>(s), e);
    } catch (const std::exception& ex) {
#pragma omp critical(chom_ensemble_failure)
      if (failure.empty()) failure = fmt::format("stream {}: {}", s, ex.what());
    }
  }
  if (!failure.empty()) throw NonFiniteState(0, failure);
  return e;
}

TrajectoryEnsemble simulate_ensemble_serial(const CoefficientField& field, const Control& control, const Vec& x0,
                                            const EnsembleOptions& options) {
  const auto steps = horizon_steps(options);
  TrajectoryEnsemble e = prepare(field, control, x0, options);
  for (std::size_t s = 0; s < options.paths; ++s) run_path(field, control, x0, options, steps, s, e);
  return e;
}

double distance_to_support(const CoefficientField& field, const Vec& x) {
  return field.profile().support_distance(x);
}

VectorEstimate lln_drift(const TrajectoryEnsemble& ensemble) {
  if (ensemble.size() < 2) throw std::invalid_argument("lln_drift needs at least two paths");
  const double T = ensemble.final_horizon();
  if (!(T > 0.0)) throw std::invalid_argument("lln_drift needs a positive horizon");
  if (T < 100.0 * ensemble.dt * (1.0 - 1e-12)) throw std::invalid_argument("lln_drift requires T >= 100 dt");
  const auto& ends = ensemble.final_endpoints();
  const double n = static_cast<double>(ends.size());
  VectorEstimate est;
  for (const auto& x : ends) est.value += (1.0 / T) * (x - ensemble.x0);
  est.value = (1.0 / n) * est.value;
  Vec var{};
  for (const auto& x : ends) {
    const Vec d = (1.0 / T) * (x - ensemble.x0) - est.value;
    for (std::size_t k = 0; k < var.size(); ++k) var[k] += d[k] * d[k];
  }
  for (std::size_t k = 0; k < var.size(); ++k) est.standard_error[k] = std::sqrt(var[k] / (n - 1.0) / n);
  return est;
}

Vec spatial_drift_average(const CoefficientField& field, const DriftField& b, const Vec& center, double half_width,
                          int per_unit) {
  if (!(half_width > 0.0) || per_unit < 1) throw std::invalid_argument("empty window");
  const int dim = field.dimension();
  const int n = std::max(1, static_cast<int>(std::ceil(2.0 * half_width * per_unit)));
  const double h = 2.0 * half_width / n;
  Vec sum{};
  std::size_t count = 0;
  std::array<int, kMaxDim> idx{};
  const std::size_t total = static_cast<std::size_t>(std::pow(n, dim));
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t r = flat;
    Vec y = center;
    for (int k = 0; k < dim; ++k) {
      idx[static_cast<std::size_t>(k)] = static_cast<int>(r % static_cast<std::size_t>(n));
      r /= static_cast<std::size_t>(n);
      y[static_cast<std::size_t>(k)] += -half_width + (idx[static_cast<std::size_t>(k)] + 0.5) * h;
    }
    if (!field.in_cluster(y)) continue;
    const FieldPoint fp = field.eval(y);
    sum += 0.5 * fp.div_a() + fp.a() * b(y);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("window does not meet the cluster");
  return (1.0 / static_cast<double>(count)) * sum;
}

double log_mean_exp(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("log_mean_exp of an empty sample");
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

ScalarEstimate feynman_kac_Hbar(const TrajectoryEnsemble& ensemble, const Vec& theta, int blocks) {
  if (ensemble.normalization != Normalization::kGenerator) {
    throw std::invalid_argument("feynman_kac_Hbar needs an ensemble in the generator normalization");
  }
  const double T = ensemble.final_horizon();
  if (!(T > 0.0)) throw std::invalid_argument("feynman_kac_Hbar needs a positive horizon");
  const auto& ends = ensemble.final_endpoints();
  const std::size_t n = ends.size();
  if (blocks < 2 || static_cast<std::size_t>(blocks) > n) throw std::invalid_argument("invalid jackknife block count");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = dot(theta, ends[i] - ensemble.x0);
  ScalarEstimate est;
  est.value = log_mean_exp(v) / T;

  // Block b holds indices [b n / B, (b + 1) n / B).
  const auto nb = static_cast<std::size_t>(blocks);
  std::vector<double> loo(nb);
  std::vector<double> rest;
  rest.reserve(n);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t lo = b * n / nb, hi = (b + 1) * n / nb;
    rest.clear();
    rest.insert(rest.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo));
    rest.insert(rest.end(), v.begin() + static_cast<std::ptrdiff_t>(hi), v.end());
    loo[b] = log_mean_exp(rest) / T;
  }
  double mean = 0.0;
  for (double x : loo) mean += x;
  mean /= static_cast<double>(nb);
  double ss = 0.0;
  for (double x : loo) ss += (x - mean) * (x - mean);
  est.standard_error = std::sqrt(ss * static_cast<double>(nb - 1) / static_cast<double>(nb));
  return est;
}

std::vector<RateEntry> empirical_rate_function(const TrajectoryEnsemble& ensemble, std::span<const Vec> velocities) {
  std::vector<RateEntry> out;
  for (std::size_t h = 0; h < ensemble.horizons.size(); ++h) {
    const double T = ensemble.horizons[h];
    if (!(T > 0.0)) continue;
    const double bw = std::pow(T, -0.25);
    const auto& ends = ensemble.endpoints[h];
    for (const Vec& v : velocities) {
      RateEntry e;
      e.horizon = T;
      e.bandwidth = bw;
      e.velocity = v;
      for (const Vec& x : ends)
        if (distance((1.0 / T) * (x - ensemble.x0), v) < bw) ++e.hits;
      e.empty = e.hits == 0;
      if (!e.empty) e.value = -std::log(static_cast<double>(e.hits) / static_cast<double>(ends.size())) / T;
      out.push_back(e);
    }
  }
  return out;
}

PointConfiguration environment_step(const PointConfiguration& config, const Vec& x) { return recentered(config, x); }

double environment_time_average(const PointConfiguration& config, const SDEPath& path,
                                const std::function<double(const PointConfiguration&)>& observable,
                                std::size_t stride) {
  if (stride == 0 || path.states.empty()) throw std::invalid_argument("empty path or zero stride");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < path.states.size(); k += stride) {
    sum += observable(environment_step(config, path.states[k]));
    ++n;
  }
  return sum / static_cast<double>(n);
}

double running_cost(const CoefficientField& field, const HamiltonianSpec& spec, const SDEPath& path) {
  double cost = 0.0;
  for (std::size_t k = 0; k + 1 < path.states.size(); ++k) {
    const double dt = path.times[k + 1] - path.times[k];
    cost += dt * eval_L(spec, field, path.states[k], path.control_trace[k]);
  }
  return cost;
}

std::string endpoints_csv(const TrajectoryEnsemble& ensemble) {
  std::ostringstream os;
  os << "stream,T";
  for (int k = 0; k < ensemble.dimension; ++k) os << ",x" << k + 1;
  os << '\n';
  for (std::size_t h = 0; h < ensemble.horizons.size(); ++h) {
    for (std::size_t s = 0; s < ensemble.size(); ++s) {
      os << s << ',' << fmt::format("{:.17g}", ensemble.horizons[h]);
      for (int k = 0; k < ensemble.dimension; ++k)
        os << ',' << fmt::format("{:.17g}", ensemble.endpoints[h][s][static_cast<std::size_t>(k)]);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace chom
