#include <cmath>
#include <memory>

#include "doctest.h"

#include "chom/cluster.h"
#include "chom/diffusion.h"
#include "chom/environment.h"
#include "chom/rng.h"

using namespace chom;

namespace {

const PointConfiguration& percolation_sample() {
  static const PointConfiguration c = condition_on_origin(4.0, BoxDomain{2, 8.0}, 31, 200);
  return c;
}

const CoefficientField& percolation_field() {
  static const CoefficientField f = CoefficientField::on_cluster(percolation_sample(), 0.25);
  return f;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace

TEST_CASE("variance of the free diffusion") {
  // m = 1, sigma = Id: X_T - x0 ~ N(0, T Id), so E|X_T - x0|^2 = d T.
  EnsembleOptions o;
  o.horizons = {2.0};
  o.dt = 0.01;
  o.paths = 10000;
  o.seed = 7;
  const auto e = simulate_ensemble(CoefficientField::full_space(2), Control::zero(), make_vec(1.0, -2.0), o);
  std::vector<double> sq;
  for (const auto& x : e.final_endpoints()) sq.push_back(norm2(x - make_vec(1.0, -2.0)));
  CHECK(std::abs(mean(sq) - 2.0 * 2.0) < 3.0 * stderr_of(sq));

  o.normalization = Normalization::kGenerator;
  const auto g = simulate_ensemble(CoefficientField::full_space(2), Control::zero(), Vec{}, o);
  sq.clear();
  for (const auto& x : g.final_endpoints()) sq.push_back(norm2(x));
  // generator scaling: covariance a T = T / 2 per component
  CHECK(std::abs(mean(sq) - 2.0) < 3.0 * stderr_of(sq));
}

TEST_CASE("frozen dynamics") {
  CoefficientField frozen(std::make_shared<ConstantProfile>(2, 0.0));
  SimulationOptions o;
  o.T = 1.0;
  o.dt = 0.05;
  const auto path = simulate_sde(frozen, Control::constant(make_vec(3, 3)), make_vec(0.4, 0.2), o, 1, 0);
  for (const auto& x : path.states) CHECK(x == make_vec(0.4, 0.2));
  CHECK(path.states.size() == 21);
  CHECK(path.control_trace.size() == 20);
}

TEST_CASE("deterministic drift part") {
  const Vec c = make_vec(0.7, -1.3);
  const double dt = 1.0 / 64, T = 2.0;
  const std::vector<Vec> zero(static_cast<std::size_t>(T / dt), Vec{});
  for (auto n : {Normalization::kControlled, Normalization::kGenerator}) {
    const auto path = simulate_sde(CoefficientField::full_space(2), Control::constant(c), Vec{}, dt, n, zero);
    const Vec expected = (0.5 * T) * c;  // div a = 0, a = 1/2
    CHECK(path.states.back()[0] == doctest::Approx(expected[0]).epsilon(1e-15));
    CHECK(path.states.back()[1] == doctest::Approx(expected[1]).epsilon(1e-15));
  }
}

TEST_CASE("non-finite states abort with the step index") {
  const auto bad = Control::time_function([](double t) { return t > 0.1 ? make_vec(NAN, 0) : Vec{}; });
  SimulationOptions o;
  o.T = 1.0;
  o.dt = 0.05;
  try {
    simulate_sde(CoefficientField::full_space(2), bad, Vec{}, o, 1, 0);
    FAIL("expected NonFiniteState");
  } catch (const NonFiniteState& e) {
    CHECK(e.step() == 4);
  }
  o.dt = 0.0;
  CHECK_THROWS(simulate_sde(CoefficientField::full_space(2), bad, Vec{}, o, 1, 0));
}

TEST_CASE("parallel ensemble matches the serial reference") {
  EnsembleOptions o;
  o.horizons = {0.5, 1.0};
  o.dt = 0.01;
  o.paths = 300;
  o.seed = 99;
  o.track_excursion = true;
  const auto ctrl = Control::feedback(DriftField::constant(make_vec(0.3, 0.1)));
  const auto par = simulate_ensemble(percolation_field(), ctrl, Vec{}, o);
  const auto ser = simulate_ensemble_serial(percolation_field(), ctrl, Vec{}, o);
  CHECK(par.endpoints == ser.endpoints);
  CHECK(par.max_excursion == ser.max_excursion);

  // A shorter run reproduces the first horizon of the longer one.
  o.horizons = {0.5};
  const auto shorter = simulate_ensemble(percolation_field(), ctrl, Vec{}, o);
  CHECK(shorter.endpoints[0] == par.endpoints[0]);
  CHECK_THROWS(simulate_ensemble(percolation_field(), ctrl, Vec{}, EnsembleOptions{{1.0, 0.5}, 0.01}));
}

TEST_CASE("confinement to the cluster") {
  EnsembleOptions o;
  o.horizons = {5.0};
  o.dt = 0.01;
  o.paths = 500;
  o.seed = 4;
  o.track_excursion = true;
  const auto e = simulate_ensemble(percolation_field(), Control::feedback(DriftField::constant(make_vec(0.5, 0))),
                                   Vec{}, o);
  const double worst = *std::max_element(e.max_excursion.begin(), e.max_excursion.end());
  MESSAGE("largest excursion off the cluster: " << worst);
  CHECK(worst <= 5.0 * std::sqrt(o.dt) * 1.0);
}

TEST_CASE("strong order with coupled noise") {
  // Non-constant drift so the scheme is not exact; endpoints converge like sqrt(dt) or better.
  const auto ctrl = Control::feedback(DriftField::random_fourier(2, 4, 1.0, 0.5, 3));
  auto field = CoefficientField::full_space(2);
  const double T = 1.0;
  std::vector<double> rms;
  for (double dt : {0.02, 0.01, 0.005}) {
    double ss = 0;
    const int paths = 200;
    for (int s = 0; s < paths; ++s) {
      Philox rng(11, static_cast<std::uint64_t>(s));
      const std::size_t fine_n = static_cast<std::size_t>(std::lround(T / (dt / 2)));
      std::vector<Vec> fine(fine_n), coarse(fine_n / 2);
      for (auto& dB : fine) dB = make_vec(std::sqrt(dt / 2) * rng.normal(), std::sqrt(dt / 2) * rng.normal());
      for (std::size_t k = 0; k < coarse.size(); ++k) coarse[k] = fine[2 * k] + fine[2 * k + 1];
      const auto a = simulate_sde(field, ctrl, Vec{}, dt, Normalization::kControlled, coarse);
      const auto b = simulate_sde(field, ctrl, Vec{}, dt / 2, Normalization::kControlled, fine);
      ss += norm2(a.states.back() - b.states.back());
    }
    rms.push_back(std::sqrt(ss / paths));
    CHECK(rms.back() <= std::sqrt(dt));
  }
  CHECK(rms[2] < rms[0]);
}

TEST_CASE("law of large numbers in the constant environment") {
  const Vec b = make_vec(0.4, -0.2);
  EnsembleOptions o;
  o.horizons = {10.0};
  o.dt = 0.05;
  o.paths = 2000;
  o.seed = 12;
  for (auto n : {Normalization::kControlled, Normalization::kGenerator}) {
    o.normalization = n;
    const auto e = simulate_ensemble(CoefficientField::full_space(2), Control::feedback(DriftField::constant(b)),
                                     Vec{}, o);
    const auto v = lln_drift(e);
    for (int k = 0; k < 2; ++k) CHECK(std::abs(v.value[k] - 0.5 * b[k]) < 3.0 * v.standard_error[k]);
  }
  o.horizons = {1.0};
  const auto short_run = simulate_ensemble(CoefficientField::full_space(2), Control::zero(), Vec{}, o);
  CHECK_THROWS(lln_drift(short_run));
}

namespace {

// Pooled (X_T - x0)/T over start points drawn uniformly from the cluster in a window.
VectorEstimate pooled_velocity(const DriftField& b, double T, std::uint64_t seed) {
  const auto& field = percolation_field();
  Philox rng(seed, 999);
  std::vector<Vec> v;
  int starts = 0;
  while (starts < 200) {
    const Vec x0 = make_vec(12 * rng.uniform() - 6, 12 * rng.uniform() - 6);
    if (!field.in_cluster(x0)) continue;
    EnsembleOptions o;
    o.horizons = {T};
    o.dt = T / 500;
    o.paths = 20;
    o.seed = seed + static_cast<std::uint64_t>(starts);
    o.normalization = Normalization::kGenerator;
    const auto e = simulate_ensemble(field, Control::feedback(b), x0, o);
    for (const auto& x : e.final_endpoints()) v.push_back((1.0 / T) * (x - x0));
    ++starts;
  }
  VectorEstimate est;
  for (int k = 0; k < 2; ++k) {
    std::vector<double> comp;
    for (const auto& w : v) comp.push_back(w[k]);
    est.value[k] = mean(comp);
    est.standard_error[k] = stderr_of(comp);
  }
  return est;
}

}  // namespace

TEST_CASE("law of large numbers without drift on a percolation sample") {
  const auto v = pooled_velocity(DriftField{}, 5.0, 100);
  const Vec spatial = spatial_drift_average(percolation_field(), DriftField{}, Vec{}, 6.0);
  MESSAGE("time average " << v.value[0] << "," << v.value[1] << "  spatial " << spatial[0] << "," << spatial[1]);
  for (int k = 0; k < 2; ++k) {
    CHECK(std::abs(spatial[k]) < 0.01);
    CHECK(std::abs(v.value[k] - spatial[k]) < 3.0 * v.standard_error[k]);
  }
}

TEST_CASE("law of large numbers with feedback drift on a percolation sample") {
  const DriftField b = DriftField::constant(make_vec(0.2, 0.0));
  const auto v = pooled_velocity(b, 5.0, 300);
  const Vec spatial = spatial_drift_average(percolation_field(), b, Vec{}, 6.0);
  MESSAGE("time average " << v.value[0] << " +- " << v.standard_error[0] << "  spatial " << spatial[0]);
  // The invariant density is not uniform once b != 0 and the component is
  // finite, so only the sign and the order of magnitude are asserted.
  CHECK(v.value[0] > 0.0);
  CHECK(v.value[0] > 0.5 * spatial[0]);
  CHECK(v.value[0] < 2.0 * spatial[0]);
}

TEST_CASE("feynman-kac in the constant environment") {
  EnsembleOptions o;
  o.horizons = {20.0};
  o.dt = 0.05;
  o.paths = 10000;
  o.seed = 21;
  o.normalization = Normalization::kGenerator;
  const auto e = simulate_ensemble(CoefficientField::full_space(2), Control::zero(), Vec{}, o);
  const auto zero = feynman_kac_Hbar(e, Vec{});
  CHECK(zero.value == 0.0);
  CHECK(zero.standard_error == 0.0);
  for (const Vec& theta : {make_vec(0.3, 0.0), make_vec(0.2, -0.4), make_vec(0.0, 0.5)}) {
    const auto est = feynman_kac_Hbar(e, theta);
    CHECK(std::abs(est.value - 0.25 * norm2(theta)) < 3.0 * est.standard_error + 1.0 / o.horizons[0]);
  }
  o.normalization = Normalization::kControlled;
  o.paths = 20;
  const auto wrong = simulate_ensemble(CoefficientField::full_space(2), Control::zero(), Vec{}, o);
  CHECK_THROWS(feynman_kac_Hbar(wrong, make_vec(0.1, 0)));
}

TEST_CASE("log mean exp is stable") {
  const std::vector<double> big{1000.0, 1000.0, 1000.0 + std::log(4.0)};
  CHECK(log_mean_exp(big) == doctest::Approx(1000.0 + std::log(2.0)));
  CHECK_THROWS(log_mean_exp(std::vector<double>{}));
}

TEST_CASE("feynman-kac convexity and Jensen on a percolation sample") {
  EnsembleOptions o;
  o.horizons = {10.0};
  o.dt = 0.02;
  o.paths = 4000;
  o.seed = 8;
  o.normalization = Normalization::kGenerator;
  const DriftField b = DriftField::constant(make_vec(0.2, 0.0));
  const auto e = simulate_ensemble(percolation_field(), Control::feedback(b), Vec{}, o);
  const auto lln = lln_drift(e);
  std::vector<ScalarEstimate> line;
  for (int i = 0; i <= 4; ++i) line.push_back(feynman_kac_Hbar(e, make_vec(-0.5 + 0.25 * i, 0.1)));
  for (int i = 1; i < 4; ++i) {
    const double gap = 0.5 * (line[i - 1].value + line[i + 1].value) - line[i].value;
    const double se = line[i - 1].standard_error + line[i + 1].standard_error + line[i].standard_error;
    CHECK(gap >= -3.0 * se);
  }
  for (int i = 0; i <= 4; ++i) {
    const Vec theta = make_vec(-0.5 + 0.25 * i, 0.1);
    const double jensen = dot(theta, lln.value);
    CHECK(line[i].value >= jensen - 3.0 * (line[i].standard_error + norm(theta) * norm(lln.standard_error)));
  }
}

TEST_CASE("empirical rate function") {
  EnsembleOptions o;
  o.horizons = {2.0, 8.0};
  o.dt = 0.02;
  o.paths = 20000;
  o.seed = 13;
  o.normalization = Normalization::kGenerator;
  const auto e = simulate_ensemble(CoefficientField::full_space(2), Control::zero(), Vec{}, o);
  std::vector<Vec> vs;
  for (int i = 0; i <= 6; ++i) vs.push_back(make_vec(0.25 * i, 0.0));
  vs.push_back(make_vec(40.0, 0.0));
  const auto table = empirical_rate_function(e, vs);
  REQUIRE(table.size() == 16);
  CHECK(table[0].bandwidth == doctest::Approx(std::pow(2.0, -0.25)));
  // I(0) decreases towards 0 as T grows.
  CHECK(table[8].value < table[0].value);
  CHECK(table[8].value < 0.05);
  // Nondecreasing along the ray from the LLN velocity 0 where bins are populated.
  for (int h = 0; h < 2; ++h)
    for (int i = 1; i <= 6; ++i) {
      const auto& prev = table[static_cast<std::size_t>(h * 8 + i - 1)];
      const auto& cur = table[static_cast<std::size_t>(h * 8 + i)];
      if (!cur.empty) CHECK(cur.value >= prev.value - 1e-3);
    }
  CHECK(table[7].empty);
  CHECK(std::isinf(table[7].value));
}

TEST_CASE("environment process") {
  const auto c = sample_poisson(1.0, BoxDomain{2, 4.0}, 3);
  CHECK(environment_step(c, Vec{}).points == c.points);
  const Vec x = make_vec(0.5, 0.25), y = make_vec(-1.0, 0.75);
  const auto two = environment_step(environment_step(c, x), y);
  const auto one = environment_step(c, x + y);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(norm(two.points[i] - one.points[i]) < 1e-15);
}

TEST_CASE("environment time average matches the Palm average") {
  // Full-space-like dynamics in a dense environment: the local point count
  // around the particle against the Palm count of other points around a typical point.
  const double zeta = 6.0, R = 1.0;
  std::vector<double> time_avgs;
  std::vector<PointConfiguration> ens;
  for (std::uint64_t s = 0; s < 40; ++s) {
    auto c = sample_poisson(zeta, BoxDomain{2, 8.0}, 400 + s);
    SimulationOptions o;
    o.T = 10.0;
    o.dt = 0.05;
    const auto path = simulate_sde(CoefficientField::full_space(2), Control::zero(), Vec{}, o, 17, s);
    time_avgs.push_back(environment_time_average(c, path, [&](const PointConfiguration& env) {
      double n = 0;
      for (const auto& p : env.points) n += norm(p) < R;
      return n;
    }, 5));
    ens.push_back(std::move(c));
  }
  const auto palm = empirical_palm_expectation(
      [&](const PointConfiguration& c, std::size_t i) {
        double n = 0;
        for (std::size_t j = 0; j < c.size(); ++j) n += j != i && distance(c.points[j], c.points[i]) < R;
        return n;
      },
      ens, 5.0);
  const double se = std::hypot(stderr_of(time_avgs), palm.standard_error);
  MESSAGE("time average " << mean(time_avgs) << " palm " << palm.value << " (zeta pi R^2 = " << zeta * M_PI << ")");
  CHECK(std::abs(mean(time_avgs) - palm.value) < 3.0 * se);
}

TEST_CASE("zero-control running cost") {
  const auto spec = HamiltonianSpec::quadratic(DriftField::constant(make_vec(0.4, 0.2)));
  SimulationOptions o;
  o.T = 2.0;
  o.dt = 0.01;
  o.normalization = Normalization::kGenerator;
  const auto path = simulate_sde(percolation_field(), Control::zero(), Vec{}, o, 3, 1);
  double oracle = 0;
  for (std::size_t k = 0; k + 1 < path.states.size(); ++k)
    oracle += o.dt * 0.5 * percolation_field().eval(path.states[k]).a() * norm2(make_vec(0.4, 0.2));
  CHECK(running_cost(percolation_field(), spec, path) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("endpoint csv") {
  EnsembleOptions o;
  o.horizons = {0.1};
  o.dt = 0.05;
  o.paths = 3;
  const auto e = simulate_ensemble(CoefficientField::full_space(2), Control::zero(), Vec{}, o);
  const auto csv = endpoints_csv(e);
  CHECK(csv.rfind("stream,T,x1,x2\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}
