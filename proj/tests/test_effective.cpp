#include <cmath>
#include <limits>

#include "doctest.h"
#include <json.hpp>

#include "chom/effective.h"
#include "chom/environment.h"
#include "chom/rng.h"

using namespace chom;

namespace {

const PointConfiguration& percolation_sample() {
  static const PointConfiguration c = condition_on_origin(4.0, BoxDomain{2, 6.0}, 17, 200);
  return c;
}

const CoefficientField& percolation_field() {
  static const CoefficientField f = CoefficientField::on_cluster(percolation_sample(), 0.25);
  return f;
}

std::vector<double> random_corrector(std::size_t n, std::uint64_t seed, double scale) {
  Philox rng(seed);
  std::vector<double> g(n);
  for (double& v : g) v = scale * rng.normal();
  return g;
}

double half_norm2(const Vec& t) { return 0.5 * norm2(t); }

}  // namespace

TEST_CASE("constant environment: the zero corrector is optimal") {
  const auto field = CoefficientField::full_space(2);
  const Vec b = make_vec(0.3, -0.2);
  const auto spec = HamiltonianSpec::quadratic(DriftField::constant(b));
  for (const Vec& theta : {make_vec(1, 0), make_vec(-0.6, 0.8), make_vec(0.25, 1.5)}) {
    const auto r = variational_Hbar(field, spec, theta, CorrectorShape{1.0, 0.125});
    const double exact = 0.25 * norm2(theta) + 0.5 * dot(b, theta);
    CHECK(r.value == doctest::Approx(exact).epsilon(1e-12));
    CHECK(r.zero_corrector_value == doctest::Approx(exact).epsilon(1e-12));
    CHECK(r.sandwich_holds);
  }
}

TEST_CASE("theta = 0 gives zero") {
  const auto r = variational_Hbar(percolation_field(), HamiltonianSpec::quadratic(), Vec{}, CorrectorShape{2.0, 0.125});
  CHECK(std::abs(r.value) <= 1e-12);
}

TEST_CASE("returned value is the hard max at the returned corrector") {
  const auto spec = HamiltonianSpec::quadratic(DriftField::constant(make_vec(0.2, 0.0)));
  const Vec theta = make_vec(0.8, 0.6);
  const CorrectorShape shape{2.0, 0.125};
  const auto r = variational_Hbar(percolation_field(), spec, theta, shape);
  VariationalObjective obj(percolation_field(), spec, theta, shape);
  const auto phi = obj.node_values(r.corrector);
  CHECK(r.value >= *std::max_element(phi.begin(), phi.end()) - 1e-12);
  CHECK(r.value == *std::max_element(phi.begin(), phi.end()));
  CHECK(r.value <= r.zero_corrector_value + 1e-12);
  REQUIRE(r.stages.size() == 3);
  const double logn = std::log(static_cast<double>(r.node_count));
  for (const auto& s : r.stages) {
    CHECK(s.sandwich_holds);
    CHECK(s.softmax <= s.hard_max + 1e-12);
    CHECK(s.hard_max <= s.softmax + logn / s.beta + 1e-12);
  }
  MESSAGE("H-bar(0.8, 0.6) = " << r.value << " (zero corrector " << r.zero_corrector_value << ")");
}

TEST_CASE("objective against an independent evaluation") {
  const auto b = DriftField::random_fourier(2, 3, 0.4, 1.0, 5);
  const auto spec = HamiltonianSpec::quadratic(b);
  const Vec theta = make_vec(0.7, -0.4);
  const double h = 0.25, W = 1.0;
  VariationalObjective obj(percolation_field(), spec, theta, CorrectorShape{W, h});
  REQUIRE(obj.nodes_per_axis() == 9);
  REQUIRE(obj.variable_count() == 49);
  const auto g = random_corrector(obj.variable_count(), 3, 0.1);
  // Node c sits at -W + c h; g is zero off the 7x7 interior and phi is evaluated for c in [-1, 9]^2.
  auto gval = [&](int cx, int cy) {
    if (cx < 1 || cx > 7 || cy < 1 || cy > 7) return 0.0;
    return g[static_cast<std::size_t>((cy - 1) * 7 + (cx - 1))];
  };
  auto pos = [&](int cx, int cy) { return make_vec(-W + cx * h, -W + cy * h); };
  auto grad = [&](int cx, int cy) {
    return theta + make_vec((gval(cx + 1, cy) - gval(cx - 1, cy)) / (2 * h), (gval(cx, cy + 1) - gval(cx, cy - 1)) / (2 * h));
  };
  auto a = [&](int cx, int cy) {
    const double m = percolation_field().profile().sample(pos(cx, cy)).m;
    return 0.5 * m * m;
  };
  std::vector<double> oracle;
  for (int cy = -1; cy <= 9; ++cy)
    for (int cx = -1; cx <= 9; ++cx) {
      if (!percolation_field().in_cluster(pos(cx, cy))) continue;
      const Vec p = grad(cx, cy);
      const double div = (a(cx + 1, cy) * grad(cx + 1, cy)[0] - a(cx - 1, cy) * grad(cx - 1, cy)[0]) / (2 * h) +
                         (a(cx, cy + 1) * grad(cx, cy + 1)[1] - a(cx, cy - 1) * grad(cx, cy - 1)[1]) / (2 * h);
      const Vec bb = b(pos(cx, cy));
      oracle.push_back(0.5 * div + a(cx, cy) * (0.5 * norm2(p) + dot(bb, p)));
    }
  const auto phi = obj.node_values(g);
  REQUIRE(phi.size() == oracle.size());
  for (std::size_t i = 0; i < phi.size(); ++i) CHECK(phi[i] == doctest::Approx(oracle[i]).epsilon(1e-13));
}

TEST_CASE("gradient against finite differences") {
  const auto spec = HamiltonianSpec::quadratic(DriftField::constant(make_vec(0.1, 0.3)));
  VariationalObjective obj(percolation_field(), spec, make_vec(0.5, -0.9), CorrectorShape{2.0, 0.125});
  const auto g = random_corrector(obj.variable_count(), 8, 0.05);
  for (double beta : {1.0, 10.0, 100.0}) {
    const auto check = check_objective_gradient(obj, g, beta, 200, 4);
    MESSAGE("beta " << beta << " max relative error " << check.max_relative_error);
    CHECK(check.max_relative_error <= 1e-5);
  }
}

TEST_CASE("serial and parallel objective agree bit for bit") {
  const auto spec = HamiltonianSpec::quadratic(DriftField::random_fourier(2, 2, 0.3, 1.5, 2));
  VariationalObjective obj(percolation_field(), spec, make_vec(1.0, 0.2), CorrectorShape{2.0, 0.125});
  const auto g = random_corrector(obj.variable_count(), 9, 0.1);
  std::vector<double> g1(g.size()), g2(g.size());
  const double v1 = obj.softmax(g, 10.0, g1, true);
  const double v2 = obj.softmax(g, 10.0, g2, false);
  CHECK(v1 == v2);
  CHECK(g1 == g2);
}

TEST_CASE("discrete gradient of the corrector is closed") {
  const auto spec = HamiltonianSpec::quadratic();
  VariationalObjective obj(percolation_field(), spec, make_vec(1, 0), CorrectorShape{2.0, 0.125});
  const auto full = obj.expand(random_corrector(obj.variable_count(), 11, 1.0));
  const int n = obj.nodes_per_axis();
  const double h = obj.spacing();
  auto G = [&](int x, int y, int k) {
    auto at = [&](int i, int j) { return full[static_cast<std::size_t>(j * n + i)]; };
    return k == 0 ? (at(x + 1, y) - at(x - 1, y)) / (2 * h) : (at(x, y + 1) - at(x, y - 1)) / (2 * h);
  };
  double worst = 0;
  for (int y = 2; y < n - 2; ++y)
    for (int x = 2; x < n - 2; ++x) {
      // Circulation around the 2h square through the four axis neighbours.
      const double circ = (G(x + 1, y, 1) - G(x - 1, y, 1)) - (G(x, y + 1, 0) - G(x, y - 1, 0));
      worst = std::max(worst, std::abs(circ));
    }
  CHECK(worst <= 1e-10);
  CHECK(full.front() == 0.0);
  CHECK(full.back() == 0.0);
}

TEST_CASE("tiny instance against brute-force minimization") {
  const auto spec = HamiltonianSpec::quadratic(DriftField::constant(make_vec(0.2, -0.1)));
  const Vec theta = make_vec(1.0, 0.5);
  const double h = 0.25, W = 0.5;
  const CorrectorShape shape{W, h};
  VariationalObjective obj(percolation_field(), spec, theta, shape);
  REQUIRE(obj.nodes_per_axis() == 5);
  REQUIRE(obj.variable_count() == 9);

  // Oracle: node data precomputed for c in [-3, 7]^2, hard max evaluated directly.
  const int N = 11;  // coordinates c in [-3, 7]
  std::vector<double> a(N * N);
  std::vector<char> in(N * N);
  auto idx = [&](int cx, int cy) { return static_cast<std::size_t>((cy + 3) * N + cx + 3); };
  for (int cy = -3; cy <= 7; ++cy)
    for (int cx = -3; cx <= 7; ++cx) {
      const Vec y = make_vec(-W + cx * h, -W + cy * h);
      const double m = percolation_field().profile().sample(y).m;
      a[idx(cx, cy)] = 0.5 * m * m;
      in[idx(cx, cy)] = percolation_field().in_cluster(y);
    }
  const Vec b = make_vec(0.2, -0.1);
  auto gv = [](const std::array<double, 9>& g, int cx, int cy) {
    return (cx >= 1 && cx <= 3 && cy >= 1 && cy <= 3) ? g[static_cast<std::size_t>((cy - 1) * 3 + cx - 1)] : 0.0;
  };
  auto node_phi = [&](const std::array<double, 9>& g, int cx, int cy) {
    auto p = [&](int x, int y) {
      return theta + make_vec((gv(g, x + 1, y) - gv(g, x - 1, y)) / (2 * h), (gv(g, x, y + 1) - gv(g, x, y - 1)) / (2 * h));
    };
    const Vec q = p(cx, cy);
    const double div = (a[idx(cx + 1, cy)] * p(cx + 1, cy)[0] - a[idx(cx - 1, cy)] * p(cx - 1, cy)[0] +
                        a[idx(cx, cy + 1)] * p(cx, cy + 1)[1] - a[idx(cx, cy - 1)] * p(cx, cy - 1)[1]) /
                       (2 * h);
    return 0.5 * div + a[idx(cx, cy)] * (0.5 * norm2(q) + dot(b, q));
  };
  auto hard_max = [&](const std::array<double, 9>& g, int* ax = nullptr, int* ay = nullptr) {
    double best = -1e300;
    for (int cy = -1; cy <= 5; ++cy)
      for (int cx = -1; cx <= 5; ++cx) {
        if (!in[idx(cx, cy)]) continue;
        const double v = node_phi(g, cx, cy);
        if (v > best) {
          best = v;
          if (ax) *ax = cx, *ay = cy;
        }
      }
    return best;
  };
  // Coarse enumeration over 5 levels per value, then a subgradient method on
  // the hard max (each phi_i is quadratic in g, so central differences of the
  // active node give its gradient exactly up to rounding).
  const double levels[] = {-0.2, -0.1, 0.0, 0.1, 0.2};
  std::array<double, 9> best{}, g{};
  double best_value = hard_max(best);
  for (int code = 0; code < 1953125; ++code) {
    int c = code;
    for (int k = 0; k < 9; ++k, c /= 5) g[static_cast<std::size_t>(k)] = levels[c % 5];
    const double v = hard_max(g);
    if (v < best_value) best_value = v, best = g;
  }
  g = best;
  for (int it = 0; it < 200000; ++it) {
    int ax = 0, ay = 0;
    hard_max(g, &ax, &ay);
    std::array<double, 9> sub{};
    double sn = 0;
    for (std::size_t k = 0; k < 9; ++k) {
      auto gp = g, gm = g;
      gp[k] += 1e-4, gm[k] -= 1e-4;
      sub[k] = (node_phi(gp, ax, ay) - node_phi(gm, ax, ay)) / 2e-4;
      sn += sub[k] * sub[k];
    }
    if (sn == 0) break;
    const double step = 0.05 / std::sqrt(it + 1.0) / std::sqrt(sn);
    for (std::size_t k = 0; k < 9; ++k) g[k] -= step * sub[k];
    const double v = hard_max(g);
    if (v < best_value) best_value = v, best = g;
  }
  const auto r = variational_Hbar(percolation_field(), spec, theta, shape);
  MESSAGE("optimizer " << r.value << ", brute force " << best_value << ", zero corrector " << r.zero_corrector_value);
  CHECK(std::abs(r.value - best_value) <= 1e-2);
  // The independent evaluation agrees with the objective at the optimizer's corrector.
  std::array<double, 9> opt{};
  std::copy(r.corrector.begin(), r.corrector.end(), opt.begin());
  CHECK(hard_max(opt) == doctest::Approx(r.value).epsilon(1e-13));
}

TEST_CASE("optimizer divergence is reported") {
  const auto spec = HamiltonianSpec::power(2.0, 0.5);
  OptimizerConfig cfg;
  cfg.beta_schedule = {1.0};
  std::vector<double> bad(VariationalObjective(percolation_field(), spec, make_vec(1, 0), CorrectorShape{1.0, 0.25})
                              .variable_count(),
                          std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(variational_Hbar(percolation_field(), spec, make_vec(1, 0), CorrectorShape{1.0, 0.25}, cfg, bad),
                  OptimizerDivergence);
}

TEST_CASE("theta grids") {
  const auto c = ThetaGrid::cartesian(2, 1.0, 5);
  CHECK(c.points.size() == 25);
  CHECK(c.points[0] == make_vec(-1, -1));
  CHECK(c.points[12] == make_vec(0, 0));
  const auto p = ThetaGrid::default_polar();
  CHECK(p.points.size() == 24);
  CHECK(p.points[6] == make_vec(0, 0.5));
  CHECK(p.points[12] == make_vec(-0.5, 0));
  CHECK(norm(p.points[5]) == doctest::Approx(1.5));
}

TEST_CASE("convexity check along grid lines") {
  const auto grid = ThetaGrid::cartesian(2, 1.5, 31);
  CHECK(check_convexity(analytic_table(grid, half_norm2)).convex);
  const auto well = analytic_table(grid, [](const Vec& t) { return std::pow(t[0] * t[0] - 1, 2) + 0.5 * t[1] * t[1]; });
  const auto rep = check_convexity(well);
  CHECK_FALSE(rep.convex);
  CHECK(rep.worst_violation > 0.0);
  CHECK(check_convexity(analytic_table(ThetaGrid::default_polar(), half_norm2)).convex);
  CHECK_FALSE(check_convexity(analytic_table(ThetaGrid::default_polar(), [](const Vec& t) { return -norm2(t); })).convex);
}

TEST_CASE("Legendre transform: closed forms") {
  const auto grid = ThetaGrid::cartesian(2, 3.0, 61);
  const auto ygrid = ThetaGrid::cartesian(2, 2.0, 41);
  const auto self = legendre_transform(analytic_table(grid, half_norm2), ygrid);
  CHECK(self.convex_input);
  const Vec b = make_vec(0.5, -0.3);
  const auto shifted = legendre_transform(analytic_table(grid, [&](const Vec& t) { return half_norm2(t) + dot(b, t); }), ygrid);
  double worst_self = 0, worst_shift = 0;
  for (std::size_t j = 0; j < ygrid.points.size(); ++j) {
    const Vec& y = ygrid.points[j];
    const double e1 = std::abs(self.values[j] - half_norm2(y));
    const double e2 = std::abs(shifted.values[j] - half_norm2(y - b));
    CHECK(e1 <= self.modulus[j]);
    CHECK(e2 <= shifted.modulus[j]);
    worst_self = std::max(worst_self, e1);
    worst_shift = std::max(worst_shift, e2);
    CHECK_FALSE(self.boundary_maximizer[j]);
  }
  // y on the theta grid: the maximizer theta = y is a grid point.
  CHECK(worst_self <= 1e-12);
  MESSAGE("shift rule worst error " << worst_shift);
}

TEST_CASE("double transform recovers the convex hull") {
  const auto grid = ThetaGrid::cartesian(2, 1.5, 61);
  const auto well = analytic_table(grid, [](const Vec& t) { return std::pow(t[0] * t[0] - 1, 2) + 0.5 * t[1] * t[1]; });
  const auto rate = legendre_transform(well, ThetaGrid::cartesian(2, 7.5, 301));
  CHECK_FALSE(rate.convex_input);
  const auto back = legendre_dual(rate, grid);
  double modulus = 0;
  for (double m : rate.modulus) modulus = std::max(modulus, m);
  double worst = 0;
  for (std::size_t i = 0; i < grid.points.size(); ++i) {
    const Vec& t = grid.points[i];
    const double hull = (std::abs(t[0]) <= 1 ? 0.0 : std::pow(t[0] * t[0] - 1, 2)) + 0.5 * t[1] * t[1];
    worst = std::max(worst, std::abs(back.values[i] - hull));
  }
  MESSAGE("hull error " << worst << " modulus " << modulus);
  CHECK(worst <= 2 * modulus);
}

TEST_CASE("Legendre transform reverses order") {
  const auto grid = ThetaGrid::cartesian(2, 2.0, 21);
  const auto ygrid = ThetaGrid::cartesian(2, 3.0, 31);
  Philox rng(21);
  for (int pair = 0; pair < 20; ++pair) {
    const double c1 = 0.2 + rng.uniform(), c2 = rng.normal(), c3 = rng.normal();
    const double bump = rng.uniform();
    auto H1 = [&](const Vec& t) { return c1 * norm2(t) + c2 * t[0] + c3 * t[1]; };
    auto H2 = [&](const Vec& t) { return H1(t) + bump * (1 + std::sin(3 * t[0] + t[1])); };
    const auto I1 = legendre_transform(analytic_table(grid, H1), ygrid);
    const auto I2 = legendre_transform(analytic_table(grid, H2), ygrid);
    for (std::size_t j = 0; j < ygrid.points.size(); ++j) CHECK(I1.values[j] >= I2.values[j]);
  }
}

TEST_CASE("Hopf-Lax formula") {
  const auto grid = ThetaGrid::cartesian(2, 2.0, 41);
  const auto rate = legendre_transform(analytic_table(grid, half_norm2), grid);

  SUBCASE("linear data") {
    const Vec theta0 = make_vec(0.6, -1.2);
    const auto f = [&](const Vec& x) { return dot(theta0, x); };
    const double t = 0.7;
    const Vec x1 = make_vec(0.3, 0.1), x2 = make_vec(-1.1, 0.45);
    const auto u1 = hopf_lax(f, rate, t, x1), u2 = hopf_lax(f, rate, t, x2);
    CHECK(u1.value == doctest::Approx(dot(theta0, x1) + t * half_norm2(theta0)).epsilon(1e-12));
    CHECK(std::abs((u1.value - u2.value) - dot(theta0, x1 - x2)) <= 1e-12);
    CHECK_FALSE(u1.boundary_maximizer);
  }
  SUBCASE("small time") {
    const auto f = [](const Vec& x) { return std::sin(x[0]) + std::abs(x[1]); };
    for (const Vec& x : {make_vec(0.2, -0.4), make_vec(1.3, 0.0)})
      CHECK(std::abs(hopf_lax(f, rate, 1e-3, x).value - f(x)) <= 3e-3);
  }
  SUBCASE("concave quadratic data") {
    // sup_y -|y|^2 - |y - x|^2 / (2t) is attained at y = x / (1 + 2t).
    const auto f = [](const Vec& x) { return -norm2(x); };
    const double t = 0.5;
    for (const Vec& x : {make_vec(0.7, -0.3), make_vec(-0.2, 0.9)}) {
      const auto u = hopf_lax(f, rate, t, x);
      CHECK(std::abs(u.value + norm2(x) / (1 + 2 * t)) <= 1e-2);
      CHECK_FALSE(u.boundary_maximizer);
    }
  }
  SUBCASE("maximizer outside the grid is flagged") {
    const auto f = [](const Vec& x) { return 10 * x[0]; };
    CHECK(hopf_lax(f, rate, 1.0, Vec{}).boundary_maximizer);
  }
}

TEST_CASE("equivalence in the constant environment") {
  EquivalenceOptions o;
  o.shape = CorrectorShape{1.0, 0.125};
  o.ensemble.horizons = {5.0};
  o.ensemble.dt = 0.01;
  o.ensemble.paths = 4000;
  o.ensemble.seed = 5;
  const auto thetas = ThetaGrid::list(2, {Vec{}, make_vec(0.5, 0), make_vec(0, -0.5), make_vec(0.3, 0.3)});
  const auto rep = equivalence_check(CoefficientField::full_space(2), DriftField{}, thetas, o);
  CHECK(rep.all_hold);
  for (const auto& r : rep.rows) {
    CHECK(r.variational == doctest::Approx(0.25 * norm2(r.theta)).epsilon(1e-12));
    CHECK(std::abs(r.feynman_kac - 0.25 * norm2(r.theta)) <= 3 * r.feynman_kac_error + 1e-12);
  }
  CHECK(std::abs(rep.rows[0].feynman_kac) <= 1e-15);
}

TEST_CASE("equivalence on a percolation sample") {
  EquivalenceOptions o;
  o.shape = CorrectorShape::from_ratio(percolation_sample().box, 0.5, 0.125);
  o.ensemble.horizons = {10.0};
  o.ensemble.dt = 0.02;
  o.ensemble.paths = 2000;
  o.ensemble.seed = 9;
  const auto thetas = ThetaGrid::polar(8, {1.0});
  const auto rep = equivalence_check(percolation_field(), DriftField{}, thetas, o);
  for (const auto& r : rep.rows)
    MESSAGE("theta (" << r.theta[0] << ", " << r.theta[1] << "): FK " << r.feynman_kac << " +- " << r.feynman_kac_error
                      << ", variational " << r.variational << std::string(r.finite_size ? " [finite size]" : ""));
  CHECK(rep.all_hold);
  CHECK(equivalence_csv(rep).rfind("theta_1,theta_2,feynman_kac", 0) == 0);
}

TEST_CASE("table output") {
  const auto t = analytic_table(ThetaGrid::polar(4, {0.5, 1.0}), half_norm2);
  const auto csv = table_csv(t);
  CHECK(csv.rfind("theta_1,theta_2,value,error,method\n0.5,0,0.125,0,analytic\n", 0) == 0);
  const auto j = nlohmann::json::parse(table_json(t));
  CHECK(j["method"] == "analytic");
  CHECK(j["values"].size() == 8);
  CHECK(j["grid"]["kind"] == "polar");
  const std::vector<EffectiveHamiltonianTable> tables{t};
  const auto svg = table_svg(tables);
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  const auto rate = legendre_transform(analytic_table(ThetaGrid::cartesian(2, 1.0, 3), half_norm2));
  CHECK(rate_csv(rate).rfind("y_1,y_2,value,modulus,boundary\n", 0) == 0);
}
