#include <cmath>
#include <memory>

#include "doctest.h"

#include "chom/coefficients.h"
#include "chom/environment.h"
#include "chom/rng.h"

using namespace chom;

namespace {

PointConfiguration single_ball_chain() {
  PointConfiguration c;
  c.box = BoxDomain{2, 3.0};
  c.intensity = 1.0;
  for (int k = -3; k <= 3; ++k) c.points.push_back(make_vec(0.8 * k, 0.0));
  return c;
}

const PointConfiguration& percolation_sample() {
  static const PointConfiguration c = condition_on_origin(4.0, BoxDomain{2, 6.0}, 2024, 200);
  return c;
}

Vec random_vec(Philox& rng, double scale) { return make_vec(scale * (2 * rng.uniform() - 1), scale * (2 * rng.uniform() - 1)); }

}  // namespace

TEST_CASE("smooth clamp") {
  SmoothClamp psi;
  CHECK(psi.value(-0.3) == 0.0);
  CHECK(psi.value(0.0) == 0.0);
  CHECK(psi.value(1.0) == 1.0);
  CHECK(psi.value(1.7) == 1.0);
  CHECK(psi.value(0.5) == doctest::Approx(0.5).epsilon(1e-14));
  double prev = 0.0, max_slope = 0.0;
  for (int i = 1; i <= 2000; ++i) {
    const double t = i / 2000.0;
    const double v = psi.value(t);
    CHECK(v >= prev - 1e-15);
    prev = v;
    const double h = 1e-6;
    const double fd = (psi.value(t + h) - psi.value(t - h)) / (2 * h);
    CHECK(std::abs(fd - psi.slope(t)) < 1e-7);
    max_slope = std::max(max_slope, psi.slope(t));
  }
  CHECK(max_slope <= psi.max_slope() + 1e-12);
  CHECK(max_slope == doctest::Approx(psi.max_slope()).epsilon(1e-6));
  CHECK_THROWS(SmoothClamp(0.0));
}

TEST_CASE("plateau and support") {
  auto field = CoefficientField::on_cluster(single_ball_chain(), 0.2);
  const auto deep = field.eval(make_vec(0.0, 0.05));
  CHECK(deep.a() == 0.5);
  CHECK(deep.sigma() == 1.0);
  CHECK(norm(deep.div_a()) == 0.0);
  const auto out = field.eval(make_vec(0.0, 0.6));
  CHECK(out.a() == 0.0);
  CHECK(out.sigma() == 0.0);
  CHECK(norm(out.div_a()) == 0.0);
  CHECK_FALSE(field.in_cluster(make_vec(0.0, 0.6)));
  CHECK_THROWS(CoefficientField::on_cluster(single_ball_chain(), 0.0));
  CHECK_THROWS(CoefficientField::on_cluster(single_ball_chain(), 0.6));
}

TEST_CASE("div a matches finite differences") {
  auto field = CoefficientField::on_cluster(percolation_sample(), 0.25);
  Philox rng(17);
  const double h = 1e-5;
  double worst = 0.0;
  int tested = 0;
  while (tested < 1000) {
    const Vec y = random_vec(rng, 5.0);
    const auto fp = field.eval(y);
    if (fp.m <= 0.0 || fp.m >= 1.0) continue;
    ++tested;
    Vec fd{};
    for (int k = 0; k < 2; ++k) {
      const Vec e = unit(k, 1);
      fd[k] = (field.eval(y + h * e).a() - field.eval(y - h * e).a()) / (2 * h);
    }
    const double scale = std::max(norm(fp.div_a()), 1e-3);
    worst = std::max(worst, norm(fd - fp.div_a()) / scale);
  }
  MESSAGE("max relative error of div a: " << worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("eigenvalues and xi") {
  auto field = CoefficientField::on_cluster(percolation_sample(), 0.25);
  Philox rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto fp = field.eval(random_vec(rng, 6.0));
    CHECK(fp.a() >= 0.0);
    CHECK(fp.a() <= 0.5);
    CHECK(fp.xi() == fp.a());
    CHECK(fp.a() == 0.5 * fp.sigma() * fp.sigma());
  }
}

TEST_CASE("standard Hamiltonian pair") {
  // a = Id needs m = sqrt(2).
  CoefficientField field(std::make_shared<ConstantProfile>(2, std::sqrt(2.0)));
  const auto spec = HamiltonianSpec::quadratic();
  const Vec p = make_vec(0.3, -1.1), q = make_vec(2.0, 0.5);
  CHECK(eval_H(spec, field, Vec{}, p) == doctest::Approx(0.5 * norm2(p)));
  CHECK(eval_L(spec, field, Vec{}, q) == doctest::Approx(0.5 * norm2(q)));
}

TEST_CASE("H vanishes at p = 0 and off the cluster") {
  auto field = CoefficientField::on_cluster(percolation_sample(), 0.25);
  const auto spec = HamiltonianSpec::quadratic(DriftField::random_fourier(2, 4, 1.0, 1.0, 5));
  Philox rng(8);
  for (int i = 0; i < 500; ++i) {
    const Vec y = random_vec(rng, 6.0);
    CHECK(eval_H(spec, field, y, Vec{}) == 0.0);
    if (field.eval(y).m == 0.0) CHECK(eval_H(spec, field, y, random_vec(rng, 3.0)) == 0.0);
  }
}

TEST_CASE("power conjugation against grid search") {
  Philox rng(12);
  for (double alpha : {2.0, 3.0}) {
    const auto spec = HamiltonianSpec::power(alpha, 0.5);
    for (int trial = 0; trial < 10; ++trial) {
      const FieldPoint fp{0.3 + 0.7 * rng.uniform(), Vec{}};
      const Vec q = random_vec(rng, 1.0);
      const double numeric = lagrangian(spec, fp, Vec{}, q);
      double brute = -1e300;
      const int n = 801;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const Vec p = make_vec(-4.0 + 8.0 * i / (n - 1), -4.0 + 8.0 * j / (n - 1));
          brute = std::max(brute, fp.a() * dot(p, q) - hamiltonian(spec, fp, Vec{}, p));
        }
      CHECK(std::abs(numeric - brute) <= 1e-3);
      if (alpha == 2.0) CHECK(numeric == doctest::Approx(0.5 * fp.a() * norm2(q)));
    }
  }
}

TEST_CASE("Legendre round trip") {
  Philox rng(4);
  const auto spec = HamiltonianSpec::power(3.0, 0.4);
  for (int trial = 0; trial < 5; ++trial) {
    const FieldPoint fp{0.5 + 0.5 * rng.uniform(), Vec{}};
    const Vec p = random_vec(rng, 1.0);
    double best = -1e300;
    const int n = 301;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const Vec q = make_vec(-3.0 + 6.0 * i / (n - 1), -3.0 + 6.0 * j / (n - 1));
        best = std::max(best, fp.a() * dot(p, q) - lagrangian(spec, fp, Vec{}, q));
      }
    CHECK(best == doctest::Approx(hamiltonian(spec, fp, Vec{}, p)).epsilon(2e-3));
  }
  CHECK_THROWS_AS(lagrangian(HamiltonianSpec{HamiltonianKind::kCustom, {}, 2, 1, false,
                                             [](double, const Vec&, const Vec&) { return 0.0; }},
                             FieldPoint{1.0, {}}, Vec{}, make_vec(1, 0)),
                  ConjugationError);
}

TEST_CASE("convexity midpoint probes") {
  auto field = CoefficientField::on_cluster(percolation_sample(), 0.25);
  const auto spec = HamiltonianSpec::quadratic(DriftField::constant(make_vec(0.3, -0.2)));
  Philox rng(6);
  for (int i = 0; i < 1000; ++i) {
    const Vec y = random_vec(rng, 5.0);
    const Vec p1 = random_vec(rng, 5.0), p2 = random_vec(rng, 5.0);
    const double mid = eval_H(spec, field, y, 0.5 * (p1 + p2));
    CHECK(mid <= 0.5 * (eval_H(spec, field, y, p1) + eval_H(spec, field, y, p2)) + 1e-12);
  }
}

TEST_CASE("nondivergence form") {
  auto field = CoefficientField::on_cluster(percolation_sample(), 0.25);
  const auto spec = HamiltonianSpec::quadratic(DriftField::constant(make_vec(0.1, 0.4)));
  const auto hat = nondivergence_form(spec);
  Philox rng(10);
  for (int i = 0; i < 1000; ++i) {
    const Vec y = random_vec(rng, 5.0);
    const Vec p = random_vec(rng, 3.0);
    const auto fp = field.eval(y);
    CHECK(eval_H(hat, field, y, p) - eval_H(spec, field, y, p) == doctest::Approx(0.5 * dot(fp.div_a(), p)).epsilon(1e-12));
    CHECK(eval_H(hat, field, y, Vec{}) == eval_H(spec, field, y, Vec{}));
    if (norm(fp.div_a()) == 0.0) CHECK(eval_H(hat, field, y, p) == eval_H(spec, field, y, p));
  }
}

TEST_CASE("drift field bounds") {
  const auto b = DriftField::random_fourier(2, 6, 0.8, 0.7, 99);
  CHECK_FALSE(b.is_constant());
  Philox rng(1);
  for (int i = 0; i < 500; ++i) {
    const Vec x = random_vec(rng, 10.0), y = x + random_vec(rng, 0.1);
    CHECK(norm(b(x)) <= b.sup_bound() + 1e-12);
    CHECK(norm(b(x) - b(y)) <= b.lipschitz() * distance(x, y) + 1e-12);
  }
  const auto again = DriftField::random_fourier(2, 6, 0.8, 0.7, 99);
  CHECK(again(make_vec(0.3, 0.2)) == b(make_vec(0.3, 0.2)));
  CHECK(DriftField{}.is_zero());
}

TEST_CASE("assumption validation on the full space") {
  const auto report = validate_assumptions(CoefficientField::full_space(2), HamiltonianSpec::quadratic());
  for (const auto& c : report.checks) CHECK_MESSAGE(c.passed, c.name);
  CHECK(report.all_passed());
  CHECK(report.c5 == 0.5);
  CHECK(report.c6 == doctest::Approx(0.5));
  CHECK(report.c8 == doctest::Approx(0.5));
  CHECK(report.c7 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(report.c9 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS(validate_assumptions(CoefficientField::full_space(2), HamiltonianSpec::quadratic(), {999, 1, 0.5, 2.5}));
}

TEST_CASE("assumption validation on a percolation field") {
  const double r = 0.25;
  auto field = CoefficientField::on_cluster(percolation_sample(), r);
  const auto report = validate_assumptions(field, HamiltonianSpec::quadratic(DriftField::constant(make_vec(0.2, 0))));
  MESSAGE("empirical Lip(sigma) = " << report.lipschitz_sigma << ", recorded " << field.lipschitz_sigma());
  CHECK(report.lipschitz_sigma <= 1.25 / r);
  CHECK(report.lipschitz_sigma <= field.lipschitz_sigma());
  const auto* convex = report.find("convexity");
  REQUIRE(convex);
  CHECK(convex->passed);
  CHECK(report.find("support_in_cluster")->passed);
  CHECK(report.find("upper_ellipticity")->passed);
  CHECK(report.find("H_zero_off_cluster")->passed);
  MESSAGE("xi moment " << report.xi_moment << " chi " << report.chi << " flag " << report.xi_moment_flag);
  CHECK(report.chi > 0.0);
}

TEST_CASE("non-convex Hamiltonian raises the convexity flag") {
  HamiltonianSpec bad;
  bad.kind = HamiltonianKind::kCustom;
  bad.custom = [](double a, const Vec&, const Vec& p) { return a * std::cos(norm(p)); };
  const auto report = validate_assumptions(CoefficientField::full_space(2), bad);
  CHECK_FALSE(report.find("convexity")->passed);
  CHECK_FALSE(report.all_passed());
}
