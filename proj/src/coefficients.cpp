#include "chom/coefficients.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "chom/rng.h"

namespace chom {

namespace {

// Bump kernel K(s) = 35/32 (1 - s^2)^3 on [-1, 1], its CDF, and the integral
// of the CDF (the mollified ReLU at unit width).
double bump_cdf(double s) {
  if (s <= -1.0) return 0.0;
  if (s >= 1.0) return 1.0;
  const double s2 = s * s;
  return 0.5 + 35.0 / 32.0 * s * (1.0 - s2 + s2 * s2 * (3.0 / 5.0) - s2 * s2 * s2 / 7.0);
}

double smooth_relu(double u) {
  if (u <= -1.0) return 0.0;
  if (u >= 1.0) return u;
  const double u2 = u * u;
  const double q = u2 / 2.0 - u2 * u2 / 4.0 + u2 * u2 * u2 / 10.0 - u2 * u2 * u2 * u2 / 56.0;
  return 0.5 * (u + 1.0) + 35.0 / 32.0 * (q - 93.0 / 280.0);
}

Vec random_in_box(Philox& rng, int dim, double half_width) {
  Vec x{};
  for (int k = 0; k < dim; ++k) x[static_cast<std::size_t>(k)] = half_width * (2.0 * rng.uniform() - 1.0);
  return x;
}

Vec random_direction(Philox& rng, int dim) {
  Vec v{};
  for (int k = 0; k < dim; ++k) v[static_cast<std::size_t>(k)] = rng.normal();
  const double n = norm(v);
  return (1.0 / n) * v;
}

}  // namespace

SmoothClamp::SmoothClamp(double width) : width_(width) {
  if (!(width > 0.0 && width < 0.5)) throw std::invalid_argument("SmoothClamp width must be in (0, 1/2)");
}

double SmoothClamp::value(double t) const {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  const double w = width_;
  return w * (smooth_relu((t - w) / w) - smooth_relu((t - 1.0 + w) / w)) / (1.0 - 2.0 * w);
}

double SmoothClamp::slope(double t) const {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  const double w = width_;
  return (bump_cdf((t - w) / w) - bump_cdf((t - 1.0 + w) / w)) / (1.0 - 2.0 * w);
}

ConstantProfile::ConstantProfile(int dimension, double level, double probe_half_width)
    : dimension_(dimension), level_(level), probe_half_width_(probe_half_width) {
  check_dimension(dimension);
  if (!(level >= 0.0) || !std::isfinite(level)) throw std::invalid_argument("profile level must be finite and >= 0");
}

ClusterProfile::ClusterProfile(const PointConfiguration& config, std::optional<int> component,
                               double smoothing_radius)
    : graph_(std::make_shared<const ClusterGraph>(config)), radius_(smoothing_radius) {
  if (!(smoothing_radius > 0.0) || smoothing_radius > kBallRadius) {
    throw std::invalid_argument("smoothing_radius must lie in (0, 1/2]");
  }
  if (!component) component = graph_->unbounded_proxy();
  if (component) {
    component_ = *component;
    for (std::size_t i = 0; i < graph_->node_count(); ++i)
      if (graph_->label(i) == component_) members_.push_back(i);
  }
  member_index_ = SpatialIndex(graph_->config().box, graph_->config().points, members_);
  // Balls covering a common point are pairwise adjacent, so at most 1 + degree of any of them.
  std::size_t cover = members_.empty() ? 0 : 1;
  for (std::size_t i : members_) cover = std::max(cover, 1 + graph_->neighbors(i).size());
  max_cover_ = cover;
}

double ClusterProfile::lipschitz() const {
  if (members_.empty()) return 0.0;
  return clamp_.max_slope() / radius_ * std::pow(static_cast<double>(max_cover_), 1.0 / kDepthExponent);
}

ProfileSample ClusterProfile::sample(const Vec& y) const {
  // D = (sum_i (1/2 - |y - x_i|)_+^p)^(1/p) and m = psi(D / r).
  double s = 0.0;
  Vec ds{};
  const auto& pts = graph_->config().points;
  member_index_.for_each_near(y, [&](std::size_t i) {
    const Vec diff = y - pts[i];
    const double r = norm(diff);
    const double depth = kBallRadius - r;
    if (depth <= 0.0) return;
    const double pw = std::pow(depth, kDepthExponent - 1);
    s += pw * depth;
    if (r > 0.0) ds -= (kDepthExponent * pw / r) * diff;
  });
  if (s <= 0.0) return {};
  const double depth = std::pow(s, 1.0 / kDepthExponent);
  const double t = depth / radius_;
  if (t >= 1.0) return {1.0, Vec{}};
  // grad D = D^(1-p) grad(s) / p
  const Vec grad_depth = (std::pow(depth, 1.0 - kDepthExponent) / kDepthExponent) * ds;
  return {clamp_.value(t), (clamp_.slope(t) / radius_) * grad_depth};
}

bool ClusterProfile::in_cluster(const Vec& y) const {
  bool found = false;
  const auto& pts = graph_->config().points;
  member_index_.for_each_near(y, [&](std::size_t i) {
    if (!found && norm2(y - pts[i]) < kBallRadius * kBallRadius) found = true;
  });
  return found;
}

double ClusterProfile::support_distance(const Vec& y) const {
  if (members_.empty()) return std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  const auto& pts = graph_->config().points;
  member_index_.for_each_near(y, [&](std::size_t i) { best = std::min(best, distance(y, pts[i])); });
  // The index only guarantees neighbours within distance 1.
  if (!(best < 1.0)) {
    for (std::size_t i : members_) best = std::min(best, distance(y, pts[i]));
  }
  return std::max(0.0, best - kBallRadius);
}

double ClusterProfile::div_a_bound() const { return lipschitz(); }

CoefficientField::CoefficientField(std::shared_ptr<const Profile> profile) : profile_(std::move(profile)) {
  if (!profile_) throw std::invalid_argument("null profile");
}

CoefficientField CoefficientField::full_space(int dimension, double level) {
  return CoefficientField(std::make_shared<ConstantProfile>(dimension, level));
}

CoefficientField CoefficientField::on_cluster(const PointConfiguration& config, double smoothing_radius) {
  return CoefficientField(std::make_shared<ClusterProfile>(config, std::nullopt, smoothing_radius));
}

DriftField DriftField::constant(const Vec& b) {
  DriftField f;
  f.constant_ = b;
  return f;
}

DriftField DriftField::random_fourier(int dimension, int modes, double amplitude, double length_scale,
                                      std::uint64_t seed) {
  check_dimension(dimension);
  if (modes < 1 || !(length_scale > 0.0)) throw std::invalid_argument("invalid random Fourier drift parameters");
  DriftField f;
  Philox rng(seed, 0xD1F7);
  const double scale = amplitude / std::sqrt(static_cast<double>(modes));
  for (int m = 0; m < modes; ++m) {
    Mode mode{};
    for (int k = 0; k < dimension; ++k) {
      mode.amplitude[static_cast<std::size_t>(k)] = scale * rng.normal();
      mode.frequency[static_cast<std::size_t>(k)] = rng.normal() / length_scale;
    }
    mode.phase = 2.0 * std::numbers::pi * rng.uniform();
    f.modes_.push_back(mode);
  }
  return f;
}

Vec DriftField::operator()(const Vec& y) const {
  Vec b = constant_;
  for (const auto& mode : modes_) b += std::cos(dot(mode.frequency, y) + mode.phase) * mode.amplitude;
  return b;
}

double DriftField::sup_bound() const {
  double s = norm(constant_);
  for (const auto& mode : modes_) s += norm(mode.amplitude);
  return s;
}

double DriftField::lipschitz() const {
  double s = 0.0;
  for (const auto& mode : modes_) s += norm(mode.amplitude) * norm(mode.frequency);
  return s;
}

HamiltonianSpec HamiltonianSpec::quadratic(DriftField drift) {
  HamiltonianSpec spec;
  spec.kind = HamiltonianKind::kQuadratic;
  spec.drift = std::move(drift);
  return spec;
}

HamiltonianSpec HamiltonianSpec::power(double alpha, double coefficient) {
  if (!(alpha > 1.0) || !(coefficient > 0.0)) throw std::invalid_argument("power Hamiltonian needs alpha > 1, c > 0");
  HamiltonianSpec spec;
  spec.kind = HamiltonianKind::kPower;
  spec.alpha = alpha;
  spec.coefficient = coefficient;
  return spec;
}

double hamiltonian(const HamiltonianSpec& spec, const FieldPoint& fp, const Vec& b, const Vec& p) {
  const double a = fp.a();
  double h = 0.0;
  switch (spec.kind) {
    case HamiltonianKind::kQuadratic:
      h = a * (0.5 * norm2(p) + dot(b, p));
      break;
    case HamiltonianKind::kPower:
      h = spec.coefficient * std::pow(a * norm2(p), 0.5 * spec.alpha);
      break;
    case HamiltonianKind::kCustom:
      h = spec.custom(a, b, p);
      break;
  }
  if (spec.nondivergence) h += 0.5 * dot(fp.div_a(), p);
  return h;
}

Vec hamiltonian_gradient(const HamiltonianSpec& spec, const FieldPoint& fp, const Vec& b, const Vec& p) {
  const double a = fp.a();
  Vec g{};
  switch (spec.kind) {
    case HamiltonianKind::kQuadratic:
      g = a * (p + b);
      break;
    case HamiltonianKind::kPower: {
      const double r = norm(p);
      if (r > 0.0 && a > 0.0) {
        g = (spec.coefficient * spec.alpha * std::pow(a, 0.5 * spec.alpha) * std::pow(r, spec.alpha - 2.0)) * p;
      }
      break;
    }
    case HamiltonianKind::kCustom:
      throw std::logic_error("hamiltonian_gradient: custom Hamiltonians have no analytic gradient");
  }
  if (spec.nondivergence) g += 0.5 * fp.div_a();
  return g;
}

double lagrangian(const HamiltonianSpec& spec, const FieldPoint& fp, const Vec& b, const Vec& q) {
  const double a = fp.a();
  if (a == 0.0) return 0.0;
  switch (spec.kind) {
    case HamiltonianKind::kQuadratic:
      return 0.5 * a * norm2(q - b);
    case HamiltonianKind::kPower: {
      // Maximiser is p = t q/|q|; maximise phi(t) = a s t - c a^(alpha/2) t^alpha over t >= 0.
      const double s = norm(q);
      if (s == 0.0) return 0.0;
      const double alpha = spec.alpha;
      const double c = spec.coefficient * std::pow(a, 0.5 * alpha);
      auto dphi = [&](double t) { return a * s - c * alpha * std::pow(t, alpha - 1.0); };
      auto d2phi = [&](double t) { return -c * alpha * (alpha - 1.0) * std::pow(t, alpha - 2.0); };
      double lo = 0.0;
      double hi = 1.0;
      for (int i = 0; dphi(hi) > 0.0; ++i) {
        hi *= 2.0;
        if (i > 2000) throw ConjugationError("lagrangian: could not bracket the maximiser");
      }
      double t = 0.5 * (lo + hi);
      bool converged = false;
      for (int iter = 0; iter < 200; ++iter) {
        const double g = dphi(t);
        if (g > 0.0) lo = t; else hi = t;
        const double h2 = d2phi(t);
        double next = (h2 < 0.0 && std::isfinite(h2)) ? t - g / h2 : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::abs(next - t) <= 1e-15 * std::max(1.0, t) || hi - lo <= 1e-15 * std::max(1.0, hi)) {
          t = next;
          converged = true;
          break;
        }
        t = next;
      }
      if (!converged) throw ConjugationError("lagrangian: Newton iteration did not converge");
      return a * s * t - c * std::pow(t, alpha);
    }
    case HamiltonianKind::kCustom:
      break;
  }
  throw ConjugationError("lagrangian: no conjugation available for custom Hamiltonians");
}

Vec hamiltonian_p_lipschitz(const HamiltonianSpec& spec, const FieldPoint& fp, const Vec& b, double gradient_bound,
                            int dim) {
  const double a = fp.a();
  Vec out{};
  const Vec half_div = 0.5 * fp.div_a();
  for (int k = 0; k < dim; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    double v = 0.0;
    switch (spec.kind) {
      case HamiltonianKind::kQuadratic:
        v = a * (gradient_bound + std::abs(b[ks]));
        break;
      case HamiltonianKind::kPower:
        v = spec.coefficient * spec.alpha * std::pow(a, 0.5 * spec.alpha) *
            std::pow(gradient_bound * std::sqrt(static_cast<double>(dim)), spec.alpha - 1.0);
        break;
      case HamiltonianKind::kCustom:
        throw std::logic_error("hamiltonian_p_lipschitz: unsupported for custom Hamiltonians");
    }
    if (spec.nondivergence) v += std::abs(half_div[ks]);
    out[ks] = v;
  }
  return out;
}

double eval_H(const HamiltonianSpec& spec, const CoefficientField& field, const Vec& y, const Vec& p) {
  return hamiltonian(spec, field.eval(y), spec.drift(y), p);
}

double eval_L(const HamiltonianSpec& spec, const CoefficientField& field, const Vec& y, const Vec& q) {
  return lagrangian(spec, field.eval(y), spec.drift(y), q);
}

HamiltonianSpec nondivergence_form(const HamiltonianSpec& spec) {
  HamiltonianSpec out = spec;
  out.nondivergence = true;
  return out;
}

const AssumptionCheck* AssumptionReport::find(const std::string& name) const {
  for (const auto& c : checks)
    if (c.name == name) return &c;
  return nullptr;
}

bool AssumptionReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const AssumptionCheck& c) { return c.informational || c.passed; });
}

AssumptionReport validate_assumptions(const CoefficientField& field, const HamiltonianSpec& spec,
                                      const ValidationOptions& options) {
  if (options.probe_budget < 1000) throw std::invalid_argument("probe_budget must be at least 1000");
  const int dim = field.dimension();
  const double box = field.profile().probe_half_width();
  const double alpha = spec.growth_exponent();
  Philox rng(options.seed, 0xA55E);
  AssumptionReport report;
  report.c5 = field.c5();

  auto add = [&](std::string name, double value, double bound, bool passed, bool informational = false) {
    report.checks.push_back({std::move(name), value, bound, passed, informational});
  };

  // F1: ellipticity, a = sigma sigma / 2, support, Lipschitz moduli.
  double min_a = std::numeric_limits<double>::infinity(), max_a = 0.0, max_identity = 0.0;
  double off_support = 0.0, lip_sigma = 0.0, lip_div = 0.0, div_sup = 0.0;
  std::vector<Vec> cluster_probes;
  for (int i = 0; i < options.probe_budget; ++i) {
    const Vec y = random_in_box(rng, dim, box);
    const FieldPoint fp = field.eval(y);
    min_a = std::min(min_a, fp.a());
    max_a = std::max(max_a, fp.a());
    max_identity = std::max(max_identity, std::abs(fp.a() - 0.5 * fp.sigma() * fp.sigma()));
    if (!field.in_cluster(y)) off_support = std::max(off_support, std::abs(fp.m));
    else cluster_probes.push_back(y);
    div_sup = std::max(div_sup, norm(fp.div_a()));
    const double step = 0.02 * rng.uniform() + 1e-4;
    const Vec z = y + step * random_direction(rng, dim);
    const FieldPoint fz = field.eval(z);
    lip_sigma = std::max(lip_sigma, std::abs(fz.sigma() - fp.sigma()) / step);
    lip_div = std::max(lip_div, norm(fz.div_a() - fp.div_a()) / step);
  }
  report.lipschitz_sigma = lip_sigma;
  report.lipschitz_div_a = lip_div;
  report.div_a_sup = div_sup;
  add("psd", min_a, 0.0, min_a >= 0.0);
  add("upper_ellipticity", max_a, report.c5, max_a <= report.c5 + 1e-15);
  add("a_equals_half_sigma_sigma", max_identity, 1e-15, max_identity <= 1e-15);
  add("support_in_cluster", off_support, 0.0, off_support == 0.0);
  add("sigma_lipschitz", lip_sigma, field.lipschitz_sigma(), lip_sigma <= field.lipschitz_sigma() * (1.0 + 1e-6) + 1e-12);
  add("div_a_bounded", div_sup, field.div_a_bound(), div_sup <= field.div_a_bound() * (1.0 + 1e-6) + 1e-12);
  add("div_a_lipschitz", lip_div, 0.0, std::isfinite(lip_div), true);

  // F2: convexity of p -> H(y, +-p), growth bounds, H = 0 off the cluster.
  if (cluster_probes.empty()) cluster_probes.push_back(Vec{});
  auto pick = [&](int i) { return cluster_probes[static_cast<std::size_t>(i) % cluster_probes.size()]; };
  double worst_convexity = 0.0;
  double off_h = 0.0;
  for (int i = 0; i < options.probe_budget; ++i) {
    const Vec y = pick(i);
    const FieldPoint fp = field.eval(y);
    const Vec b = spec.drift(y);
    const Vec p1 = (4.0 * rng.uniform()) * random_direction(rng, dim);
    const Vec p2 = (4.0 * rng.uniform()) * random_direction(rng, dim);
    for (double s : {1.0, -1.0}) {
      const double mid = hamiltonian(spec, fp, b, (0.5 * s) * (p1 + p2));
      const double avg = 0.5 * (hamiltonian(spec, fp, b, s * p1) + hamiltonian(spec, fp, b, s * p2));
      const double scale = 1e-12 * (1.0 + std::abs(avg));
      worst_convexity = std::max(worst_convexity, mid - avg - scale);
    }
    const Vec yo = random_in_box(rng, dim, box);
    if (!field.in_cluster(yo)) {
      const FieldPoint fo = field.eval(yo);
      HamiltonianSpec base = spec;
      base.nondivergence = false;
      off_h = std::max(off_h, std::abs(hamiltonian(base, fo, spec.drift(yo), p1)));
    }
  }
  add("convexity", worst_convexity, 0.0, worst_convexity <= 0.0);
  add("H_zero_off_cluster", off_h, 0.0, off_h == 0.0);

  // Growth constants fitted on the nondegenerate part of the probe set.
  HamiltonianSpec base = spec;
  base.nondivergence = false;
  double c6 = std::numeric_limits<double>::infinity(), c8 = 0.0;
  constexpr double kLargeNorm = 100.0;
  std::vector<std::pair<double, double>> samples;  // (|p|_a, H)
  for (int i = 0; i < options.probe_budget; ++i) {
    const Vec y = pick(i);
    const FieldPoint fp = field.eval(y);
    if (!(fp.a() > 1e-8)) continue;
    const Vec b = spec.drift(y);
    const Vec dir = random_direction(rng, dim);
    const double scale = 1.0 / std::sqrt(fp.a());
    const Vec big = (kLargeNorm * scale) * dir;
    const double ratio = hamiltonian(base, fp, b, big) / std::pow(kLargeNorm, alpha);
    c6 = std::min(c6, ratio);
    c8 = std::max(c8, ratio);
    const double rn = 3.0 * rng.uniform();
    samples.emplace_back(rn, hamiltonian(base, fp, b, (rn * scale) * dir));
  }
  if (!std::isfinite(c6)) c6 = 0.0;
  double c7 = 0.0, c9 = 0.0;
  for (const auto& [pn, h] : samples) {
    c7 = std::max(c7, c6 * std::pow(pn, alpha) - h);
    c9 = std::max(c9, h - c8 * std::pow(pn, alpha));
  }
  report.c6 = c6;
  report.c7 = c7;
  report.c8 = c8;
  report.c9 = c9;
  add("coercivity_c6", c6, 0.0, c6 > 0.0);
  add("growth_c8", c8, 0.0, std::isfinite(c8) && c8 > 0.0);

  // F3: Lipschitz moduli of H in p (c16) and in space (c14, c15).
  double c16 = 0.0, c15 = 0.0, c14 = 0.0;
  for (int i = 0; i < options.probe_budget; ++i) {
    const Vec y = pick(i);
    const FieldPoint fp = field.eval(y);
    const Vec b = spec.drift(y);
    const Vec p = (3.0 * rng.uniform()) * random_direction(rng, dim);
    const Vec q = p + (0.5 * rng.uniform() + 1e-3) * random_direction(rng, dim);
    const double denom = std::pow(norm(p) + norm(q) + 1.0, alpha - 1.0) * norm(p - q);
    c16 = std::max(c16, std::abs(hamiltonian(base, fp, b, p) - hamiltonian(base, fp, b, q)) / denom);

    const double step = 0.02 * rng.uniform() + 1e-4;
    const Vec z = y + step * random_direction(rng, dim);
    const FieldPoint fz = field.eval(z);
    const Vec bz = spec.drift(z);
    c15 = std::max(c15, std::abs(hamiltonian(base, fp, b, Vec{}) - hamiltonian(base, fz, bz, Vec{})) / step);
    const double pn = norm(p);
    if (pn > 0.5) {
      const double dh = std::abs(hamiltonian(base, fp, b, p) - hamiltonian(base, fz, bz, p)) / step;
      c14 = std::max(c14, (dh - c15) / std::pow(pn, alpha));
    }
  }
  report.c14 = c14;
  report.c15 = c15;
  report.c16 = c16;
  add("p_lipschitz_c16", c16, 0.0, std::isfinite(c16));
  add("x_lipschitz_c14", c14, 0.0, std::isfinite(c14), true);

  // Moment E_0[xi^-chi] over cluster probes; reported, divergence flagged.
  const double delta = options.delta;
  const double gamma = options.gamma;
  report.chi = 0.5 * alpha * std::max((1.0 + delta) / (alpha - (1.0 + delta)), gamma / (alpha - 1.0));
  double sum = 0.0, half_sum = 0.0, largest = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < cluster_probes.size(); ++i) {
    const double xi = field.eval(cluster_probes[i]).xi();
    if (!(xi > 0.0)) continue;
    const double term = std::pow(xi, -report.chi);
    sum += term;
    largest = std::max(largest, term);
    ++n;
    if (i < cluster_probes.size() / 2) half_sum += term;
  }
  report.xi_moment = n ? sum / static_cast<double>(n) : 0.0;
  // Heavy tail: one probe dominating the sum, or the half-sample mean far off.
  const double half_mean = half_sum / std::max<std::size_t>(1, n / 2);
  report.xi_moment_flag = n == 0 || largest > 0.5 * sum || half_mean > 2.0 * report.xi_moment ||
                          2.0 * half_mean < report.xi_moment;
  add("xi_moment", report.xi_moment, report.chi, !report.xi_moment_flag, true);
  return report;
}

}  // namespace chom
