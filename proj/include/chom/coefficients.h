#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "chom/cluster.h"
#include "chom/vec.h"

namespace chom {

/// C^3 monotone transition with psi(t) = 0 for t <= 0 and psi(t) = 1 for
/// t >= 1: a ramp mollified by the bump (1 - s^2)^3 of relative width w.
class SmoothClamp {
 public:
  explicit SmoothClamp(double width = 0.05);
  double value(double t) const;
  double slope(double t) const;
  double max_slope() const { return 1.0 / (1.0 - 2.0 * width_); }

 private:
  double width_;
};

/// Value and gradient of the scalar profile m at one point.
struct ProfileSample {
  double m = 0.0;
  Vec grad{};
};

/// Scalar profile m: R^d -> [0, 1] defining a = m^2/2 Id and sigma = m Id.
class Profile {
 public:
  virtual ~Profile() = default;
  virtual ProfileSample sample(const Vec& y) const = 0;
  /// Whether y lies in the cluster the profile is supported on.
  virtual bool in_cluster(const Vec& y) const = 0;
  /// Nominal Lipschitz constant of m.
  virtual double lipschitz() const = 0;
  /// Nominal bound on |m grad m| = |div a|.
  virtual double div_a_bound() const = 0;
  virtual double max_level() const = 0;
  virtual int dimension() const = 0;
  /// Region where probes are drawn (half-width of a centred box).
  virtual double probe_half_width() const = 0;
  /// Distance from y to the closure of the support of m.
  virtual double support_distance(const Vec& y) const = 0;
};

/// m identically equal to `level` (level 1: the full-space environment).
class ConstantProfile final : public Profile {
 public:
  ConstantProfile(int dimension, double level, double probe_half_width = 5.0);
  ProfileSample sample(const Vec&) const override { return {level_, Vec{}}; }
  bool in_cluster(const Vec&) const override { return level_ > 0.0; }
  double lipschitz() const override { return 0.0; }
  double div_a_bound() const override { return 0.0; }
  double max_level() const override { return level_; }
  int dimension() const override { return dimension_; }
  double probe_half_width() const override { return probe_half_width_; }
  double support_distance(const Vec&) const override {
    return level_ > 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }

 private:
  int dimension_;
  double level_;
  double probe_half_width_;
};

/// m = psi(D / r) with the smoothed depth D = (sum_i (1/2 - |y - x_i|)_+^p)^(1/p)
/// over the balls of one cluster component. D dominates the depth of every
/// single ball, so m is one wherever some ball is covered to depth r, and D
/// vanishes exactly off the component.
class ClusterProfile final : public Profile {
 public:
  static constexpr int kDepthExponent = 16;

  ClusterProfile(const PointConfiguration& config, std::optional<int> component, double smoothing_radius);

  ProfileSample sample(const Vec& y) const override;
  bool in_cluster(const Vec& y) const override;
  /// psi' / r times the bound k^(1/p) on |grad D|, k the largest ball multiplicity.
  double lipschitz() const override;
  double div_a_bound() const override;
  double max_level() const override { return members_.empty() ? 0.0 : 1.0; }
  int dimension() const override { return graph_->config().dimension(); }
  double probe_half_width() const override { return graph_->config().box.half_width; }
  double support_distance(const Vec& y) const override;

  double smoothing_radius() const { return radius_; }
  const ClusterGraph& graph() const { return *graph_; }
  int component() const { return component_; }

 private:
  std::shared_ptr<const ClusterGraph> graph_;
  int component_ = -1;
  double radius_;
  SmoothClamp clamp_;
  std::vector<std::size_t> members_;
  SpatialIndex member_index_;
  std::size_t max_cover_ = 0;
};

/// Coefficient data at one point (environment coordinates).
struct FieldPoint {
  double m = 0.0;
  Vec grad_m{};

  double a() const { return 0.5 * m * m; }
  double sigma() const { return m; }
  double xi() const { return 0.5 * m * m; }
  Vec div_a() const { return m * grad_m; }
};

/// Isotropic degenerate coefficients a = m^2/2 Id, sigma = m Id.
class CoefficientField {
 public:
  explicit CoefficientField(std::shared_ptr<const Profile> profile);

  static CoefficientField full_space(int dimension, double level = 1.0);
  static CoefficientField on_cluster(const PointConfiguration& config, double smoothing_radius);

  FieldPoint eval(const Vec& y) const {
    const auto s = profile_->sample(y);
    return {s.m, s.grad};
  }
  bool in_cluster(const Vec& y) const { return profile_->in_cluster(y); }
  int dimension() const { return profile_->dimension(); }
  const Profile& profile() const { return *profile_; }

  double lipschitz_sigma() const { return profile_->lipschitz(); }
  /// Upper ellipticity constant: <a v, v> <= c5 |v|^2.
  double c5() const { return 0.5 * profile_->max_level() * profile_->max_level(); }
  double div_a_bound() const { return profile_->div_a_bound(); }

 private:
  std::shared_ptr<const Profile> profile_;
};

/// Stationary drift b: a constant vector or a seeded random Fourier field
/// b(y) = sum_k A_k cos(<w_k, y> + phi_k).
class DriftField {
 public:
  DriftField() = default;
  static DriftField constant(const Vec& b);
  static DriftField random_fourier(int dimension, int modes, double amplitude, double length_scale,
                                   std::uint64_t seed);

  Vec operator()(const Vec& y) const;
  bool is_zero() const { return modes_.empty() && norm2(constant_) == 0.0; }
  double sup_bound() const;
  double lipschitz() const;
  const Vec& constant_part() const { return constant_; }
  bool is_constant() const { return modes_.empty(); }

 private:
  struct Mode {
    Vec amplitude;
    Vec frequency;
    double phase;
  };
  Vec constant_{};
  std::vector<Mode> modes_;
};

enum class HamiltonianKind { kQuadratic, kPower, kCustom };

/// H(y, p). Quadratic: |p|_a^2 / 2 + <b, p>_a. Power: c |p|_a^alpha.
/// With `nondivergence` set, div a(y) . p / 2 is added.
struct HamiltonianSpec {
  HamiltonianKind kind = HamiltonianKind::kQuadratic;
  DriftField drift;
  double alpha = 2.0;
  double coefficient = 0.5;
  bool nondivergence = false;
  /// Only for kCustom: H from (a, b, p).
  std::function<double(double a, const Vec& b, const Vec& p)> custom;

  static HamiltonianSpec quadratic(DriftField drift = {});
  static HamiltonianSpec power(double alpha, double coefficient);
  /// Exponent alpha of the growth bounds.
  double growth_exponent() const { return kind == HamiltonianKind::kPower ? alpha : 2.0; }
};

class ConjugationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pointwise evaluators. The nondivergence term is included when the spec
// asks for it; the Lagrangian always conjugates the base Hamiltonian.
double hamiltonian(const HamiltonianSpec& spec, const FieldPoint& fp, const Vec& b, const Vec& p);
Vec hamiltonian_gradient(const HamiltonianSpec& spec, const FieldPoint& fp, const Vec& b, const Vec& p);
/// sup_p [<p, q>_a - H(p)]; closed form for the quadratic kind, safeguarded
/// Newton on the radial profile for the power kind.
double lagrangian(const HamiltonianSpec& spec, const FieldPoint& fp, const Vec& b, const Vec& q);
/// Per-component bound on |dH/dp_k| over the cube |p_j| <= gradient_bound.
Vec hamiltonian_p_lipschitz(const HamiltonianSpec& spec, const FieldPoint& fp, const Vec& b, double gradient_bound,
                            int dim);

double eval_H(const HamiltonianSpec& spec, const CoefficientField& field, const Vec& y, const Vec& p);
double eval_L(const HamiltonianSpec& spec, const CoefficientField& field, const Vec& y, const Vec& q);

/// H-hat(y, p) = H(y, p) + div a(y) . p / 2.
HamiltonianSpec nondivergence_form(const HamiltonianSpec& spec);

struct AssumptionCheck {
  std::string name;
  double value = 0.0;
  double bound = 0.0;
  bool passed = true;
  /// Reported only; not an inequality that must hold.
  bool informational = false;
};

struct AssumptionReport {
  std::vector<AssumptionCheck> checks;
  double c5 = 0.0, c6 = 0.0, c7 = 0.0, c8 = 0.0, c9 = 0.0;
  double c14 = 0.0, c15 = 0.0, c16 = 0.0;
  double lipschitz_sigma = 0.0;
  double lipschitz_div_a = 0.0;
  double div_a_sup = 0.0;
  double chi = 0.0;
  double xi_moment = 0.0;
  bool xi_moment_flag = false;

  const AssumptionCheck* find(const std::string& name) const;
  bool all_passed() const;
};

struct ValidationOptions {
  int probe_budget = 1000;
  std::uint64_t seed = 1;
  /// Moment exponents for chi(alpha, gamma, delta).
  double delta = 0.5;
  double gamma = 2.5;
};

AssumptionReport validate_assumptions(const CoefficientField& field, const HamiltonianSpec& spec,
                                      const ValidationOptions& options = {});

}  // namespace chom
