#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chom/coefficients.h"
#include "chom/diffusion.h"
#include "chom/lbfgs.h"
#include "chom/vec.h"

namespace chom {

/// Grid carrying the corrector g in environment coordinates: nodes on
/// [-half_width, half_width]^d, g = 0 on the boundary nodes and outside.
/// The objective is evaluated on these nodes and one ring beyond.
struct CorrectorShape {
  double half_width = 5.0;
  double spacing = 0.125;

  /// Support box as a fraction of the sample box.
  static CorrectorShape from_ratio(const BoxDomain& box, double support_ratio, double spacing);
};

struct OptimizerConfig {
  std::vector<double> beta_schedule{1.0, 10.0, 100.0};
  LbfgsOptions lbfgs{};
  bool parallel = true;
};

/// Objective of the entropy-relaxed variational formula for one theta:
///   phi_i(g) = div_h(a (grad_h g + theta))_i / 2 + H(y_i, grad_h g + theta)
/// over the in-cluster nodes i, with central differences throughout. The sum
/// of the divergence terms does not depend on g.
class VariationalObjective {
 public:
  VariationalObjective(const CoefficientField& field, const HamiltonianSpec& spec, const Vec& theta,
                       const CorrectorShape& shape);

  int dimension() const { return dim_; }
  int nodes_per_axis() const { return n_; }
  double spacing() const { return h_; }
  /// Number of free values (nodes strictly inside the support box).
  std::size_t variable_count() const { return variables_.size(); }
  /// Number of in-cluster nodes where phi is evaluated.
  std::size_t node_count() const { return eval_.size(); }
  const Vec& theta() const { return theta_; }

  /// Position of free value v.
  Vec variable_position(std::size_t v) const;
  /// Position of evaluation node e.
  Vec node_position(std::size_t e) const;

  /// phi at every evaluation node.
  std::vector<double> node_values(std::span<const double> g, bool parallel = true) const;
  double hard_max(std::span<const double> g, bool parallel = true) const;
  /// (1/beta) log sum exp(beta phi) - log(n)/beta, so that
  /// softmax <= hard max <= softmax + log(n)/beta. Gradient written to grad.
  double softmax(std::span<const double> g, double beta, std::span<double> grad, bool parallel = true,
                 double* hard_max_out = nullptr) const;
  /// Corrector values on the full node grid (zeros on the boundary).
  std::vector<double> expand(std::span<const double> g) const;

 private:
  void fill_padded(std::span<const double> g, std::vector<double>& padded) const;
  void node_terms(const std::vector<double>& padded, std::vector<double>& phi, std::vector<Vec>* dh,
                  bool parallel) const;

  int dim_;
  int n_;
  int np_;
  double h_;
  double half_width_;
  Vec theta_;
  HamiltonianSpec spec_;
  std::array<std::size_t, kMaxDim> stride_{};
  std::vector<FieldPoint> field_;
  std::vector<Vec> drift_;
  std::vector<double> a_;
  std::vector<std::size_t> variables_;
  std::vector<std::size_t> eval_;
  std::vector<std::size_t> flux_nodes_;
};

class OptimizerDivergence : public std::runtime_error {
 public:
  OptimizerDivergence(const std::string& what, std::vector<double> last_iterate, double last_value)
      : std::runtime_error(what), last_iterate_(std::move(last_iterate)), last_value_(last_value) {}
  const std::vector<double>& last_iterate() const { return last_iterate_; }
  double last_value() const { return last_value_; }

 private:
  std::vector<double> last_iterate_;
  double last_value_;
};

struct AnnealingStage {
  double beta = 0.0;
  double softmax = 0.0;
  double hard_max = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;
  bool converged = false;
  /// softmax <= hard max <= softmax + log(n)/beta held at every evaluation.
  bool sandwich_holds = true;
};

struct VariationalResult {
  Vec theta{};
  /// Hard max of phi at the returned corrector.
  double value = 0.0;
  /// Stage whose end point is returned (-1: the starting corrector).
  int selected_stage = -1;
  /// Hard max at g = 0.
  double zero_corrector_value = 0.0;
  std::vector<double> corrector;
  std::vector<AnnealingStage> stages;
  std::size_t node_count = 0;
  std::size_t variable_count = 0;
  bool sandwich_holds = true;
};

/// Minimizes the soft max of phi over g with warm starts along the beta
/// schedule. Returns the corrector with the smallest hard max among the start
/// and the stage end points, together with that hard max. Throws
/// OptimizerDivergence when the objective turns non-finite.
VariationalResult variational_Hbar(const CoefficientField& field, const HamiltonianSpec& spec, const Vec& theta,
                                   const CorrectorShape& shape, const OptimizerConfig& config = {},
                                   std::span<const double> initial = {});

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t probes = 0;
};

/// Central finite differences of the soft max along random unit directions
/// against the analytic gradient; relative error against max(|directional derivative|, floor).
/// The default step is the cube root of machine epsilon.
GradientCheck check_objective_gradient(const VariationalObjective& objective, std::span<const double> g, double beta,
                                       std::size_t probes, std::uint64_t seed, double step = 6.0554544523933395e-6,
                                       double floor = 1e-8);

// ---------------------------------------------------------------------------
// Tables

enum class HbarMethod { kVariational, kFeynmanKac, kAnalytic };
const char* to_string(HbarMethod m);

enum class ThetaGridKind { kCartesian, kPolar, kList };

struct ThetaGrid {
  ThetaGridKind kind = ThetaGridKind::kList;
  int dimension = 2;
  std::vector<Vec> points;
  /// Cartesian: nodes per axis and spacing on [-half_width, half_width]^d.
  int per_axis = 0;
  double spacing = 0.0;
  double half_width = 0.0;
  /// Polar (d = 2): directions and radii; point index = direction * radii + radius.
  int directions = 0;
  std::vector<double> radii;

  static ThetaGrid cartesian(int dimension, double half_width, int per_axis);
  static ThetaGrid polar(int directions, std::vector<double> radii);
  static ThetaGrid list(int dimension, std::vector<Vec> points);
  /// 8 directions times radii {0.5, 1, 1.5}.
  static ThetaGrid default_polar() { return polar(8, {0.5, 1.0, 1.5}); }
};

struct EffectiveHamiltonianTable {
  ThetaGrid grid;
  std::vector<double> values;
  std::vector<double> errors;
  HbarMethod method = HbarMethod::kAnalytic;

  std::size_t size() const { return values.size(); }
  const Vec& theta(std::size_t i) const { return grid.points[i]; }
};

EffectiveHamiltonianTable analytic_table(const ThetaGrid& grid, const std::function<double(const Vec&)>& Hbar);

/// Variational H-bar at every theta; thetas run in parallel, each optimization serial.
EffectiveHamiltonianTable variational_table(const CoefficientField& field, const HamiltonianSpec& spec,
                                            const ThetaGrid& grid, const CorrectorShape& shape,
                                            const OptimizerConfig& config = {},
                                            std::vector<VariationalResult>* details = nullptr);

/// Feynman-Kac H-bar for every theta from one ensemble of the uncontrolled
/// diffusion with drift b (generator normalization) started at x0.
EffectiveHamiltonianTable feynman_kac_table(const CoefficientField& field, const DriftField& b, const ThetaGrid& grid,
                                            const Vec& x0, const EnsembleOptions& ensemble, int blocks = 20);

struct ConvexityReport {
  bool convex = true;
  /// Most negative second difference along grid lines, after the tolerance.
  double worst_violation = 0.0;
  std::size_t lines_checked = 0;
};

/// Second differences along grid lines (Cartesian axes, polar rays and
/// diameters) against 3 combined errors plus `slack`.
ConvexityReport check_convexity(const EffectiveHamiltonianTable& table, double slack = 1e-12);

// ---------------------------------------------------------------------------
// Legendre transform and Hopf-Lax

struct RateFunctionTable {
  ThetaGrid grid;
  std::vector<double> values;
  /// Bound on the gap to the exact transform: (|y| + Lip) * max distance to the theta grid.
  std::vector<double> modulus;
  /// Theta attaining the max lies on the boundary of the theta grid.
  std::vector<char> boundary_maximizer;
  bool convex_input = true;
  /// Lipschitz constant of H-bar over the table.
  double lipschitz = 0.0;

  std::size_t size() const { return values.size(); }
  const Vec& velocity(std::size_t i) const { return grid.points[i]; }
};

/// I(y) = max over table thetas of <theta, y> - H-bar(theta) on the given
/// y-grid. A non-convex table is flagged; the result is the transform of its convex hull.
RateFunctionTable legendre_transform(const EffectiveHamiltonianTable& table, const ThetaGrid& ygrid);
/// Same on a Cartesian y-grid with the table's node count covering the slopes of H-bar.
RateFunctionTable legendre_transform(const EffectiveHamiltonianTable& table);

/// Inverse transform max_y <theta, y> - I(y) at the given thetas.
EffectiveHamiltonianTable legendre_dual(const RateFunctionTable& rate, const ThetaGrid& thetas);

struct HopfLaxValue {
  double value = 0.0;
  Vec maximizer{};
  /// The maximizing velocity lies on the boundary of the rate grid.
  bool boundary_maximizer = false;
};

/// sup over rate-grid velocities v of f(x + t v) - t I(v).
HopfLaxValue hopf_lax(const std::function<double(const Vec&)>& f, const RateFunctionTable& rate, double t,
                      const Vec& x);

// ---------------------------------------------------------------------------
// Equivalence of the two estimators

struct EquivalenceRow {
  Vec theta{};
  double feynman_kac = 0.0;
  double feynman_kac_error = 0.0;
  double variational = 0.0;
  /// variational - feynman_kac.
  double gap = 0.0;
  bool holds = true;
  /// Relative gap above 25%: reported as a finite-size effect.
  bool finite_size = false;
};

struct EquivalenceReport {
  std::vector<EquivalenceRow> rows;
  bool all_hold = true;
};

struct EquivalenceOptions {
  CorrectorShape shape{};
  OptimizerConfig optimizer{};
  EnsembleOptions ensemble{};
  Vec x0{};
  int blocks = 20;
};

/// feynman_kac - 3 SE <= variational at every theta (quadratic Hamiltonian with drift b).
EquivalenceReport equivalence_check(const CoefficientField& field, const DriftField& b, const ThetaGrid& thetas,
                                    const EquivalenceOptions& options);

// ---------------------------------------------------------------------------
// Output

/// theta_1..theta_d,value,error,method
std::string table_csv(const EffectiveHamiltonianTable& table);
std::string table_json(const EffectiveHamiltonianTable& table);
/// y_1..y_d,value,modulus,boundary
std::string rate_csv(const RateFunctionTable& rate);
std::string equivalence_csv(const EquivalenceReport& report);
/// Line plot of H-bar against |theta| along each direction of the grid
/// (polar rays, or the coordinate axes of a Cartesian grid).
std::string table_svg(std::span<const EffectiveHamiltonianTable> tables);

}  // namespace chom
