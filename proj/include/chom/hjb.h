#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chom/cluster.h"
#include "chom/coefficients.h"
#include "chom/diffusion.h"
#include "chom/vec.h"

namespace chom {

enum class NodeKind : std::uint8_t {
  kInterior,  ///< x/eps in the cluster, updated
  kExterior,  ///< off the cluster, clamped to f
  kOuter,     ///< outer ring of the box, clamped to f
};

struct GridSpec {
  int dimension = 2;
  double half_width = 2.0;
  double spacing = 1.0 / 64.0;
};

/// Regular grid on [-W, W]^d with node kinds at scale eps.
class Grid {
 public:
  Grid(const CoefficientField& field, double epsilon, const GridSpec& spec);

  int dimension() const { return spec_.dimension; }
  int nodes_per_axis() const { return n_; }
  std::size_t size() const { return kinds_.size(); }
  double spacing() const { return spec_.spacing; }
  double half_width() const { return spec_.half_width; }
  double epsilon() const { return epsilon_; }
  std::size_t stride(int axis) const { return strides_[static_cast<std::size_t>(axis)]; }

  NodeKind kind(std::size_t i) const { return kinds_[i]; }
  Vec position(std::size_t i) const;
  /// Environment coordinates x / eps.
  Vec environment_position(std::size_t i) const { return (1.0 / epsilon_) * position(i); }
  const std::vector<std::size_t>& interior() const { return interior_; }
  const CoefficientField& field() const { return *field_; }

  /// Index of the node nearest to x.
  std::size_t nearest(const Vec& x) const;
  /// Interior nodes with every coordinate in [-w, w].
  std::vector<std::size_t> nodes_within(double w) const;

  /// Throws std::logic_error when a node kind disagrees with cluster membership of x/eps.
  void check_mask(const ClusterGraph& graph, int component) const;

 private:
  const CoefficientField* field_;
  double epsilon_;
  GridSpec spec_;
  int n_ = 0;
  std::array<std::size_t, kMaxDim> strides_{};
  std::vector<NodeKind> kinds_;
  std::vector<std::size_t> interior_;
};

/// Discretisation of the first-order terms.
///   kLaxFriedrichs: H-hat = H + div a . p / 2 with local Lax-Friedrichs dissipation.
///   kUpwindDivergence: div a . grad u / 2 upwinded, Lax-Friedrichs on H only.
enum class SchemeVariant { kLaxFriedrichs, kUpwindDivergence };

const char* to_string(SchemeVariant v);
SchemeVariant scheme_variant_from_string(const std::string& s);

class CflViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SolverOptions {
  double T = 1.0;
  /// Fraction of the stability limit used for the time step, in (0, 1/2].
  double cfl = 0.4;
  /// Explicit time step; every step must satisfy the stability inequality.
  std::optional<double> dt;
  SchemeVariant variant = SchemeVariant::kLaxFriedrichs;
  /// Fixed bound P on |d_k u| for the dissipation. By default P is taken per
  /// node and per step from the one-sided differences of the current iterate.
  std::optional<double> gradient_bound;
  /// Same dissipation on every node and axis instead of the local bound.
  std::optional<double> global_dissipation;
  /// Times at which to keep a snapshot (the final time is always kept).
  std::vector<double> snapshot_times;
  bool parallel = true;
};

struct GridFunction {
  double time = 0.0;
  std::vector<double> values;
};

/// One explicit step of the monotone scheme:
///   u_i' = u_i + dt [ sum_k eps a / (2h^2) D2_k u + H-hat(p) + sum_k alpha_ik D2_k u / (2h) ]
/// with central p and Dirichlet values on non-interior nodes. The dissipation
/// alpha_ik bounds |dH-hat/dp_k| over the gradients the stencil can produce and
/// is frozen during a step, so the update is nondecreasing in every stencil value.
class HjbStepper {
 public:
  HjbStepper(const Grid& grid, const HamiltonianSpec& spec, const SolverOptions& options);

  /// Sizes the dissipation for the given iterates (the maximum over all of
  /// them) and returns the largest stable step cfl / max rate.
  double prepare(std::span<const double> u, std::span<const double> other = {});
  /// Sets the step; throws CflViolation when dt * max rate > 1.
  void set_dt(double dt);

  double dt() const { return dt_; }
  /// dt * max_i sum_k (eps a_i / h^2 + alpha_ik / h [+ |div a_ik| / (2h)]); monotone iff <= 1.
  double stability_number() const { return dt_ * max_rate_; }
  double max_rate() const { return max_rate_; }
  /// Dissipation of interior node j (position in grid.interior()) along axis k.
  double dissipation(std::size_t j, int axis) const { return alpha_[j * kMaxDim + static_cast<std::size_t>(axis)]; }

  /// Updated value of grid node i.
  double update_node(std::size_t i, std::span<const double> u) const;
  /// Full step; returns the number of node-axis pairs where |dH/dp_k| exceeded alpha_k.
  std::size_t step(std::span<const double> u, std::span<double> out) const;
  std::size_t step_serial(std::span<const double> u, std::span<double> out) const;

 private:
  double update_interior(std::size_t j, std::span<const double> u, std::size_t* deficits) const;
  double local_gradient(std::size_t i, std::span<const double> u) const;

  const Grid* grid_;
  HamiltonianSpec spec_;
  SolverOptions options_;
  std::vector<FieldPoint> field_;
  std::vector<Vec> drift_;
  std::vector<double> base_rate_;
  std::vector<double> alpha_;
  double max_rate_ = 0.0;
  double dt_ = 0.0;
  bool count_deficits_ = true;
};

struct HjbSolution {
  std::vector<GridFunction> snapshots;
  std::size_t steps = 0;
  double min_dt = 0.0;
  double max_dt = 0.0;
  /// Largest dt * rate over all steps.
  double stability_number = 0.0;
  std::size_t dissipation_deficits = 0;

  const GridFunction& final_state() const { return snapshots.back(); }
};

using ScalarFunction = std::function<double(const Vec&)>;

std::vector<double> sample_on_grid(const Grid& grid, const ScalarFunction& f);

/// Explicit time stepping of du/dt = eps/2 div(a(x/eps) grad u) + H(x/eps, grad u), u = f on
/// the parabolic boundary.
HjbSolution solve_hjb_fd(const Grid& grid, const HamiltonianSpec& spec, const ScalarFunction& f,
                         const SolverOptions& options);

struct ControlEstimate {
  double value = 0.0;
  double standard_error = 0.0;
  std::size_t best = 0;
  std::vector<ScalarEstimate> per_control;
};

struct ControlMcOptions {
  double dt = 0.01;
  std::size_t paths = 1000;
  std::uint64_t seed = 1;
};

/// max over the family of mean[f(eps X_{t/eps}) - eps int_0^{t/eps} L(X_s, c_s) ds], X_0 = x/eps,
/// generator normalization. A lower bound for u_eps(t, x).
ControlEstimate solve_hjb_control_mc(const CoefficientField& field, const HamiltonianSpec& spec,
                                     const ScalarFunction& f, double epsilon, double t, const Vec& x,
                                     std::span<const Control> controls, const ControlMcOptions& options);

struct ComparisonReport {
  /// max over nodes and steps of u1 - u2
  double max_difference = 0.0;
  /// max over nodes of f1 - f2
  double max_data_difference = 0.0;
  double sup_solution_gap = 0.0;
  double sup_data_gap = 0.0;
  std::size_t steps = 0;
  bool comparison_holds = false;
  bool contraction_holds = false;
};

/// Runs both data through the same stepper in lockstep; the dissipation is sized for both.
ComparisonReport comparison_check(const Grid& grid, const HamiltonianSpec& spec, const ScalarFunction& f1,
                                  const ScalarFunction& f2, const SolverOptions& options, double tolerance = 1e-10);

struct ConvergenceRow {
  double epsilon = 0.0;
  double spacing = 0.0;
  std::size_t steps = 0;
  double error = 0.0;
  double relative_error = 0.0;
  std::size_t dissipation_deficits = 0;
};

struct ConvergenceTable {
  std::vector<ConvergenceRow> rows;
  /// Errors decrease along the epsilon sequence.
  bool monotone = false;
};

struct ConvergenceCase {
  double epsilon = 1.0;
  GridSpec grid;
};

/// sup over interior nodes of the inner half-box and snapshot times of |u_eps - u_hom|.
ConvergenceTable convergence_study(const CoefficientField& field, const HamiltonianSpec& spec,
                                   const ScalarFunction& f, std::span<const ConvergenceCase> cases,
                                   const std::function<double(double, const Vec&)>& u_hom,
                                   const SolverOptions& options);

/// CSV rows x_1..x_d, t, value.
std::string grid_function_csv(const Grid& grid, const GridFunction& u);
std::vector<char> grid_function_binary(const Grid& grid, const GridFunction& u);
GridFunction grid_function_from_binary(std::span<const char> bytes);

}  // namespace chom
