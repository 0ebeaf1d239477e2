#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chom/coefficients.h"
#include "chom/environment.h"
#include "chom/vec.h"

namespace chom {

/// Scaling of the Euler-Maruyama step.
///   kControlled: X += sigma dB + div a dt + a c dt
///   kGenerator:  X += sigma/sqrt(2) dB + (div a / 2 + a c) dt, whose generator
///                is div(a grad)/2 + <a c, grad>, the operator of the HJB solver.
enum class Normalization { kControlled, kGenerator };

const char* to_string(Normalization n);

/// Control families: zero, a deterministic function of time, or stationary feedback c = b(X).
class Control {
 public:
  enum class Kind { kZero, kTimeFunction, kFeedback };

  static Control zero();
  static Control time_function(std::function<Vec(double)> c, std::string label = "time_function");
  static Control constant(const Vec& c);
  static Control feedback(DriftField b);

  Vec operator()(double t, const Vec& x) const;
  Kind kind() const { return kind_; }
  const std::string& label() const { return label_; }

 private:
  Kind kind_ = Kind::kZero;
  std::function<Vec(double)> time_fn_;
  DriftField feedback_;
  std::string label_ = "zero";
};

struct SDEPath {
  std::vector<double> times;
  std::vector<Vec> states;
  /// Control value used on [t_k, t_k+1); one fewer entry than states.
  std::vector<Vec> control_trace;
};

class NonFiniteState : public std::runtime_error {
 public:
  NonFiniteState(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct SimulationOptions {
  double T = 1.0;
  double dt = 1e-2;
  Normalization normalization = Normalization::kControlled;
};

/// Number of steps for horizon T at step dt (T must be a multiple of dt up to rounding).
std::size_t step_count(double T, double dt);

/// One Euler-Maruyama path. Noise comes from Philox(seed, stream).
SDEPath simulate_sde(const CoefficientField& field, const Control& control, const Vec& x0,
                     const SimulationOptions& options, std::uint64_t seed, std::uint64_t stream);

/// Same scheme driven by caller-supplied Brownian increments (one per step).
SDEPath simulate_sde(const CoefficientField& field, const Control& control, const Vec& x0, double dt,
                     Normalization normalization, std::span<const Vec> increments);

/// Endpoints of independent paths, recorded at each horizon.
struct TrajectoryEnsemble {
  std::vector<double> horizons;
  /// endpoints[h][k]: state of path k at horizons[h].
  std::vector<std::vector<Vec>> endpoints;
  /// Largest distance of each path from the cluster closure over all steps
  /// (filled when requested).
  std::vector<double> max_excursion;
  Vec x0{};
  double dt = 0.0;
  Normalization normalization = Normalization::kControlled;
  std::string control;
  std::uint64_t seed = 0;
  int dimension = 2;

  std::size_t size() const { return endpoints.empty() ? 0 : endpoints.front().size(); }
  const std::vector<Vec>& final_endpoints() const { return endpoints.back(); }
  double final_horizon() const { return horizons.back(); }
};

struct EnsembleOptions {
  std::vector<double> horizons{1.0};
  double dt = 1e-2;
  Normalization normalization = Normalization::kControlled;
  std::size_t paths = 1000;
  std::uint64_t seed = 1;
  /// Measure distance to the cluster closure along each path.
  bool track_excursion = false;
};

/// Paths use streams 0..paths-1; OpenMP over streams. The result does not
/// depend on the thread count.
TrajectoryEnsemble simulate_ensemble(const CoefficientField& field, const Control& control, const Vec& x0,
                                     const EnsembleOptions& options);
/// Single-threaded reference for simulate_ensemble.
TrajectoryEnsemble simulate_ensemble_serial(const CoefficientField& field, const Control& control, const Vec& x0,
                                            const EnsembleOptions& options);

/// Distance from x to the closure of the field's support (0 inside).
double distance_to_support(const CoefficientField& field, const Vec& x);

struct VectorEstimate {
  Vec value{};
  Vec standard_error{};
};

/// Mean of (X_T - x0)/T at the final horizon with per-component standard errors.
VectorEstimate lln_drift(const TrajectoryEnsemble& ensemble);

/// Average of div a / 2 + a b over grid points of the window that lie in the
/// cluster: the velocity predicted for the invariant density 1.
Vec spatial_drift_average(const CoefficientField& field, const DriftField& b, const Vec& center, double half_width,
                          int per_unit = 20);

struct ScalarEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

/// log(mean(exp(v))) with the max shifted out.
double log_mean_exp(std::span<const double> v);

/// (1/T) log mean exp<theta, X_T - x0> at the final horizon with a
/// delete-one-block jackknife error. The ensemble must use the generator
/// normalization with feedback control b (the uncontrolled diffusion).
ScalarEstimate feynman_kac_Hbar(const TrajectoryEnsemble& ensemble, const Vec& theta, int blocks = 20);

struct RateEntry {
  double horizon = 0.0;
  double bandwidth = 0.0;
  Vec velocity{};
  double value = std::numeric_limits<double>::infinity();
  std::size_t hits = 0;
  /// No endpoint fell in the ball; value is +inf.
  bool empty = true;
};

/// -(1/T) log frequency((X_T - x0)/T in ball(v, T^(-1/4))) for every horizon and velocity.
std::vector<RateEntry> empirical_rate_function(const TrajectoryEnsemble& ensemble, std::span<const Vec> velocities);

/// Environment seen from the particle at x.
PointConfiguration environment_step(const PointConfiguration& config, const Vec& x);

/// Time average of an observable of the environment seen from the path, sampled every `stride` steps.
double environment_time_average(const PointConfiguration& config, const SDEPath& path,
                                const std::function<double(const PointConfiguration&)>& observable,
                                std::size_t stride = 1);

/// Left-point quadrature of int L(X_s, c_s) ds along a path.
double running_cost(const CoefficientField& field, const HamiltonianSpec& spec, const SDEPath& path);

/// Endpoint CSV: stream, T, x_1..x_d.
std::string endpoints_csv(const TrajectoryEnsemble& ensemble);

}  // namespace chom
