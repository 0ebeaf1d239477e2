#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chom/cluster.h"
#include "chom/environment.h"
#include "chom/vec.h"

namespace chom {

enum class GradientProvenance { kDiscreteGradient, kConstant, kMollified, kAnalytic };
const char* to_string(GradientProvenance p);

/// Vector field G on R^d used as a corrector gradient.
class GradientField {
 public:
  using Evaluator = std::function<Vec(const Vec&)>;
  using Potential = std::function<double(const Vec&)>;
  /// Parameters t in (0, 1) where the field along a + t (b - a) may lose smoothness.
  using Breakpoints = std::function<std::vector<double>(const Vec& a, const Vec& b)>;

  GradientField(int dimension, Evaluator G, GradientProvenance provenance, std::string label, double sup_bound,
                Potential potential = {}, Breakpoints breakpoints = {});

  static GradientField constant(int dimension, const Vec& c);
  /// (-x_2, x_1, 0): not a gradient; circulation around a loop is twice its signed area.
  static GradientField rotational(int dimension);
  /// Gradient of g(x) = amplitude (1 - |x - center|^2 / radius^2)^4 on the ball, 0 outside.
  static GradientField bump(int dimension, const Vec& center, double radius, double amplitude);
  /// Sum of such bumps centred at every point of the configuration (radius <= 1/2);
  /// a stationary gradient field of the environment.
  static GradientField bump_sum(const PointConfiguration& config, double radius, double amplitude);
  /// Gradient of the C^1 tensor-cubic Hermite interpolant of grid values
  /// (nodal derivatives by central differences, one-sided at the edges). Node
  /// index i = sum_k c_k n^k sits at origin + c spacing; the interpolant is 0
  /// outside the grid, so the values should vanish near its boundary.
  static GradientField grid_interpolant(int dimension, std::vector<double> values, int per_axis, const Vec& origin,
                                        double spacing);

  Vec operator()(const Vec& x) const { return G_(x); }
  int dimension() const { return dim_; }
  GradientProvenance provenance() const { return provenance_; }
  const std::string& label() const { return label_; }
  /// Recorded bound on sup |G|.
  double sup_bound() const { return sup_bound_; }
  /// g with G = grad g, when known.
  const Potential& potential() const { return potential_; }
  std::vector<double> breakpoints(const Vec& a, const Vec& b) const {
    return breakpoints_ ? breakpoints_(a, b) : std::vector<double>{};
  }

 private:
  int dim_;
  Evaluator G_;
  GradientProvenance provenance_;
  std::string label_;
  double sup_bound_;
  Potential potential_;
  Breakpoints breakpoints_;
};

/// (mean |G|^(1 + delta))^(1 / (1 + delta)) and max |G| over probe points.
struct FieldNorms {
  double l_norm = 0.0;
  double sup = 0.0;
  double delta = 1.0;
};
FieldNorms field_norms(const GradientField& G, std::span<const Vec> probes, double delta = 1.0);

/// G_r(x) = int G(x + r y) rho(y) dy over the unit ball, with the kernel
/// rho ~ (1 - |y|^2)^2 and a positive product rule (Gauss-Legendre in the
/// radius, equal angles) normalized to total weight one.
GradientField mollify_gradient(const GradientField& G, double radius, int radial_nodes = 6, int angular_nodes = 16);

struct QuadratureOptions {
  /// Gauss-Legendre nodes per piece.
  int nodes = 5;
  /// Pieces are split further until no longer than this.
  double max_piece = 0.25;
};

/// Line integral of G along the polyline through `waypoints`; every segment
/// is cut at the field's breakpoints before composite Gauss-Legendre.
double line_integral(const GradientField& G, std::span<const Vec> waypoints, const QuadratureOptions& q = {});

/// V_G(x) = integral of G along the chemical polyline from the source to x,
/// with the values at ball centres cached along the shortest-path tree.
class CorrectorIntegral {
 public:
  /// Source defaults to the origin; it must lie in the unbounded-cluster proxy.
  CorrectorIntegral(const ClusterGraph& graph, const GradientField& G, const Vec& source = Vec{},
                    const QuadratureOptions& q = {});

  /// 0 when x is off the proxy cluster.
  double operator()(const Vec& x) const;
  /// The polyline used for x (empty when x is off the proxy cluster).
  ChemicalPath path(const Vec& x) const;
  int component() const { return component_; }
  const ClusterGraph& graph() const { return *graph_; }

 private:
  const ClusterGraph* graph_;
  const GradientField* G_;
  QuadratureOptions q_;
  Vec source_;
  int component_ = -1;
  std::unique_ptr<ChemicalTree> tree_;
  std::vector<double> center_value_;
};

/// V_G(0 -> x) on the configuration's proxy cluster. Throws DisconnectedError
/// when the origin is off the proxy.
double path_integral_V(const ClusterGraph& graph, const GradientField& G, const Vec& x,
                       const QuadratureOptions& q = {});

/// Low-discrepancy (Halton) points of the box [-r, r]^d lying in the proxy
/// cluster, with at least `density` candidates per unit volume.
std::vector<Vec> cluster_probes(const ClusterGraph& graph, double r, double density = 16.0, std::size_t offset = 0);

struct LoopRecord {
  Vec vertices[3];
  double circulation = 0.0;
  /// Signed area enclosed by the closed polyline.
  double signed_area = 0.0;
  double length = 0.0;
};

struct LoopReport {
  std::vector<LoopRecord> loops;
  double max_abs_circulation = 0.0;
  /// False when the residual exceeds the tolerance.
  bool closed = true;
  double tolerance = 0.0;
};

class NoValidLoop : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Triangles through three random proxy points, each edge a chemical
/// polyline. Throws NoValidLoop when the window holds fewer than 3 cluster probes.
LoopReport closed_loop_residual(const ClusterGraph& graph, const GradientField& G, std::size_t loops,
                                std::uint64_t seed, double window = 0.0, double tolerance = 1e-6,
                                const QuadratureOptions& q = {});

struct InducedMean {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t used = 0;
  /// Configurations without an arrival inside the box.
  std::size_t truncated = 0;
  /// Mean of the arrival index n over the used configurations.
  double mean_arrival = 0.0;
  std::vector<double> samples;
  /// |mean| <= 3 SE.
  bool zero_within_3se() const { return std::abs(mean) <= 3.0 * standard_error; }
};

/// Average of V_G(omega, n(omega, e) e) over Palm-conditioned configurations;
/// the field may depend on the configuration.
InducedMean induced_mean(std::span<const PointConfiguration> ensemble,
                         const std::function<GradientField(const PointConfiguration&)>& field_of, int axis,
                         int sign = 1, const QuadratureOptions& q = {});
InducedMean induced_mean(std::span<const PointConfiguration> ensemble, const GradientField& G, int axis,
                         int sign = 1, const QuadratureOptions& q = {});

struct DensityEntry {
  int k = 1;
  double epsilon = 0.0;
  double radius = 0.0;
  /// min over y on the segment of the fraction of the k-dimensional section
  /// (cluster points x) with |V(x) - V(y)| >= eps r.
  double value = 0.0;
};

struct SublinearityOptions {
  double probe_density = 16.0;
  /// Induced arrivals along +e_1 for the ray sequence.
  int ray_arrivals = 20;
  std::vector<double> epsilons{0.1};
  /// Section dimensions k for the density of growth (1..d).
  std::vector<int> sections{1};
  QuadratureOptions quadrature{};
};

struct SublinearityReport {
  std::vector<double> radii;
  /// sup over cluster probes in [-r, r]^d of |V_G| / r.
  std::vector<double> ratios;
  /// |V_G(n_k e_1)| / k for k = 1..K.
  std::vector<double> ray_ratios;
  bool ray_truncated = false;
  std::vector<DensityEntry> density;
  /// Ratios nonincreasing from index `from` on.
  bool eventually_nonincreasing(std::size_t from) const;
};

SublinearityReport sublinearity_scan(const ClusterGraph& graph, const GradientField& G, std::span<const double> radii,
                                     const SublinearityOptions& options = {});

std::string sublinearity_csv(const SublinearityReport& report);
std::string sublinearity_json(const SublinearityReport& report);
std::string loop_report_json(const LoopReport& report);

}  // namespace chom
