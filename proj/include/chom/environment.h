#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chom/vec.h"

namespace chom {

class ClusterGraph;

/// Axis-aligned box [-L, L]^d.
struct BoxDomain {
  int dimension = 2;
  double half_width = 1.0;

  void validate() const;
  double volume() const;
  bool contains(const Vec& x) const;
  /// Distance from x to the box boundary (0 outside the box).
  double distance_to_boundary(const Vec& x) const;
};

/// A finite sample of the Boolean-model environment: Poisson centres of
/// radius-1/2 balls inside a box.
struct PointConfiguration {
  BoxDomain box;
  double intensity = 0.0;
  std::uint64_t seed = 0;
  std::vector<Vec> points;
  /// Rejected draws before this configuration was accepted (conditioning only).
  int rejections = 0;

  std::size_t size() const { return points.size(); }
  int dimension() const { return box.dimension; }
};

class SamplingExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Homogeneous Poisson process of intensity `intensity` in `box`.
PointConfiguration sample_poisson(double intensity, const BoxDomain& box, std::uint64_t seed);

/// True iff the origin lies in the unbounded-component proxy of `config`.
bool origin_in_unbounded_proxy(const PointConfiguration& config);

/// Rejection sampler for the event {0 in unbounded cluster}. Attempt k uses
/// seed mix_seed(seed, k); the returned configuration records the number of
/// rejected attempts. Throws SamplingExhausted after `max_attempts` failures.
PointConfiguration condition_on_origin(double intensity, const BoxDomain& box, std::uint64_t seed,
                                       int max_attempts);

/// Successive arrivals of the induced shift along a coordinate ray.
struct InducedArrival {
  int axis = 0;
  int sign = 1;
  std::vector<int> indices;
  /// Fewer than the requested number of arrivals fit inside the box.
  bool truncated = false;

  Vec direction() const { return unit(axis, sign); }
};

/// Slack used when testing lattice points k*e against the ball union.
inline constexpr double kLatticeSlack = 1e-12;

/// First `count` positive integers n with n*e inside the unbounded proxy.
/// Requires the origin to lie in the proxy.
InducedArrival induced_arrivals(const PointConfiguration& config, const ClusterGraph& graph, int axis,
                                int sign, int count);

/// Translate every point by -shift (the environment seen from `shift`).
/// Points leaving the box are kept; the box is unchanged.
PointConfiguration recentered(const PointConfiguration& config, const Vec& shift);

/// Observable evaluated on the configuration seen from point `index`.
using PalmObservable = std::function<double(const PointConfiguration&, std::size_t index)>;

struct PalmEstimate {
  double value = 0.0;
  double standard_error = 0.0;
  std::size_t configurations = 0;
};

/// Refined-Campbell estimate of a Palm expectation: for each configuration,
/// the sum of the observable over points in the window [-w, w]^d divided by
/// intensity * vol(window), averaged over the ensemble.
PalmEstimate empirical_palm_expectation(const PalmObservable& observable,
                                        std::span<const PointConfiguration> ensemble, double window_half_width);

// Versioned record {version, dimension, half_width, intensity, seed, points}.
std::string to_json(const PointConfiguration& config);
PointConfiguration configuration_from_json(const std::string& text);
std::vector<char> to_binary(const PointConfiguration& config);
PointConfiguration configuration_from_binary(std::span<const char> bytes);

}  // namespace chom
