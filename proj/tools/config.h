#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "chom/vec.h"

namespace chom::cli {

inline constexpr int kConfigVersion = 1;

/// Validation failure; the message starts with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnvironmentBlock {
  /// "percolation" (Palm-conditioned Boolean model) or "constant" (m = level everywhere).
  std::string kind = "percolation";
  int dimension = 2;
  double half_width = 20.0;
  double intensity = 4.0;
  std::vector<std::uint64_t> seeds{1};
  int max_attempts = 200;
  double level = 1.0;
};

struct FourierDrift {
  int modes = 4;
  double amplitude = 0.2;
  double length_scale = 2.0;
  std::uint64_t seed = 1;
};

struct FieldBlock {
  double smoothing_radius = 0.25;
  /// "quadratic" or "power".
  std::string hamiltonian = "quadratic";
  double alpha = 2.0;
  double coefficient = 0.5;
  Vec drift{};
  std::optional<FourierDrift> fourier;
};

struct DataBlock {
  /// "linear": <theta, x>; "cone": -sqrt(1 + |x|^2); "bump": exp(-|x|^2).
  std::string kind = "linear";
  Vec theta{1.0, 0.0, 0.0};
};

struct MonteCarloBlock {
  std::size_t paths = 1000;
  double dt = 0.01;
  std::uint64_t seed = 1;
};

struct SolverBlock {
  double half_width = 2.0;
  /// One spacing per epsilon, or a single spacing for all.
  std::vector<double> spacings{1.0 / 64.0};
  std::vector<double> epsilons{0.125};
  double T = 1.0;
  double cfl = 0.4;
  std::optional<double> dt;
  std::string variant = "lax_friedrichs";
  std::vector<double> snapshot_times;
  DataBlock data{};
  MonteCarloBlock mc{};
  bool write_grids = true;
};

struct ThetaGridBlock {
  /// "polar", "cartesian" or "list".
  std::string kind = "polar";
  int directions = 8;
  std::vector<double> radii{0.5, 1.0, 1.5};
  double half_width = 1.5;
  int per_axis = 7;
  std::vector<Vec> points;
};

struct FeynmanKacBlock {
  double T = 50.0;
  double dt = 0.05;
  std::size_t paths = 10000;
  std::uint64_t seed = 1;
  int blocks = 20;
};

struct EffectiveBlock {
  ThetaGridBlock theta_grid{};
  std::vector<double> beta_schedule{1.0, 10.0, 100.0};
  double support_ratio = 0.5;
  double spacing = 0.125;
  int max_iterations = 500;
  bool variational = true;
  FeynmanKacBlock feynman_kac{};
  double hopf_lax_time = 1.0;
  std::vector<Vec> hopf_lax_points{Vec{}};
  /// Finite-difference check of the objective gradient before optimizing.
  std::size_t gradient_probes = 100;
  double gradient_tolerance = 1e-5;
};

struct LdpBlock {
  std::vector<double> horizons{10.0, 25.0, 50.0};
  double dt = 0.05;
  std::size_t paths = 10000;
  std::uint64_t seed = 1;
  std::vector<Vec> velocities{Vec{}, Vec{0.25, 0.0, 0.0}, Vec{0.5, 0.0, 0.0}};
  ThetaGridBlock theta_grid{"cartesian", 8, {}, 1.5, 13, {}};
};

struct CorrectorBlock {
  /// "bump-sum", "bump", "grid", "constant" or "rotational".
  std::string field = "bump-sum";
  double amplitude = 1.0;
  double radius = 0.5;
  Vec center{};
  Vec vector{1.0, 0.0, 0.0};
  std::vector<double> radii{2.0, 4.0, 8.0, 16.0};
  double probe_density = 16.0;
  std::size_t loops = 50;
  std::uint64_t loop_seed = 1;
  std::size_t ensemble = 40;
  double ensemble_half_width = 12.0;
  std::vector<double> epsilons{0.1};
  std::vector<int> sections{1};
  int ray_arrivals = 20;
  double mollifier_radius = 0.0;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  EnvironmentBlock environment{};
  FieldBlock field{};
  SolverBlock solver{};
  EffectiveBlock effective{};
  LdpBlock ldp{};
  CorrectorBlock corrector{};
  std::string output_directory;
};

/// Parses and validates a JSON config; unknown keys are rejected.
ExperimentConfig parse_config(const std::string& text);
/// Canonical JSON of the config (all fields, fixed key order).
std::string canonical_json(const ExperimentConfig& config);
/// Replaces every seed of the config with one derived from `seed`.
void override_seeds(ExperimentConfig& config, std::uint64_t seed);

}  // namespace chom::cli
