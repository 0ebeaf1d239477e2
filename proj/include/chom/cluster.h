#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chom/environment.h"

namespace chom {

inline constexpr double kBallRadius = 0.5;

/// Uniform cell grid over the box with cell size 1 (the overlap distance),
/// so every ball meeting a point lies in the point's cell or a neighbour.
class SpatialIndex {
 public:
  SpatialIndex() = default;
  SpatialIndex(const BoxDomain& box, std::span<const Vec> points, std::span<const std::size_t> subset = {});

  /// Calls fn(i) for candidate point indices within distance `radius` <= 1
  /// of x (a superset; callers test the exact distance).
  template <typename Fn>
  void for_each_near(const Vec& x, Fn&& fn) const;

  bool empty() const { return cell_start_.empty(); }

 private:
  int cell_coord(double v) const;

  int dim_ = 2;
  double lower_ = 0.0;
  int cells_per_axis_ = 0;
  std::vector<std::size_t> cell_start_;
  std::vector<std::size_t> entries_;
};

/// Ball-overlap graph of a configuration with connected-component labels.
class ClusterGraph {
 public:
  explicit ClusterGraph(const PointConfiguration& config);

  std::size_t node_count() const { return labels_.size(); }
  const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }
  std::span<const std::size_t> neighbors(std::size_t i) const {
    return {adjacency_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
  }
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const { return labels_; }
  int component_count() const { return static_cast<int>(component_sizes_.size()); }
  std::size_t component_size(int c) const { return component_sizes_[static_cast<std::size_t>(c)]; }
  bool touches_boundary(int c) const { return touches_boundary_[static_cast<std::size_t>(c)] != 0; }
  /// Largest boundary-touching component, if any.
  std::optional<int> unbounded_proxy() const { return unbounded_proxy_; }
  /// Number of boundary-touching components (more than one is a finite-box ambiguity).
  int boundary_component_count() const { return boundary_component_count_; }

  const PointConfiguration& config() const { return config_; }
  const SpatialIndex& index() const { return index_; }

  /// Indices of balls (any component) whose open ball contains x, with the
  /// radius shrunk by `slack`.
  std::vector<std::size_t> covering_balls(const Vec& x, double slack = 0.0) const;
  /// Covering balls restricted to component c.
  std::vector<std::size_t> covering_balls(const Vec& x, int component, double slack = 0.0) const;

  std::string adjacency_json() const;
  std::string edge_list_csv() const;

 private:
  PointConfiguration config_;
  SpatialIndex index_;
  std::vector<std::pair<std::size_t, std::size_t>> edges_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> adjacency_;
  std::vector<int> labels_;
  std::vector<std::size_t> component_sizes_;
  std::vector<char> touches_boundary_;
  std::optional<int> unbounded_proxy_;
  int boundary_component_count_ = 0;
};

/// x lies in the open ball of some node of `component`.
bool contains(const ClusterGraph& graph, int component, const Vec& x);

class DisconnectedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Minimal number of balls in an overlapping chain from a ball holding x to
/// one holding y. Throws DisconnectedError when either point is uncovered or
/// no chain exists.
int ball_count_distance(const ClusterGraph& graph, const Vec& x, const Vec& y);

struct ChemicalPath {
  std::vector<Vec> waypoints;
  double length = 0.0;
  /// Euclidean lower bound |x - y|.
  double lower_bound = 0.0;
  int ball_count = 0;
};

/// Shortest-path tree over ball centres from a source point. Admissible
/// moves are straight segments inside one ball or between centres of
/// overlapping balls, so every polyline stays in the occupied set.
class ChemicalTree {
 public:
  ChemicalTree(const ClusterGraph& graph, const Vec& source);

  const Vec& source() const { return source_; }
  /// Distance to ball centre i (infinity if unreachable).
  double center_distance(std::size_t i) const { return dist_[i]; }
  /// Predecessor centre of i, or npos when i is entered from the source.
  std::size_t parent(std::size_t i) const { return parent_[i]; }
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  /// Shortest admissible polyline from the source to y.
  ChemicalPath path_to(const Vec& y) const;
  /// Last centre on the path to y (npos for a direct segment); throws when y is unreachable.
  std::size_t entry_center(const Vec& y, double* length = nullptr) const;

 private:
  const ClusterGraph* graph_;
  Vec source_;
  std::vector<std::size_t> source_balls_;
  std::vector<double> dist_;
  std::vector<std::size_t> parent_;
};

ChemicalPath chemical_distance(const ClusterGraph& graph, const Vec& x, const Vec& y);

/// Subgrid estimate of vol(component ∩ window) / vol(window) for the window
/// centre ± half_width, using `per_unit` sample points per unit length.
double volume_fraction(const ClusterGraph& graph, int component, const Vec& center, double half_width,
                       int per_unit = 20);

// ---------------------------------------------------------------------------

template <typename Fn>
void SpatialIndex::for_each_near(const Vec& x, Fn&& fn) const {
  if (cell_start_.empty()) return;
  int lo[kMaxDim] = {0, 0, 0};
  int hi[kMaxDim] = {0, 0, 0};
  for (int k = 0; k < dim_; ++k) {
    const int c = cell_coord(x[static_cast<std::size_t>(k)]);
    lo[k] = std::max(c - 1, 0);
    hi[k] = std::min(c + 1, cells_per_axis_ - 1);
    if (lo[k] > hi[k]) return;
  }
  const int zlo = dim_ == 3 ? lo[2] : 0;
  const int zhi = dim_ == 3 ? hi[2] : 0;
  for (int cz = zlo; cz <= zhi; ++cz) {
    for (int cy = lo[1]; cy <= hi[1]; ++cy) {
      const std::size_t row = (static_cast<std::size_t>(cz) * cells_per_axis_ + cy) * cells_per_axis_;
      const std::size_t begin = cell_start_[row + lo[0]];
      const std::size_t end = cell_start_[row + hi[0] + 1];
      for (std::size_t e = begin; e < end; ++e) fn(entries_[e]);
    }
  }
}

}  // namespace chom
