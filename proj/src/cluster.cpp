#include "chom/cluster.h"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>

#include <json.hpp>

namespace chom {

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t i) {
    while (parent_[i] != i) {
      parent_[i] = parent_[parent_[i]];
      i = parent_[i];
    }
    return i;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<int> rank_;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

SpatialIndex::SpatialIndex(const BoxDomain& box, std::span<const Vec> points, std::span<const std::size_t> subset)
    : dim_(box.dimension), lower_(-box.half_width) {
  cells_per_axis_ = std::max(1, static_cast<int>(std::ceil(2.0 * box.half_width)));
  std::size_t ncells = 1;
  for (int k = 0; k < dim_; ++k) ncells *= static_cast<std::size_t>(cells_per_axis_);

  std::vector<std::size_t> ids;
  if (subset.empty()) {
    ids.resize(points.size());
    std::iota(ids.begin(), ids.end(), 0);
  } else {
    ids.assign(subset.begin(), subset.end());
  }

  auto flat = [&](const Vec& x) {
    std::size_t c = 0;
    for (int k = dim_ - 1; k >= 0; --k) {
      const int ck = std::clamp(cell_coord(x[static_cast<std::size_t>(k)]), 0, cells_per_axis_ - 1);
      c = c * static_cast<std::size_t>(cells_per_axis_) + static_cast<std::size_t>(ck);
    }
    return c;
  };

  cell_start_.assign(ncells + 1, 0);
  for (std::size_t i : ids) ++cell_start_[flat(points[i]) + 1];
  std::partial_sum(cell_start_.begin(), cell_start_.end(), cell_start_.begin());
  entries_.resize(ids.size());
  std::vector<std::size_t> fill(cell_start_.begin(), cell_start_.end() - 1);
  for (std::size_t i : ids) entries_[fill[flat(points[i])]++] = i;
}

int SpatialIndex::cell_coord(double v) const {
  const double c = std::floor(v - lower_);
  return static_cast<int>(std::clamp(c, -4.0, static_cast<double>(cells_per_axis_) + 4.0));
}

ClusterGraph::ClusterGraph(const PointConfiguration& config)
    : config_(config), index_(config_.box, config_.points) {
  const auto& pts = config_.points;
  const std::size_t n = pts.size();
  DisjointSets sets(n);
  std::vector<std::size_t> degree(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    index_.for_each_near(pts[i], [&](std::size_t j) {
      if (j > i && norm2(pts[i] - pts[j]) < 1.0) {
        edges_.emplace_back(i, j);
        ++degree[i];
        ++degree[j];
        sets.unite(i, j);
      }
    });
  }
  std::sort(edges_.begin(), edges_.end());

  offsets_.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) offsets_[i + 1] = offsets_[i] + degree[i];
  adjacency_.resize(offsets_[n]);
  std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
  for (const auto& [i, j] : edges_) {
    adjacency_[fill[i]++] = j;
    adjacency_[fill[j]++] = i;
  }

  // Label components in order of their smallest node index so labels do not
  // depend on union-find internals.
  labels_.assign(n, -1);
  std::vector<int> root_label(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = sets.find(i);
    if (root_label[r] < 0) {
      root_label[r] = static_cast<int>(component_sizes_.size());
      component_sizes_.push_back(0);
      touches_boundary_.push_back(0);
    }
    const int c = root_label[r];
    labels_[i] = c;
    ++component_sizes_[static_cast<std::size_t>(c)];
    if (config_.box.distance_to_boundary(pts[i]) < kBallRadius) touches_boundary_[static_cast<std::size_t>(c)] = 1;
  }

  std::size_t best = 0;
  for (int c = 0; c < component_count(); ++c) {
    if (!touches_boundary(c)) continue;
    ++boundary_component_count_;
    if (component_size(c) > best) {
      best = component_size(c);
      unbounded_proxy_ = c;
    }
  }
}

std::vector<std::size_t> ClusterGraph::covering_balls(const Vec& x, double slack) const {
  std::vector<std::size_t> out;
  const double r = kBallRadius - slack;
  index_.for_each_near(x, [&](std::size_t i) {
    if (norm2(x - config_.points[i]) < r * r) out.push_back(i);
  });
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> ClusterGraph::covering_balls(const Vec& x, int component, double slack) const {
  auto all = covering_balls(x, slack);
  std::erase_if(all, [&](std::size_t i) { return labels_[i] != component; });
  return all;
}

std::string ClusterGraph::adjacency_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["nodes"] = node_count();
  j["labels"] = labels_;
  j["unbounded_proxy"] = unbounded_proxy_ ? nlohmann::json(*unbounded_proxy_) : nlohmann::json(nullptr);
  j["boundary_components"] = boundary_component_count_;
  auto& adj = j["adjacency"] = nlohmann::json::array();
  for (std::size_t i = 0; i < node_count(); ++i) {
    auto nb = neighbors(i);
    adj.push_back(std::vector<std::size_t>(nb.begin(), nb.end()));
  }
  return j.dump();
}

std::string ClusterGraph::edge_list_csv() const {
  std::ostringstream out;
  out << "i,j\n";
  for (const auto& [i, j] : edges_) out << i << ',' << j << '\n';
  return out.str();
}

bool contains(const ClusterGraph& graph, int component, const Vec& x) {
  bool found = false;
  const auto& pts = graph.config().points;
  graph.index().for_each_near(x, [&](std::size_t i) {
    if (!found && graph.label(i) == component && norm2(x - pts[i]) < kBallRadius * kBallRadius) found = true;
  });
  return found;
}

int ball_count_distance(const ClusterGraph& graph, const Vec& x, const Vec& y) {
  const auto from = graph.covering_balls(x);
  const auto to = graph.covering_balls(y);
  if (from.empty() || to.empty()) throw DisconnectedError("ball_count_distance: point not covered by the occupied set");
  std::vector<char> target(graph.node_count(), 0);
  for (std::size_t j : to) target[j] = 1;
  std::vector<int> depth(graph.node_count(), -1);
  std::deque<std::size_t> queue;
  for (std::size_t i : from) {
    depth[i] = 1;
    queue.push_back(i);
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    if (target[i]) return depth[i];
    for (std::size_t j : graph.neighbors(i)) {
      if (depth[j] < 0) {
        depth[j] = depth[i] + 1;
        queue.push_back(j);
      }
    }
  }
  throw DisconnectedError("ball_count_distance: no connecting chain of balls");
}

ChemicalTree::ChemicalTree(const ClusterGraph& graph, const Vec& source)
    : graph_(&graph), source_(source), source_balls_(graph.covering_balls(source)) {
  const std::size_t n = graph.node_count();
  dist_.assign(n, kInf);
  parent_.assign(n, npos);
  if (source_balls_.empty()) throw DisconnectedError("chemical distance: source not covered by the occupied set");
  const auto& pts = graph.config().points;

  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  for (std::size_t b : source_balls_) {
    graph.index().for_each_near(pts[b], [&](std::size_t k) {
      if (norm2(pts[k] - pts[b]) < kBallRadius * kBallRadius) {
        const double d = distance(source, pts[k]);
        if (d < dist_[k]) {
          dist_[k] = d;
          heap.emplace(d, k);
        }
      }
    });
  }
  while (!heap.empty()) {
    const auto [d, i] = heap.top();
    heap.pop();
    if (d > dist_[i]) continue;
    for (std::size_t j : graph.neighbors(i)) {
      const double nd = d + distance(pts[i], pts[j]);
      if (nd < dist_[j]) {
        dist_[j] = nd;
        parent_[j] = i;
        heap.emplace(nd, j);
      }
    }
  }
}

std::size_t ChemicalTree::entry_center(const Vec& y, double* length) const {
  const auto target_balls = graph_->covering_balls(y);
  if (target_balls.empty()) throw DisconnectedError("chemical distance: target not covered by the occupied set");
  for (std::size_t b : target_balls) {
    if (std::binary_search(source_balls_.begin(), source_balls_.end(), b)) {
      if (length) *length = distance(source_, y);
      return npos;
    }
  }
  const auto& pts = graph_->config().points;
  double best = kInf;
  std::size_t best_center = npos;
  for (std::size_t b : target_balls) {
    graph_->index().for_each_near(pts[b], [&](std::size_t k) {
      if (norm2(pts[k] - pts[b]) < kBallRadius * kBallRadius && std::isfinite(dist_[k])) {
        const double d = dist_[k] + distance(pts[k], y);
        if (d < best || (d == best && k < best_center)) {
          best = d;
          best_center = k;
        }
      }
    });
  }
  if (best_center == npos) throw DisconnectedError("chemical distance: endpoints lie in different components");
  if (length) *length = best;
  return best_center;
}

ChemicalPath ChemicalTree::path_to(const Vec& y) const {
  ChemicalPath path;
  const std::size_t last = entry_center(y, &path.length);
  path.lower_bound = distance(source_, y);
  std::vector<Vec> reversed{y};
  const auto& pts = graph_->config().points;
  int centers = 0;
  for (std::size_t k = last; k != npos; k = parent_[k]) {
    reversed.push_back(pts[k]);
    ++centers;
  }
  reversed.push_back(source_);
  path.waypoints.assign(reversed.rbegin(), reversed.rend());
  path.ball_count = std::max(centers, 1);
  return path;
}

ChemicalPath chemical_distance(const ClusterGraph& graph, const Vec& x, const Vec& y) {
  return ChemicalTree(graph, x).path_to(y);
}

double volume_fraction(const ClusterGraph& graph, int component, const Vec& center, double half_width,
                       int per_unit) {
  if (!(half_width > 0.0)) throw std::invalid_argument("volume_fraction: empty window");
  const int d = graph.config().dimension();
  const int n = std::max(1, static_cast<int>(std::ceil(2.0 * half_width * per_unit)));
  const double step = 2.0 * half_width / n;
  std::size_t hits = 0;
  std::size_t total = 0;
  const int nz = d == 3 ? n : 1;
  for (int iz = 0; iz < nz; ++iz) {
    for (int iy = 0; iy < n; ++iy) {
      for (int ix = 0; ix < n; ++ix) {
        Vec x = center;
        x[0] += -half_width + (ix + 0.5) * step;
        x[1] += -half_width + (iy + 0.5) * step;
        if (d == 3) x[2] += -half_width + (iz + 0.5) * step;
        ++total;
        if (contains(graph, component, x)) ++hits;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace chom
