#include "chom/corrector.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "chom/rng.h"

namespace chom {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct GaussRule {
  std::vector<double> nodes;  // on [0, 1]
  std::vector<double> weights;
};

GaussRule make_gauss(int n) {
  GaussRule rule;
  rule.nodes.resize(static_cast<std::size_t>(n));
  rule.weights.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0;
      double p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    double p0 = 1.0;
    double p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = n == 1 ? 1.0 : n * (x * p1 - p0) / (x * x - 1.0);
    rule.nodes[static_cast<std::size_t>(i)] = 0.5 * (1.0 - x);
    rule.weights[static_cast<std::size_t>(i)] = 1.0 / ((1.0 - x * x) * dp * dp);
  }
  return rule;
}

constexpr int kMaxGauss = 20;

const GaussRule& gauss_rule(int n) {
  static const std::array<GaussRule, kMaxGauss + 1> rules = [] {
    std::array<GaussRule, kMaxGauss + 1> r;
    for (int k = 1; k <= kMaxGauss; ++k) r[static_cast<std::size_t>(k)] = make_gauss(k);
    return r;
  }();
  if (n < 1 || n > kMaxGauss) throw std::invalid_argument("quadrature nodes must lie in [1, 20]");
  return rules[static_cast<std::size_t>(n)];
}

double segment_integral(const GradientField& G, const Vec& a, const Vec& b, const QuadratureOptions& q) {
  const Vec d = b - a;
  const double len = norm(d);
  if (len == 0.0) return 0.0;
  const GaussRule& rule = gauss_rule(q.nodes);
  std::vector<double> cuts = G.breakpoints(a, b);
  cuts.push_back(0.0);
  cuts.push_back(1.0);
  std::sort(cuts.begin(), cuts.end());
  double total = 0.0;
  for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
    const double t0 = std::clamp(cuts[c], 0.0, 1.0);
    const double t1 = std::clamp(cuts[c + 1], 0.0, 1.0);
    if (!(t1 > t0)) continue;
    const int pieces = std::max(1, static_cast<int>(std::ceil((t1 - t0) * len / q.max_piece)));
    const double dt = (t1 - t0) / pieces;
    for (int p = 0; p < pieces; ++p) {
      const double s0 = t0 + p * dt;
      double acc = 0.0;
      for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
        const Vec x = a + (s0 + rule.nodes[i] * dt) * d;
        acc += rule.weights[i] * dot(G(x), d);
      }
      total += acc * dt;
    }
  }
  return total;
}

/// Parameters t in (0, 1) with |a + t (b - a) - c| = R.
void sphere_crossings(const Vec& a, const Vec& b, const Vec& c, double R, std::vector<double>& out) {
  const Vec d = b - a;
  const Vec f = a - c;
  const double A = norm2(d);
  if (A == 0.0) return;
  const double B = 2.0 * dot(f, d);
  const double C = norm2(f) - R * R;
  const double disc = B * B - 4.0 * A * C;
  if (disc <= 0.0) return;
  const double s = std::sqrt(disc);
  for (double t : {(-B - s) / (2.0 * A), (-B + s) / (2.0 * A)}) {
    if (t > 0.0 && t < 1.0) out.push_back(t);
  }
}

double bump_value(const Vec& x, const Vec& c, double R, double A) {
  const double s = norm2(x - c) / (R * R);
  if (s >= 1.0) return 0.0;
  const double u = 1.0 - s;
  return A * u * u * u * u;
}

Vec bump_gradient(const Vec& x, const Vec& c, double R, double A) {
  const Vec y = x - c;
  const double s = norm2(y) / (R * R);
  if (s >= 1.0) return Vec{};
  const double u = 1.0 - s;
  return (-8.0 * A * u * u * u / (R * R)) * y;
}

double bump_sup(double R, double A) { return 8.0 * std::abs(A) / R * std::pow(6.0 / 7.0, 3) / std::sqrt(7.0); }

double radical_inverse(std::size_t i, unsigned base) {
  double inv = 1.0 / base;
  double f = inv;
  double r = 0.0;
  while (i > 0) {
    r += f * static_cast<double>(i % base);
    i /= base;
    f *= inv;
  }
  return r;
}

constexpr unsigned kHaltonBases[kMaxDim] = {2, 3, 5};

/// Halton points of [-r, r]^k embedded in the first k coordinates.
std::vector<Vec> halton_box(int k, double r, double density, std::size_t offset) {
  const double volume = std::pow(2.0 * r, k);
  const auto count = static_cast<std::size_t>(std::ceil(density * volume));
  std::vector<Vec> pts(count, Vec{});
  for (std::size_t i = 0; i < count; ++i) {
    for (int a = 0; a < k; ++a) {
      pts[i][static_cast<std::size_t>(a)] = -r + 2.0 * r * radical_inverse(i + offset + 1, kHaltonBases[a]);
    }
  }
  return pts;
}

int proxy_component(const ClusterGraph& graph) {
  const auto proxy = graph.unbounded_proxy();
  return proxy ? *proxy : -1;
}

// 1D cubic Hermite basis on [0, 1]: value weights for (g0, g1) and slope weights for (m0, m1).
inline double hermite(int corner, int derivative, double t, bool diff) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  if (!diff) {
    if (corner == 0) return derivative == 0 ? 2 * t3 - 3 * t2 + 1 : t3 - 2 * t2 + t;
    return derivative == 0 ? -2 * t3 + 3 * t2 : t3 - t2;
  }
  if (corner == 0) return derivative == 0 ? 6 * t2 - 6 * t : 3 * t2 - 4 * t + 1;
  return derivative == 0 ? -6 * t2 + 6 * t : 3 * t2 - 2 * t;
}

constexpr double kHermiteMax[2][2] = {{1.0, 4.0 / 27.0}, {1.0, 4.0 / 27.0}};
constexpr double kHermiteSlopeMax[2][2] = {{1.5, 1.0}, {1.5, 1.0}};

}  // namespace

const char* to_string(GradientProvenance p) {
  switch (p) {
    case GradientProvenance::kDiscreteGradient: return "discrete-gradient";
    case GradientProvenance::kConstant: return "constant";
    case GradientProvenance::kMollified: return "mollified";
    case GradientProvenance::kAnalytic: return "analytic";
  }
  return "unknown";
}

GradientField::GradientField(int dimension, Evaluator G, GradientProvenance provenance, std::string label,
                             double sup_bound, Potential potential, Breakpoints breakpoints)
    : dim_(dimension),
      G_(std::move(G)),
      provenance_(provenance),
      label_(std::move(label)),
      sup_bound_(sup_bound),
      potential_(std::move(potential)),
      breakpoints_(std::move(breakpoints)) {
  check_dimension(dimension);
  if (!G_) throw std::invalid_argument("gradient field needs an evaluator");
}

GradientField GradientField::constant(int dimension, const Vec& c) {
  check_dimension(dimension);
  Vec cc{};
  for (int k = 0; k < dimension; ++k) cc[static_cast<std::size_t>(k)] = c[static_cast<std::size_t>(k)];
  return GradientField(
      dimension, [cc](const Vec&) { return cc; }, GradientProvenance::kConstant, "constant", norm(cc),
      [cc](const Vec& x) { return dot(cc, x); });
}

GradientField GradientField::rotational(int dimension) {
  return GradientField(
      dimension, [](const Vec& x) { return Vec{-x[1], x[0], 0.0}; }, GradientProvenance::kAnalytic, "rotational",
      kInf);
}

GradientField GradientField::bump(int dimension, const Vec& center, double radius, double amplitude) {
  if (!(radius > 0.0)) throw std::invalid_argument("bump radius must be positive");
  return GradientField(
      dimension, [=](const Vec& x) { return bump_gradient(x, center, radius, amplitude); },
      GradientProvenance::kAnalytic, "bump", bump_sup(radius, amplitude),
      [=](const Vec& x) { return bump_value(x, center, radius, amplitude); },
      [=](const Vec& a, const Vec& b) {
        std::vector<double> t;
        sphere_crossings(a, b, center, radius, t);
        return t;
      });
}

GradientField GradientField::bump_sum(const PointConfiguration& config, double radius, double amplitude) {
  if (!(radius > 0.0) || radius > 0.5) throw std::invalid_argument("bump_sum radius must lie in (0, 1/2]");
  struct Shared {
    std::vector<Vec> points;
    SpatialIndex index;
  };
  auto shared = std::make_shared<Shared>();
  shared->points = config.points;
  shared->index = SpatialIndex(config.box, shared->points);
  // Bumps overlapping at x have centres within 2R of each other.
  std::size_t overlap = 0;
  for (const Vec& p : shared->points) {
    std::size_t n = 0;
    shared->index.for_each_near(p, [&](std::size_t j) {
      if (distance(shared->points[j], p) <= 2.0 * radius) ++n;
    });
    overlap = std::max(overlap, n);
  }
  const double R = radius;
  const double A = amplitude;
  auto grad = [shared, R, A](const Vec& x) {
    Vec g{};
    shared->index.for_each_near(x, [&](std::size_t j) { g += bump_gradient(x, shared->points[j], R, A); });
    return g;
  };
  auto potential = [shared, R, A](const Vec& x) {
    double v = 0.0;
    shared->index.for_each_near(x, [&](std::size_t j) { v += bump_value(x, shared->points[j], R, A); });
    return v;
  };
  auto cuts = [shared, R](const Vec& a, const Vec& b) {
    std::vector<double> t;
    const double len = distance(a, b);
    // Chunks of length <= 1 keep every relevant centre within 1 of a chunk midpoint.
    const int chunks = std::max(1, static_cast<int>(std::ceil(len)));
    std::vector<std::size_t> seen;
    for (int c = 0; c < chunks; ++c) {
      const Vec mid = a + ((c + 0.5) / chunks) * (b - a);
      shared->index.for_each_near(mid, [&](std::size_t j) { seen.push_back(j); });
    }
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    for (std::size_t j : seen) sphere_crossings(a, b, shared->points[j], R, t);
    return t;
  };
  return GradientField(config.dimension(), grad, GradientProvenance::kAnalytic, "bump-sum",
                       static_cast<double>(overlap) * bump_sup(radius, amplitude), potential, cuts);
}

GradientField GradientField::grid_interpolant(int dimension, std::vector<double> values, int per_axis,
                                              const Vec& origin, double spacing) {
  check_dimension(dimension);
  if (per_axis < 2) throw std::invalid_argument("grid interpolant needs at least 2 nodes per axis");
  if (!(spacing > 0.0)) throw std::invalid_argument("grid spacing must be positive");
  std::size_t total = 1;
  for (int k = 0; k < dimension; ++k) total *= static_cast<std::size_t>(per_axis);
  if (values.size() != total) throw std::invalid_argument("grid interpolant: value count does not match the grid");

  struct Data {
    int d;
    int n;
    Vec origin;
    double h;
    std::array<std::size_t, kMaxDim> stride{};
    // Mixed derivative tables indexed by a bit mask over axes, scaled by h^|mask|.
    std::vector<std::vector<double>> table;
  };
  auto data = std::make_shared<Data>();
  data->d = dimension;
  data->n = per_axis;
  data->origin = origin;
  data->h = spacing;
  std::size_t s = 1;
  for (int k = 0; k < dimension; ++k) {
    data->stride[static_cast<std::size_t>(k)] = s;
    s *= static_cast<std::size_t>(per_axis);
  }
  const int masks = 1 << dimension;
  data->table.assign(static_cast<std::size_t>(masks), {});
  data->table[0] = std::move(values);
  for (int m = 1; m < masks; ++m) {
    int axis = 0;
    while (!(m & (1 << axis))) ++axis;
    const auto& src = data->table[static_cast<std::size_t>(m & ~(1 << axis))];
    auto& dst = data->table[static_cast<std::size_t>(m)];
    dst.assign(total, 0.0);
    const std::size_t st = data->stride[static_cast<std::size_t>(axis)];
    for (std::size_t i = 0; i < total; ++i) {
      const int c = static_cast<int>((i / st) % static_cast<std::size_t>(per_axis));
      // Slope times h: central difference inside, one-sided at the edges.
      if (c == 0) dst[i] = src[i + st] - src[i];
      else if (c == per_axis - 1) dst[i] = src[i] - src[i - st];
      else dst[i] = 0.5 * (src[i + st] - src[i - st]);
    }
  }

  // Cell-wise bound on |grad g|.
  double sup = 0.0;
  {
    const std::size_t cells_per_axis = static_cast<std::size_t>(per_axis - 1);
    std::size_t cells = 1;
    for (int k = 0; k < dimension; ++k) cells *= cells_per_axis;
    for (std::size_t cell = 0; cell < cells; ++cell) {
      std::size_t base = 0;
      std::size_t rem = cell;
      for (int k = 0; k < dimension; ++k) {
        base += (rem % cells_per_axis) * data->stride[static_cast<std::size_t>(k)];
        rem /= cells_per_axis;
      }
      double g2 = 0.0;
      for (int axis = 0; axis < dimension; ++axis) {
        double b = 0.0;
        for (int corner = 0; corner < (1 << dimension); ++corner) {
          std::size_t idx = base;
          for (int k = 0; k < dimension; ++k)
            if (corner & (1 << k)) idx += data->stride[static_cast<std::size_t>(k)];
          for (int m = 0; m < masks; ++m) {
            double w = std::abs(data->table[static_cast<std::size_t>(m)][idx]) / spacing;
            for (int k = 0; k < dimension; ++k) {
              const int c = (corner >> k) & 1;
              const int dm = (m >> k) & 1;
              w *= k == axis ? kHermiteSlopeMax[c][dm] : kHermiteMax[c][dm];
            }
            b += w;
          }
        }
        g2 += b * b;
      }
      sup = std::max(sup, std::sqrt(g2));
    }
  }

  auto locate = [data](const Vec& x, std::size_t& base, Vec& t) {
    base = 0;
    t = Vec{};
    for (int k = 0; k < data->d; ++k) {
      const double u = (x[static_cast<std::size_t>(k)] - data->origin[static_cast<std::size_t>(k)]) / data->h;
      if (!(u >= 0.0) || u > data->n - 1) return false;
      int c = std::min(static_cast<int>(std::floor(u)), data->n - 2);
      t[static_cast<std::size_t>(k)] = u - c;
      base += static_cast<std::size_t>(c) * data->stride[static_cast<std::size_t>(k)];
    }
    return true;
  };
  // Value (diff_axis < 0) or derivative along diff_axis, in grid units.
  auto evaluate = [data](std::size_t base, const Vec& t, int diff_axis) {
    const int d = data->d;
    double v = 0.0;
    for (int corner = 0; corner < (1 << d); ++corner) {
      std::size_t idx = base;
      for (int k = 0; k < d; ++k)
        if (corner & (1 << k)) idx += data->stride[static_cast<std::size_t>(k)];
      for (int m = 0; m < (1 << d); ++m) {
        double w = data->table[static_cast<std::size_t>(m)][idx];
        if (w == 0.0) continue;
        for (int k = 0; k < d; ++k) {
          w *= hermite((corner >> k) & 1, (m >> k) & 1, t[static_cast<std::size_t>(k)], k == diff_axis);
        }
        v += w;
      }
    }
    return v;
  };
  auto grad = [data, locate, evaluate](const Vec& x) {
    Vec g{};
    std::size_t base;
    Vec t;
    if (!locate(x, base, t)) return g;
    for (int k = 0; k < data->d; ++k) g[static_cast<std::size_t>(k)] = evaluate(base, t, k) / data->h;
    return g;
  };
  auto potential = [locate, evaluate](const Vec& x) {
    std::size_t base;
    Vec t;
    if (!locate(x, base, t)) return 0.0;
    return evaluate(base, t, -1);
  };
  auto cuts = [data](const Vec& a, const Vec& b) {
    std::vector<double> t;
    for (int k = 0; k < data->d; ++k) {
      const double ua = (a[static_cast<std::size_t>(k)] - data->origin[static_cast<std::size_t>(k)]) / data->h;
      const double ub = (b[static_cast<std::size_t>(k)] - data->origin[static_cast<std::size_t>(k)]) / data->h;
      if (ua == ub) continue;
      const double lo = std::max(std::ceil(std::min(ua, ub)), 0.0);
      const double hi = std::min(std::floor(std::max(ua, ub)), static_cast<double>(data->n - 1));
      for (double j = lo; j <= hi; j += 1.0) {
        const double s = (j - ua) / (ub - ua);
        if (s > 0.0 && s < 1.0) t.push_back(s);
      }
    }
    return t;
  };
  return GradientField(dimension, grad, GradientProvenance::kDiscreteGradient, "grid-interpolant", sup, potential,
                       cuts);
}

FieldNorms field_norms(const GradientField& G, std::span<const Vec> probes, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("delta must be positive");
  FieldNorms out;
  out.delta = delta;
  if (probes.empty()) return out;
  double acc = 0.0;
  for (const Vec& x : probes) {
    const double g = norm(G(x));
    acc += std::pow(g, 1.0 + delta);
    out.sup = std::max(out.sup, g);
  }
  out.l_norm = std::pow(acc / static_cast<double>(probes.size()), 1.0 / (1.0 + delta));
  return out;
}

GradientField mollify_gradient(const GradientField& G, double radius, int radial_nodes, int angular_nodes) {
  if (!(radius > 0.0)) throw std::invalid_argument("mollifier radius must be positive");
  if (angular_nodes < 2 || angular_nodes % 2 != 0) throw std::invalid_argument("angular nodes must be even");
  const int d = G.dimension();
  const GaussRule& radial = gauss_rule(radial_nodes);
  std::vector<Vec> offsets;
  std::vector<double> weights;
  std::vector<Vec> directions;
  std::vector<double> dir_weights;
  if (d == 2) {
    for (int j = 0; j < angular_nodes; ++j) {
      const double phi = 2.0 * std::numbers::pi * j / angular_nodes;
      directions.push_back(Vec{std::cos(phi), std::sin(phi), 0.0});
      dir_weights.push_back(1.0);
    }
  } else {
    const GaussRule& polar = gauss_rule(std::max(2, angular_nodes / 2));
    for (std::size_t i = 0; i < polar.nodes.size(); ++i) {
      const double z = 2.0 * polar.nodes[i] - 1.0;
      const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
      for (int j = 0; j < angular_nodes; ++j) {
        const double phi = 2.0 * std::numbers::pi * j / angular_nodes;
        directions.push_back(Vec{s * std::cos(phi), s * std::sin(phi), z});
        dir_weights.push_back(polar.weights[i]);
      }
    }
  }
  for (std::size_t i = 0; i < radial.nodes.size(); ++i) {
    const double s = radial.nodes[i];
    const double u = 1.0 - s * s;
    const double w = radial.weights[i] * u * u * std::pow(s, d - 1);
    for (std::size_t j = 0; j < directions.size(); ++j) {
      offsets.push_back((radius * s) * directions[j]);
      weights.push_back(w * dir_weights[j]);
    }
  }
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  for (double& w : weights) w /= total;
  auto eval = [G, offsets, weights](const Vec& x) {
    Vec acc{};
    for (std::size_t i = 0; i < offsets.size(); ++i) acc += weights[i] * G(x + offsets[i]);
    return acc;
  };
  return GradientField(d, eval, GradientProvenance::kMollified, "mollified " + G.label(), G.sup_bound());
}

double line_integral(const GradientField& G, std::span<const Vec> waypoints, const QuadratureOptions& q) {
  if (!(q.max_piece > 0.0)) throw std::invalid_argument("quadrature piece length must be positive");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < waypoints.size(); ++i) total += segment_integral(G, waypoints[i], waypoints[i + 1], q);
  return total;
}

// ---------------------------------------------------------------------------

CorrectorIntegral::CorrectorIntegral(const ClusterGraph& graph, const GradientField& G, const Vec& source,
                                     const QuadratureOptions& q)
    : graph_(&graph), G_(&G), q_(q), source_(source), component_(proxy_component(graph)) {
  if (component_ < 0 || !contains(graph, component_, source)) {
    throw DisconnectedError("corrector integral: source is off the unbounded-cluster proxy");
  }
  tree_ = std::make_unique<ChemicalTree>(graph, source);
  const std::size_t n = graph.node_count();
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i)
    if (std::isfinite(tree_->center_distance(i))) order.push_back(i);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return tree_->center_distance(a) < tree_->center_distance(b); });
  center_value_.assign(n, std::numeric_limits<double>::quiet_NaN());
  const auto& pts = graph.config().points;
  for (std::size_t i : order) {
    const std::size_t p = tree_->parent(i);
    if (p == ChemicalTree::npos) {
      center_value_[i] = segment_integral(G, source_, pts[i], q_);
    } else {
      center_value_[i] = center_value_[p] + segment_integral(G, pts[p], pts[i], q_);
    }
  }
}

double CorrectorIntegral::operator()(const Vec& x) const {
  if (!contains(*graph_, component_, x)) return 0.0;
  const std::size_t last = tree_->entry_center(x);
  if (last == ChemicalTree::npos) return segment_integral(*G_, source_, x, q_);
  return center_value_[last] + segment_integral(*G_, graph_->config().points[last], x, q_);
}

ChemicalPath CorrectorIntegral::path(const Vec& x) const {
  if (!contains(*graph_, component_, x)) return {};
  return tree_->path_to(x);
}

double path_integral_V(const ClusterGraph& graph, const GradientField& G, const Vec& x, const QuadratureOptions& q) {
  const int c = proxy_component(graph);
  if (c < 0 || !contains(graph, c, Vec{})) {
    throw DisconnectedError("path integral: the origin is off the unbounded-cluster proxy");
  }
  if (!contains(graph, c, x)) return 0.0;
  const ChemicalPath path = ChemicalTree(graph, Vec{}).path_to(x);
  return line_integral(G, path.waypoints, q);
}

std::vector<Vec> cluster_probes(const ClusterGraph& graph, double r, double density, std::size_t offset) {
  if (!(r > 0.0)) throw std::invalid_argument("probe box must be non-empty");
  if (!(density > 0.0)) throw std::invalid_argument("probe density must be positive");
  const int c = proxy_component(graph);
  if (c < 0) return {};
  std::vector<Vec> out;
  for (const Vec& x : halton_box(graph.config().dimension(), r, density, offset)) {
    if (contains(graph, c, x)) out.push_back(x);
  }
  return out;
}

// ---------------------------------------------------------------------------

LoopReport closed_loop_residual(const ClusterGraph& graph, const GradientField& G, std::size_t loops,
                                std::uint64_t seed, double window, double tolerance, const QuadratureOptions& q) {
  const double w = window > 0.0 ? window : 0.5 * graph.config().box.half_width;
  const auto probes = cluster_probes(graph, w, 4.0);
  if (probes.size() < 3) throw NoValidLoop("closed loop: fewer than 3 cluster points in the window");
  LoopReport report;
  report.tolerance = tolerance;
  report.loops.resize(loops);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t l = 0; l < loops; ++l) {
    Philox rng(seed, l);
    std::size_t idx[3];
    for (int v = 0; v < 3; ++v) {
      bool fresh = false;
      while (!fresh) {
        idx[v] = std::min(probes.size() - 1, static_cast<std::size_t>(rng.uniform() * probes.size()));
        fresh = true;
        for (int u = 0; u < v; ++u) fresh = fresh && idx[u] != idx[v];
      }
    }
    LoopRecord& rec = report.loops[l];
    std::vector<Vec> poly;
    for (int v = 0; v < 3; ++v) {
      rec.vertices[v] = probes[idx[v]];
      const ChemicalPath edge = chemical_distance(graph, probes[idx[v]], probes[idx[(v + 1) % 3]]);
      rec.circulation += line_integral(G, edge.waypoints, q);
      rec.length += edge.length;
      poly.insert(poly.end(), edge.waypoints.begin(), edge.waypoints.end() - 1);
    }
    double area = 0.0;
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Vec& a = poly[i];
      const Vec& b = poly[(i + 1) % poly.size()];
      area += a[0] * b[1] - b[0] * a[1];
    }
    rec.signed_area = 0.5 * area;
  }
  for (const auto& rec : report.loops) {
    report.max_abs_circulation = std::max(report.max_abs_circulation, std::abs(rec.circulation));
    if (!std::isfinite(rec.circulation)) report.max_abs_circulation = kInf;
  }
  report.closed = report.max_abs_circulation <= tolerance;
  return report;
}

// ---------------------------------------------------------------------------

InducedMean induced_mean(std::span<const PointConfiguration> ensemble,
                         const std::function<GradientField(const PointConfiguration&)>& field_of, int axis, int sign,
                         const QuadratureOptions& q) {
  if (ensemble.empty()) throw std::invalid_argument("induced mean: empty ensemble");
  const std::size_t n = ensemble.size();
  std::vector<double> value(n, 0.0);
  std::vector<int> arrival(n, 0);
  std::vector<char> ok(n, 0);
  std::vector<char> off(n, 0);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    const ClusterGraph graph(ensemble[i]);
    const int c = proxy_component(graph);
    if (c < 0 || !contains(graph, c, Vec{})) {
      off[i] = 1;
      continue;
    }
    const InducedArrival arr = induced_arrivals(ensemble[i], graph, axis, sign, 1);
    if (arr.truncated) continue;
    const GradientField G = field_of(ensemble[i]);
    arrival[i] = arr.indices.front();
    value[i] = CorrectorIntegral(graph, G, Vec{}, q)(static_cast<double>(arrival[i]) * arr.direction());
    ok[i] = 1;
  }
  if (std::any_of(off.begin(), off.end(), [](char c) { return c != 0; })) {
    throw std::invalid_argument("induced mean: ensemble member with the origin off the unbounded-cluster proxy");
  }
  InducedMean out;
  double arrivals = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!ok[i]) {
      ++out.truncated;
      continue;
    }
    out.samples.push_back(value[i]);
    arrivals += arrival[i];
  }
  out.used = out.samples.size();
  if (out.used == 0) throw std::runtime_error("induced mean: every configuration was truncated");
  const double m = std::accumulate(out.samples.begin(), out.samples.end(), 0.0) / static_cast<double>(out.used);
  out.mean = m;
  out.mean_arrival = arrivals / static_cast<double>(out.used);
  if (out.used < 2) {
    out.standard_error = kInf;
  } else {
    double var = 0.0;
    for (double v : out.samples) var += (v - m) * (v - m);
    var /= static_cast<double>(out.used - 1);
    out.standard_error = std::sqrt(var / static_cast<double>(out.used));
  }
  return out;
}

InducedMean induced_mean(std::span<const PointConfiguration> ensemble, const GradientField& G, int axis, int sign,
                         const QuadratureOptions& q) {
  return induced_mean(ensemble, [&G](const PointConfiguration&) { return G; }, axis, sign, q);
}

// ---------------------------------------------------------------------------

bool SublinearityReport::eventually_nonincreasing(std::size_t from) const {
  for (std::size_t i = from; i + 1 < ratios.size(); ++i) {
    if (ratios[i + 1] > ratios[i] * (1.0 + 1e-12) + 1e-15) return false;
  }
  return true;
}

SublinearityReport sublinearity_scan(const ClusterGraph& graph, const GradientField& G, std::span<const double> radii,
                                     const SublinearityOptions& options) {
  const auto& box = graph.config().box;
  for (std::size_t i = 0; i < radii.size(); ++i) {
    if (!(radii[i] > 0.0) || radii[i] > box.half_width) throw std::invalid_argument("radii must lie in (0, L]");
    if (i > 0 && !(radii[i] > radii[i - 1])) throw std::invalid_argument("radii must be increasing");
  }
  for (int k : options.sections) {
    if (k < 1 || k > graph.config().dimension()) throw std::invalid_argument("section dimension out of range");
  }
  const CorrectorIntegral V(graph, G, Vec{}, options.quadrature);
  SublinearityReport report;
  report.radii.assign(radii.begin(), radii.end());
  if (radii.empty()) return report;

  auto values_at = [&](const std::vector<Vec>& pts) {
    std::vector<double> v(pts.size());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < pts.size(); ++i) v[i] = V(pts[i]);
    return v;
  };

  const auto probes = cluster_probes(graph, radii.back(), options.probe_density);
  const auto values = values_at(probes);
  for (double r : radii) {
    double m = 0.0;
    for (std::size_t i = 0; i < probes.size(); ++i) {
      if (norm_inf(probes[i]) <= r) m = std::max(m, std::abs(values[i]));
    }
    report.ratios.push_back(m / r);
  }

  if (options.ray_arrivals > 0) {
    const InducedArrival arr = induced_arrivals(graph.config(), graph, 0, 1, options.ray_arrivals);
    report.ray_truncated = arr.truncated;
    for (std::size_t k = 0; k < arr.indices.size(); ++k) {
      const double v = V(static_cast<double>(arr.indices[k]) * arr.direction());
      report.ray_ratios.push_back(std::abs(v) / static_cast<double>(k + 1));
    }
  }

  for (int k : options.sections) {
    for (double r : radii) {
      // Candidates on the k-dimensional section; the normalization counts all of them.
      const auto section = halton_box(k, r, options.probe_density, 0);
      std::vector<Vec> inside;
      for (const Vec& x : section)
        if (contains(graph, V.component(), x)) inside.push_back(x);
      std::vector<double> vx = values_at(inside);
      std::sort(vx.begin(), vx.end());
      std::vector<Vec> segment{Vec{}};
      for (const Vec& y : halton_box(1, r, options.probe_density, 0))
        if (contains(graph, V.component(), y)) segment.push_back(y);
      const auto vy = values_at(segment);
      for (double eps : options.epsilons) {
        double best = kInf;
        for (double v : vy) {
          const auto lo = std::upper_bound(vx.begin(), vx.end(), v - eps * r) - vx.begin();
          const auto hi = vx.end() - std::lower_bound(vx.begin(), vx.end(), v + eps * r);
          const double count = static_cast<double>(lo + hi);
          best = std::min(best, count / static_cast<double>(section.size()));
        }
        report.density.push_back({k, eps, r, best});
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

std::string sublinearity_csv(const SublinearityReport& report) {
  std::string out = "series,k,epsilon,x,value\n";
  for (std::size_t i = 0; i < report.ratios.size(); ++i) {
    out += fmt::format("ratio,,,{:.17g},{:.17g}\n", report.radii[i], report.ratios[i]);
  }
  for (std::size_t i = 0; i < report.ray_ratios.size(); ++i) {
    out += fmt::format("ray,,,{},{:.17g}\n", i + 1, report.ray_ratios[i]);
  }
  for (const auto& e : report.density) {
    out += fmt::format("density,{},{:.17g},{:.17g},{:.17g}\n", e.k, e.epsilon, e.radius, e.value);
  }
  return out;
}

namespace {
nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
}  // namespace

std::string sublinearity_json(const SublinearityReport& report) {
  nlohmann::json j;
  j["version"] = 1;
  j["radii"] = report.radii;
  j["ratios"] = report.ratios;
  j["ray_ratios"] = report.ray_ratios;
  j["ray_truncated"] = report.ray_truncated;
  auto& d = j["density"] = nlohmann::json::array();
  for (const auto& e : report.density) {
    d.push_back({{"k", e.k}, {"epsilon", e.epsilon}, {"radius", e.radius}, {"value", finite_or_null(e.value)}});
  }
  return j.dump(2);
}

std::string loop_report_json(const LoopReport& report) {
  nlohmann::json j;
  j["version"] = 1;
  j["max_abs_circulation"] = finite_or_null(report.max_abs_circulation);
  j["tolerance"] = report.tolerance;
  j["closed"] = report.closed;
  auto& loops = j["loops"] = nlohmann::json::array();
  for (const auto& rec : report.loops) {
    nlohmann::json v = nlohmann::json::array();
    for (const Vec& p : rec.vertices) v.push_back({p[0], p[1], p[2]});
    loops.push_back({{"vertices", v},
                     {"circulation", finite_or_null(rec.circulation)},
                     {"signed_area", rec.signed_area},
                     {"length", rec.length}});
  }
  return j.dump(2);
}

}  // namespace chom
