#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "doctest.h"

#include "chom/cluster.h"
#include "chom/environment.h"
#include "chom/rng.h"

using namespace chom;

namespace {

PointConfiguration make_config(std::vector<Vec> pts, double L = 5.0) {
  PointConfiguration c;
  c.box = BoxDomain{2, L};
  c.intensity = 1.0;
  c.points = std::move(pts);
  return c;
}

// All-pairs union-find; returns canonical labels (smallest member index per class).
std::vector<std::size_t> brute_partition(const std::vector<Vec>& pts) {
  std::vector<std::size_t> parent(pts.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      if (distance(pts[i], pts[j]) < 1.0) parent[std::max(find(i), find(j))] = std::min(find(i), find(j));
  std::vector<std::size_t> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = find(i);
  return out;
}

std::vector<std::size_t> graph_partition(const ClusterGraph& g) {
  std::map<int, std::size_t> first;
  for (std::size_t i = 0; i < g.node_count(); ++i) first.emplace(g.label(i), i);
  std::vector<std::size_t> out(g.node_count());
  for (std::size_t i = 0; i < g.node_count(); ++i) out[i] = first[g.label(i)];
  return out;
}

// Minimal chain length by exhaustive search over simple ball sequences.
int exhaustive_chain(const std::vector<Vec>& pts, const Vec& x, const Vec& y) {
  const std::size_t n = pts.size();
  int best = 1 << 20;
  std::vector<char> used(n, 0);
  std::function<void(std::size_t, int)> extend = [&](std::size_t i, int len) {
    if (len >= best) return;
    if (distance(pts[i], y) < 0.5) {
      best = len;
      return;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j] || distance(pts[i], pts[j]) >= 1.0) continue;
      used[j] = 1;
      extend(j, len + 1);
      used[j] = 0;
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (distance(pts[i], x) >= 0.5) continue;
    used[i] = 1;
    extend(i, 1);
    used[i] = 0;
  }
  return best;
}

bool segment_in_union(const std::vector<Vec>& pts, const Vec& a, const Vec& b) {
  const int steps = 400;
  for (int s = 0; s <= steps; ++s) {
    const Vec p = a + (double(s) / steps) * (b - a);
    bool in = false;
    for (const auto& c : pts) in = in || distance(p, c) < 0.5 + 1e-9;
    if (!in) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("overlap criterion") {
  ClusterGraph near(make_config({make_vec(0, 0), make_vec(0.9, 0)}));
  CHECK(near.edges().size() == 1);
  CHECK(near.component_count() == 1);
  ClusterGraph far(make_config({make_vec(0, 0), make_vec(1.1, 0)}));
  CHECK(far.edges().empty());
  CHECK(far.component_count() == 2);
}

TEST_CASE("labels match the all-pairs oracle and are permutation invariant") {
  auto c = sample_poisson(1000.0 / 400.0, BoxDomain{2, 10.0}, 21);
  ClusterGraph g(c);
  CHECK(graph_partition(g) == brute_partition(c.points));
  for (const auto& [i, j] : g.edges()) {
    CHECK(distance(c.points[i], c.points[j]) < 1.0);
    CHECK(g.label(i) == g.label(j));
    const auto nb = g.neighbors(j);
    CHECK(std::find(nb.begin(), nb.end(), i) != nb.end());
  }

  std::vector<std::size_t> perm(c.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937 rng(5);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto shuffled = c;
  for (std::size_t k = 0; k < perm.size(); ++k) shuffled.points[k] = c.points[perm[k]];
  ClusterGraph gs(shuffled);
  for (std::size_t a = 0; a < perm.size(); a += 7)
    for (std::size_t b = a + 1; b < perm.size(); b += 13)
      CHECK((g.label(perm[a]) == g.label(perm[b])) == (gs.label(a) == gs.label(b)));
}

TEST_CASE("unbounded proxy touches the boundary") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    ClusterGraph g(sample_poisson(2.0, BoxDomain{2, 8.0}, 100 + s));
    if (!g.unbounded_proxy()) continue;
    const int comp = *g.unbounded_proxy();
    CHECK(g.touches_boundary(comp));
    CHECK(g.boundary_component_count() >= 1);
    for (int c = 0; c < g.component_count(); ++c)
      if (g.touches_boundary(c)) CHECK(g.component_size(c) <= g.component_size(comp));
  }
}

TEST_CASE("contains") {
  auto c = make_config({make_vec(0, 0), make_vec(3, 0)});
  ClusterGraph g(c);
  const int comp = g.label(0);
  CHECK(contains(g, comp, make_vec(0, 0)));
  CHECK(contains(g, comp, make_vec(0.49, 0)));
  CHECK_FALSE(contains(g, comp, make_vec(0.51, 0)));
  CHECK_FALSE(contains(g, comp, make_vec(3, 0)));

  auto r = sample_poisson(2.0, BoxDomain{2, 5.0}, 4);
  ClusterGraph gr(r);
  Philox rng(3);
  for (int i = 0; i < 2000; ++i) {
    const Vec x = make_vec(10 * rng.uniform() - 5, 10 * rng.uniform() - 5);
    const int cid = static_cast<int>(rng() % static_cast<unsigned>(gr.component_count()));
    bool oracle = false;
    for (std::size_t k = 0; k < r.size(); ++k) oracle = oracle || (gr.label(k) == cid && distance(x, r.points[k]) < 0.5);
    CHECK(contains(gr, cid, x) == oracle);
  }
}

TEST_CASE("ball count distance") {
  auto c = make_config({make_vec(0, 0), make_vec(0.8, 0), make_vec(5, 5)});
  ClusterGraph g(c);
  CHECK(ball_count_distance(g, make_vec(0.1, 0), make_vec(-0.1, 0.1)) == 1);
  CHECK(ball_count_distance(g, make_vec(-0.3, 0), make_vec(1.1, 0)) == 2);
  CHECK_THROWS_AS(ball_count_distance(g, make_vec(0, 0), make_vec(5, 5)), DisconnectedError);
  CHECK_THROWS_AS(ball_count_distance(g, make_vec(0, 0), make_vec(2.5, 0)), DisconnectedError);
  CHECK(ball_count_distance(g, make_vec(5.1, 5), make_vec(5.1, 5)) == 1);
}

TEST_CASE("ball count distance matches exhaustive search on small instances") {
  int compared = 0;
  for (std::uint64_t s = 0; s < 60 && compared < 40; ++s) {
    auto c = sample_poisson(12.0 / 9.0, BoxDomain{2, 1.5}, 700 + s);
    if (c.size() < 3 || c.size() > 12) continue;
    ClusterGraph g(c);
    Philox rng(s);
    for (int t = 0; t < 5; ++t) {
      const Vec x = c.points[rng() % c.size()] + make_vec(0.2 * rng.uniform() - 0.1, 0.2 * rng.uniform() - 0.1);
      const Vec y = c.points[rng() % c.size()] + make_vec(0.2 * rng.uniform() - 0.1, 0.2 * rng.uniform() - 0.1);
      const int oracle = exhaustive_chain(c.points, x, y);
      if (oracle >= (1 << 20)) {
        CHECK_THROWS_AS(ball_count_distance(g, x, y), DisconnectedError);
      } else {
        CHECK(ball_count_distance(g, x, y) == oracle);
        ++compared;
      }
    }
  }
  CHECK(compared > 10);
}

TEST_CASE("chemical distance on simple geometries") {
  auto c = make_config({make_vec(0, 0), make_vec(0.9, 0), make_vec(1.8, 0)});
  ClusterGraph g(c);
  const auto same = chemical_distance(g, make_vec(0.1, 0.1), make_vec(-0.2, 0));
  CHECK(same.length == doctest::Approx(std::hypot(0.3, 0.1)));
  CHECK(same.waypoints.size() == 2);
  const auto line = chemical_distance(g, make_vec(0, 0), make_vec(1.8, 0));
  CHECK(line.length == doctest::Approx(1.8).epsilon(1e-14));
  CHECK(line.lower_bound == doctest::Approx(1.8));
  CHECK_THROWS_AS(chemical_distance(g, make_vec(0, 0), make_vec(4, 0)), DisconnectedError);
}

TEST_CASE("chemical distance bounds, path validity and triangle inequality") {
  const auto c = condition_on_origin(3.0, BoxDomain{2, 6.0}, 12, 200);
  ClusterGraph g(c);
  const int comp = *g.unbounded_proxy();
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < g.node_count(); ++i)
    if (g.label(i) == comp) members.push_back(i);
  Philox rng(9);
  auto random_member_point = [&] {
    const auto i = members[rng() % members.size()];
    const double r = 0.45 * rng.uniform(), phi = 2 * M_PI * rng.uniform();
    return c.points[i] + make_vec(r * std::cos(phi), r * std::sin(phi));
  };
  for (int t = 0; t < 40; ++t) {
    const Vec x = random_member_point(), y = random_member_point();
    const auto path = chemical_distance(g, x, y);
    CHECK(path.length >= distance(x, y) - 1e-12);
    CHECK(path.length <= ball_count_distance(g, x, y) + 1e-12);
    double len = 0;
    for (std::size_t k = 1; k < path.waypoints.size(); ++k) {
      len += distance(path.waypoints[k - 1], path.waypoints[k]);
      CHECK(segment_in_union(c.points, path.waypoints[k - 1], path.waypoints[k]));
    }
    CHECK(len == doctest::Approx(path.length));
    CHECK(ball_count_distance(g, x, x) == 1);

    const Vec z = c.points[members[rng() % members.size()]];
    CHECK(path.length <= chemical_distance(g, x, z).length + chemical_distance(g, z, y).length + 1e-12);
  }
}

TEST_CASE("chemical stretch statistic") {
  // Frequency of d >= c0 |x - y|_inf for pairs at growing separation; logged, trend checked loosely.
  const auto c = condition_on_origin(3.0, BoxDomain{2, 10.0}, 33, 200);
  ClusterGraph g(c);
  ChemicalTree tree(g, Vec{});
  const int comp = *g.unbounded_proxy();
  const double c0 = 1.5;
  std::vector<int> hits(4, 0), total(4, 0);
  for (std::size_t i = 0; i < g.node_count(); ++i) {
    if (g.label(i) != comp) continue;
    const double r = norm_inf(c.points[i]);
    const int bin = static_cast<int>(r / 2.0);
    if (bin >= 4 || r < 0.5) continue;
    ++total[bin];
    hits[bin] += tree.path_to(c.points[i]).length >= c0 * r;
  }
  for (int b = 0; b < 4; ++b)
    if (total[b]) MESSAGE("bin " << b << ": " << double(hits[b]) / total[b]);
  CHECK(total[3] > 0);
}

TEST_CASE("volume fraction") {
  auto full = make_config({make_vec(0, 0)});
  ClusterGraph g(full);
  CHECK(volume_fraction(g, 0, Vec{}, 0.3) == doctest::Approx(1.0));
  auto empty = make_config({make_vec(4, 4)});
  ClusterGraph ge(empty);
  CHECK(volume_fraction(ge, 0, Vec{}, 1.0) == 0.0);

  ClusterGraph gr(sample_poisson(4.0, BoxDomain{2, 20.0}, 2));
  const int comp = *gr.unbounded_proxy();
  const double small = volume_fraction(gr, comp, Vec{}, 10.0, 10);
  const double large = volume_fraction(gr, comp, Vec{}, 15.0, 10);
  CHECK(std::abs(small - large) < 0.02);
}

TEST_CASE("graph exports") {
  auto c = make_config({make_vec(0, 0), make_vec(0.9, 0), make_vec(3, 0)});
  ClusterGraph g(c);
  CHECK(g.edge_list_csv().find("0,1") != std::string::npos);
  CHECK(g.adjacency_json().find("\"adjacency\"") != std::string::npos);
}
