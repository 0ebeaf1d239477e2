#include "config.h"

#include <cmath>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "chom/rng.h"

namespace chom::cli {

namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

[[noreturn]] void fail(const std::string& path, const std::string& message) {
  throw ConfigError(fmt::format("{}: {}", path.empty() ? "<root>" : path, message));
}

/// Reads the keys of one JSON object and remembers which were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path, int dimension) : j_(j), path_(std::move(path)), dim_(dimension) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  Reader child(const std::string& key) {
    used_.insert(key);
    return Reader(j_.at(key), join(path_, key), dim_);
  }

  void get(const std::string& key, double& out) {
    if (!take(key)) return;
    out = number(j_.at(key), join(path_, key));
  }
  void get(const std::string& key, std::optional<double>& out) {
    if (!take(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    out = number(j_.at(key), join(path_, key));
  }
  void get(const std::string& key, int& out) { out = static_cast<int>(integer(key, -1000000, 1000000, out)); }
  void get(const std::string& key, std::uint64_t& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      fail(join(path_, key), "expected a nonnegative integer");
    }
    out = v.get<std::uint64_t>();
  }
  void get(const std::string& key, bool& out) {
    if (!take(key)) return;
    if (!j_.at(key).is_boolean()) fail(join(path_, key), "expected true or false");
    out = j_.at(key).get<bool>();
  }
  void get(const std::string& key, std::string& out) {
    if (!take(key)) return;
    if (!j_.at(key).is_string()) fail(join(path_, key), "expected a string");
    out = j_.at(key).get<std::string>();
  }
  void get(const std::string& key, Vec& out) {
    if (!take(key)) return;
    out = vec(j_.at(key), join(path_, key));
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (!take(key)) return;
    const auto p = join(path_, key);
    out.clear();
    for (std::size_t i = 0; const auto& v : array(j_.at(key), p)) out.push_back(number(v, fmt::format("{}[{}]", p, i++)));
  }
  void get(const std::string& key, std::vector<int>& out) {
    if (!take(key)) return;
    const auto p = join(path_, key);
    out.clear();
    for (std::size_t i = 0; const auto& v : array(j_.at(key), p)) {
      if (!v.is_number_integer()) fail(fmt::format("{}[{}]", p, i), "expected an integer");
      out.push_back(v.get<int>());
      ++i;
    }
  }
  void get(const std::string& key, std::vector<std::uint64_t>& out) {
    if (!take(key)) return;
    const auto p = join(path_, key);
    out.clear();
    for (std::size_t i = 0; const auto& v : array(j_.at(key), p)) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        fail(fmt::format("{}[{}]", p, i), "expected a nonnegative integer");
      }
      out.push_back(v.get<std::uint64_t>());
      ++i;
    }
  }
  void get(const std::string& key, std::vector<Vec>& out) {
    if (!take(key)) return;
    const auto p = join(path_, key);
    out.clear();
    for (std::size_t i = 0; const auto& v : array(j_.at(key), p)) out.push_back(vec(v, fmt::format("{}[{}]", p, i++)));
  }

  /// Rejects keys that were never read.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) fail(join(path_, it.key()), "unknown key");
    }
  }

  const std::string& path() const { return path_; }
  std::string at(const std::string& key) const { return join(path_, key); }

 private:
  bool take(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }
  double integer(const std::string& key, double lo, double hi, double fallback) {
    if (!take(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) fail(join(path_, key), "expected an integer");
    const double d = v.get<double>();
    if (d < lo || d > hi) fail(join(path_, key), "integer out of range");
    return d;
  }
  static double number(const json& v, const std::string& p) {
    if (!v.is_number()) fail(p, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(p, "must be finite");
    return d;
  }
  static const json& array(const json& v, const std::string& p) {
    if (!v.is_array()) fail(p, "expected an array");
    return v;
  }
  Vec vec(const json& v, const std::string& p) const {
    if (!v.is_array()) fail(p, "expected an array of numbers");
    if (static_cast<int>(v.size()) != dim_) {
      fail(p, fmt::format("has {} components, the dimension is {}", v.size(), dim_));
    }
    Vec out{};
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = number(v[k], fmt::format("{}[{}]", p, k));
    return out;
  }

  const json& j_;
  std::string path_;
  int dim_;
  std::set<std::string> used_;
};

void require(bool ok, const std::string& path, const std::string& message) {
  if (!ok) fail(path, message);
}

bool increasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] > v[i - 1])) return false;
  return true;
}

bool all_positive(const std::vector<double>& v) {
  for (double x : v)
    if (!(x > 0.0)) return false;
  return true;
}

void read_theta_grid(Reader r, ThetaGridBlock& g, int dim) {
  r.get("kind", g.kind);
  r.get("directions", g.directions);
  r.get("radii", g.radii);
  r.get("half_width", g.half_width);
  r.get("per_axis", g.per_axis);
  r.get("points", g.points);
  r.finish();
  if (g.kind == "polar") {
    require(dim == 2, r.at("kind"), "polar grids need dimension 2");
    require(g.directions >= 2, r.at("directions"), "must be at least 2");
    require(!g.radii.empty() && all_positive(g.radii) && increasing(g.radii), r.at("radii"),
            "must be positive and increasing");
  } else if (g.kind == "cartesian") {
    require(g.half_width > 0.0, r.at("half_width"), "must be positive");
    require(g.per_axis >= 2, r.at("per_axis"), "must be at least 2");
  } else if (g.kind == "list") {
    require(!g.points.empty(), r.at("points"), "must not be empty");
  } else {
    fail(r.at("kind"), "must be one of polar, cartesian, list");
  }
}

json vec_json(const Vec& v, int dim);

json theta_grid_json(const ThetaGridBlock& g, int dim) {
  json pts = json::array();
  for (const Vec& p : g.points) pts.push_back(vec_json(p, dim));
  return {{"kind", g.kind},        {"directions", g.directions}, {"radii", g.radii},
          {"half_width", g.half_width}, {"per_axis", g.per_axis},  {"points", pts}};
}

json vec_json(const Vec& v, int dim) {
  json a = json::array();
  for (int k = 0; k < dim; ++k) a.push_back(v[static_cast<std::size_t>(k)]);
  return a;
}

json vecs_json(const std::vector<Vec>& vs, int dim) {
  json a = json::array();
  for (const Vec& v : vs) a.push_back(vec_json(v, dim));
  return a;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("<root>: not valid JSON ({})", e.what()));
  }
  ExperimentConfig c;
  if (!j.is_object()) fail("", "expected an object");
  // The dimension fixes the length of every vector, so read it first.
  int dim = 2;
  if (j.contains("environment") && j["environment"].is_object() && j["environment"].contains("dimension")) {
    const auto& d = j["environment"]["dimension"];
    if (!d.is_number_integer()) fail("environment.dimension", "expected an integer");
    dim = d.get<int>();
    require(dim >= kMinDim && dim <= kMaxDim, "environment.dimension", "must be 2 or 3");
  }
  Reader root(j, "", dim);
  if (!root.has("version")) fail("version", "missing (expected 1)");
  root.get("version", c.version);
  require(c.version == kConfigVersion, "version", fmt::format("unsupported version {}", c.version));

  if (root.has("environment")) {
    Reader r = root.child("environment");
    auto& e = c.environment;
    r.get("kind", e.kind);
    r.get("dimension", e.dimension);
    r.get("half_width", e.half_width);
    r.get("intensity", e.intensity);
    r.get("seeds", e.seeds);
    r.get("max_attempts", e.max_attempts);
    r.get("level", e.level);
    r.finish();
    require(e.kind == "percolation" || e.kind == "constant", r.at("kind"), "must be percolation or constant");
    require(e.half_width > 0.0, r.at("half_width"), "must be positive");
    require(e.intensity > 0.0, r.at("intensity"), "must be positive");
    require(!e.seeds.empty(), r.at("seeds"), "must list at least one seed");
    require(e.max_attempts >= 1, r.at("max_attempts"), "must be at least 1");
    require(e.level > 0.0 && e.level <= 1.0, r.at("level"), "must lie in (0, 1]");
  }
  c.environment.dimension = dim;

  if (root.has("field")) {
    Reader r = root.child("field");
    auto& f = c.field;
    r.get("smoothing_radius", f.smoothing_radius);
    r.get("hamiltonian", f.hamiltonian);
    r.get("alpha", f.alpha);
    r.get("coefficient", f.coefficient);
    r.get("drift", f.drift);
    if (r.has("fourier")) {
      Reader fr = r.child("fourier");
      FourierDrift fd;
      fr.get("modes", fd.modes);
      fr.get("amplitude", fd.amplitude);
      fr.get("length_scale", fd.length_scale);
      fr.get("seed", fd.seed);
      fr.finish();
      require(fd.modes >= 1, fr.at("modes"), "must be at least 1");
      require(fd.amplitude >= 0.0, fr.at("amplitude"), "must be nonnegative");
      require(fd.length_scale > 0.0, fr.at("length_scale"), "must be positive");
      f.fourier = fd;
    }
    r.finish();
    require(f.smoothing_radius > 0.0 && f.smoothing_radius <= 0.5, r.at("smoothing_radius"), "must lie in (0, 1/2]");
    require(f.hamiltonian == "quadratic" || f.hamiltonian == "power", r.at("hamiltonian"),
            "must be quadratic or power");
    require(f.alpha > 1.0, r.at("alpha"), "must exceed 1");
    require(f.coefficient > 0.0, r.at("coefficient"), "must be positive");
    require(f.hamiltonian == "quadratic" || (norm2(f.drift) == 0.0 && !f.fourier), r.at("drift"),
            "a drift needs the quadratic Hamiltonian");
  }

  if (root.has("solver")) {
    Reader r = root.child("solver");
    auto& s = c.solver;
    r.get("half_width", s.half_width);
    if (r.has("spacing")) {
      double h = 0.0;
      r.get("spacing", h);
      s.spacings = {h};
    }
    r.get("spacings", s.spacings);
    r.get("epsilons", s.epsilons);
    r.get("T", s.T);
    r.get("cfl", s.cfl);
    r.get("dt", s.dt);
    r.get("variant", s.variant);
    r.get("snapshot_times", s.snapshot_times);
    r.get("write_grids", s.write_grids);
    if (r.has("data")) {
      Reader d = r.child("data");
      d.get("kind", s.data.kind);
      d.get("theta", s.data.theta);
      d.finish();
      require(s.data.kind == "linear" || s.data.kind == "cone" || s.data.kind == "bump", d.at("kind"),
              "must be linear, cone or bump");
    }
    if (r.has("mc")) {
      Reader m = r.child("mc");
      m.get("paths", s.mc.paths);
      m.get("dt", s.mc.dt);
      m.get("seed", s.mc.seed);
      m.finish();
      require(s.mc.paths >= 2, m.at("paths"), "must be at least 2");
      require(s.mc.dt > 0.0, m.at("dt"), "must be positive");
    }
    r.finish();
    require(s.half_width > 0.0, r.at("half_width"), "must be positive");
    require(!s.epsilons.empty() && all_positive(s.epsilons), r.at("epsilons"), "must be positive and non-empty");
    require(!s.spacings.empty() && all_positive(s.spacings), r.at("spacings"), "must be positive and non-empty");
    require(s.spacings.size() == 1 || s.spacings.size() == s.epsilons.size(), r.at("spacings"),
            "needs one entry or one per epsilon");
    require(s.T > 0.0, r.at("T"), "must be positive");
    require(s.cfl > 0.0 && s.cfl <= 0.5, r.at("cfl"), "must satisfy 0 < cfl <= 1/2");
    require(!s.dt || *s.dt > 0.0, r.at("dt"), "must be positive");
    require(s.variant == "lax_friedrichs" || s.variant == "upwind_divergence", r.at("variant"),
            "must be lax_friedrichs or upwind_divergence");
    for (double t : s.snapshot_times) require(t > 0.0 && t <= s.T, r.at("snapshot_times"), "must lie in (0, T]");
    for (double h : s.spacings) {
      const double n = 2.0 * s.half_width / h;
      require(std::abs(n - std::round(n)) < 1e-9 * n, r.at("spacings"), "2 * half_width must be a multiple of the spacing");
    }
  }

  if (root.has("effective")) {
    Reader r = root.child("effective");
    auto& e = c.effective;
    if (r.has("theta_grid")) read_theta_grid(r.child("theta_grid"), e.theta_grid, dim);
    r.get("beta_schedule", e.beta_schedule);
    r.get("support_ratio", e.support_ratio);
    r.get("spacing", e.spacing);
    r.get("max_iterations", e.max_iterations);
    r.get("variational", e.variational);
    r.get("hopf_lax_time", e.hopf_lax_time);
    r.get("hopf_lax_points", e.hopf_lax_points);
    r.get("gradient_probes", e.gradient_probes);
    r.get("gradient_tolerance", e.gradient_tolerance);
    if (r.has("feynman_kac")) {
      Reader f = r.child("feynman_kac");
      auto& fk = e.feynman_kac;
      f.get("T", fk.T);
      f.get("dt", fk.dt);
      f.get("paths", fk.paths);
      f.get("seed", fk.seed);
      f.get("blocks", fk.blocks);
      f.finish();
      require(fk.T > 0.0, f.at("T"), "must be positive");
      require(fk.dt > 0.0 && fk.dt <= fk.T, f.at("dt"), "must lie in (0, T]");
      require(fk.blocks >= 2, f.at("blocks"), "must be at least 2");
      require(fk.paths >= static_cast<std::size_t>(fk.blocks), f.at("paths"), "must be at least the block count");
    }
    r.finish();
    require(!e.beta_schedule.empty() && all_positive(e.beta_schedule) && increasing(e.beta_schedule),
            r.at("beta_schedule"), "must be positive and increasing");
    require(e.support_ratio > 0.0 && e.support_ratio <= 1.0, r.at("support_ratio"), "must lie in (0, 1]");
    require(e.spacing > 0.0, r.at("spacing"), "must be positive");
    require(e.max_iterations >= 1, r.at("max_iterations"), "must be at least 1");
    require(e.hopf_lax_time > 0.0, r.at("hopf_lax_time"), "must be positive");
    require(e.gradient_tolerance > 0.0, r.at("gradient_tolerance"), "must be positive");
  }

  if (root.has("ldp")) {
    Reader r = root.child("ldp");
    auto& l = c.ldp;
    r.get("horizons", l.horizons);
    r.get("dt", l.dt);
    r.get("paths", l.paths);
    r.get("seed", l.seed);
    r.get("velocities", l.velocities);
    if (r.has("theta_grid")) read_theta_grid(r.child("theta_grid"), l.theta_grid, dim);
    r.finish();
    require(!l.horizons.empty() && all_positive(l.horizons) && increasing(l.horizons), r.at("horizons"),
            "must be positive and increasing");
    require(l.dt > 0.0 && l.dt <= l.horizons.front(), r.at("dt"), "must lie in (0, first horizon]");
    require(l.paths >= 2, r.at("paths"), "must be at least 2");
    require(!l.velocities.empty(), r.at("velocities"), "must not be empty");
  }

  if (root.has("corrector")) {
    Reader r = root.child("corrector");
    auto& k = c.corrector;
    r.get("field", k.field);
    r.get("amplitude", k.amplitude);
    r.get("radius", k.radius);
    r.get("center", k.center);
    r.get("vector", k.vector);
    r.get("radii", k.radii);
    r.get("probe_density", k.probe_density);
    r.get("loops", k.loops);
    r.get("loop_seed", k.loop_seed);
    r.get("ensemble", k.ensemble);
    r.get("ensemble_half_width", k.ensemble_half_width);
    r.get("epsilons", k.epsilons);
    r.get("sections", k.sections);
    r.get("ray_arrivals", k.ray_arrivals);
    r.get("mollifier_radius", k.mollifier_radius);
    r.finish();
    require(k.field == "bump-sum" || k.field == "bump" || k.field == "grid" || k.field == "constant" ||
                k.field == "rotational",
            r.at("field"), "must be bump-sum, bump, grid, constant or rotational");
    require(k.radius > 0.0, r.at("radius"), "must be positive");
    require(k.field != "bump-sum" || k.radius <= 0.5, r.at("radius"), "bump-sum needs radius <= 1/2");
    require(!k.radii.empty() && all_positive(k.radii) && increasing(k.radii), r.at("radii"),
            "must be positive and increasing");
    require(k.radii.back() <= c.environment.half_width, r.at("radii"), "must not exceed environment.half_width");
    require(k.probe_density > 0.0, r.at("probe_density"), "must be positive");
    require(k.ensemble >= 2, r.at("ensemble"), "must be at least 2");
    require(k.ensemble_half_width > 0.0, r.at("ensemble_half_width"), "must be positive");
    require(all_positive(k.epsilons), r.at("epsilons"), "must be positive");
    for (int s : k.sections) require(s >= 1 && s <= dim, r.at("sections"), "entries must lie in [1, dimension]");
    require(k.ray_arrivals >= 0, r.at("ray_arrivals"), "must be nonnegative");
    require(k.mollifier_radius >= 0.0, r.at("mollifier_radius"), "must be nonnegative");
  }

  if (root.has("output")) {
    Reader r = root.child("output");
    r.get("directory", c.output_directory);
    r.finish();
  }
  root.finish();
  return c;
}

std::string canonical_json(const ExperimentConfig& c) {
  const int d = c.environment.dimension;
  json j;
  j["version"] = c.version;
  const auto& e = c.environment;
  j["environment"] = {{"kind", e.kind},           {"dimension", e.dimension}, {"half_width", e.half_width},
                      {"intensity", e.intensity}, {"seeds", e.seeds},         {"max_attempts", e.max_attempts},
                      {"level", e.level}};
  const auto& f = c.field;
  j["field"] = {{"smoothing_radius", f.smoothing_radius},
                {"hamiltonian", f.hamiltonian},
                {"alpha", f.alpha},
                {"coefficient", f.coefficient},
                {"drift", vec_json(f.drift, d)}};
  if (f.fourier) {
    j["field"]["fourier"] = {{"modes", f.fourier->modes},
                             {"amplitude", f.fourier->amplitude},
                             {"length_scale", f.fourier->length_scale},
                             {"seed", f.fourier->seed}};
  }
  const auto& s = c.solver;
  j["solver"] = {{"half_width", s.half_width},
                 {"spacings", s.spacings},
                 {"epsilons", s.epsilons},
                 {"T", s.T},
                 {"cfl", s.cfl},
                 {"dt", s.dt ? json(*s.dt) : json()},
                 {"variant", s.variant},
                 {"snapshot_times", s.snapshot_times},
                 {"write_grids", s.write_grids},
                 {"data", {{"kind", s.data.kind}, {"theta", vec_json(s.data.theta, d)}}},
                 {"mc", {{"paths", s.mc.paths}, {"dt", s.mc.dt}, {"seed", s.mc.seed}}}};
  const auto& ef = c.effective;
  j["effective"] = {{"theta_grid", theta_grid_json(ef.theta_grid, d)},
                    {"beta_schedule", ef.beta_schedule},
                    {"support_ratio", ef.support_ratio},
                    {"spacing", ef.spacing},
                    {"max_iterations", ef.max_iterations},
                    {"variational", ef.variational},
                    {"hopf_lax_time", ef.hopf_lax_time},
                    {"hopf_lax_points", vecs_json(ef.hopf_lax_points, d)},
                    {"gradient_probes", ef.gradient_probes},
                    {"gradient_tolerance", ef.gradient_tolerance},
                    {"feynman_kac",
                     {{"T", ef.feynman_kac.T},
                      {"dt", ef.feynman_kac.dt},
                      {"paths", ef.feynman_kac.paths},
                      {"seed", ef.feynman_kac.seed},
                      {"blocks", ef.feynman_kac.blocks}}}};
  const auto& l = c.ldp;
  j["ldp"] = {{"horizons", l.horizons},
              {"dt", l.dt},
              {"paths", l.paths},
              {"seed", l.seed},
              {"velocities", vecs_json(l.velocities, d)},
              {"theta_grid", theta_grid_json(l.theta_grid, d)}};
  const auto& k = c.corrector;
  j["corrector"] = {{"field", k.field},
                    {"amplitude", k.amplitude},
                    {"radius", k.radius},
                    {"center", vec_json(k.center, d)},
                    {"vector", vec_json(k.vector, d)},
                    {"radii", k.radii},
                    {"probe_density", k.probe_density},
                    {"loops", k.loops},
                    {"loop_seed", k.loop_seed},
                    {"ensemble", k.ensemble},
                    {"ensemble_half_width", k.ensemble_half_width},
                    {"epsilons", k.epsilons},
                    {"sections", k.sections},
                    {"ray_arrivals", k.ray_arrivals},
                    {"mollifier_radius", k.mollifier_radius}};
  j["output"] = {{"directory", c.output_directory}};
  return j.dump(2);
}

void override_seeds(ExperimentConfig& c, std::uint64_t seed) {
  c.environment.seeds = {seed};
  c.solver.mc.seed = mix_seed(seed, 1);
  c.effective.feynman_kac.seed = mix_seed(seed, 2);
  c.ldp.seed = mix_seed(seed, 3);
  c.corrector.loop_seed = mix_seed(seed, 4);
  if (c.field.fourier) c.field.fourier->seed = mix_seed(seed, 5);
}

}  // namespace chom::cli
