#include "chom/environment.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include <json.hpp>

#include "chom/cluster.h"
#include "chom/rng.h"

namespace chom {

namespace {

constexpr int kRecordVersion = 1;
constexpr char kBinaryMagic[8] = {'C', 'H', 'O', 'M', 'C', 'F', 'G', '1'};

template <typename T>
void put(std::vector<char>& out, const T& v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(std::span<const char> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw std::runtime_error("configuration record truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void BoxDomain::validate() const {
  check_dimension(dimension);
  if (!(half_width > 0.0) || !std::isfinite(half_width)) {
    throw std::invalid_argument("box half_width must be positive and finite");
  }
}

double BoxDomain::volume() const { return std::pow(2.0 * half_width, dimension); }

bool BoxDomain::contains(const Vec& x) const {
  for (int k = 0; k < dimension; ++k)
    if (std::abs(x[static_cast<std::size_t>(k)]) > half_width) return false;
  return true;
}

double BoxDomain::distance_to_boundary(const Vec& x) const {
  double m = half_width;
  for (int k = 0; k < dimension; ++k) m = std::min(m, half_width - std::abs(x[static_cast<std::size_t>(k)]));
  return std::max(m, 0.0);
}

PointConfiguration sample_poisson(double intensity, const BoxDomain& box, std::uint64_t seed) {
  box.validate();
  if (!std::isfinite(intensity) || intensity < 0.0) {
    throw std::invalid_argument("intensity must be finite and non-negative");
  }
  PointConfiguration config;
  config.box = box;
  config.intensity = intensity;
  config.seed = seed;
  if (intensity == 0.0) return config;

  Philox rng(seed);
  std::poisson_distribution<long long> count_dist(intensity * box.volume());
  const long long n = count_dist(rng);
  config.points.reserve(static_cast<std::size_t>(n));
  const double L = box.half_width;
  for (long long i = 0; i < n; ++i) {
    Vec x{};
    for (int k = 0; k < box.dimension; ++k) x[static_cast<std::size_t>(k)] = L * (2.0 * rng.uniform() - 1.0);
    config.points.push_back(x);
  }
  return config;
}

bool origin_in_unbounded_proxy(const PointConfiguration& config) {
  const ClusterGraph graph(config);
  const auto proxy = graph.unbounded_proxy();
  return proxy && contains(graph, *proxy, Vec{});
}

PointConfiguration condition_on_origin(double intensity, const BoxDomain& box, std::uint64_t seed,
                                       int max_attempts) {
  if (max_attempts < 1) throw std::invalid_argument("max_attempts must be at least 1");
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    PointConfiguration config = sample_poisson(intensity, box, mix_seed(seed, static_cast<std::uint64_t>(attempt)));
    if (origin_in_unbounded_proxy(config)) {
      config.rejections = attempt;
      return config;
    }
  }
  throw SamplingExhausted("origin not in the unbounded cluster after " + std::to_string(max_attempts) +
                          " attempts (intensity " + std::to_string(intensity) +
                          " may be sub-critical or the box too small)");
}

InducedArrival induced_arrivals(const PointConfiguration& config, const ClusterGraph& graph, int axis, int sign,
                                int count) {
  if (axis < 0 || axis >= config.dimension()) throw std::invalid_argument("axis out of range");
  const auto proxy = graph.unbounded_proxy();
  if (!proxy || !contains(graph, *proxy, Vec{})) {
    throw std::invalid_argument("induced_arrivals requires the origin in the unbounded proxy");
  }
  InducedArrival arrivals;
  arrivals.axis = axis;
  arrivals.sign = sign >= 0 ? 1 : -1;
  const Vec e = arrivals.direction();
  const int limit = static_cast<int>(std::floor(config.box.half_width));
  for (int n = 1; n <= limit && static_cast<int>(arrivals.indices.size()) < count; ++n) {
    if (!graph.covering_balls(static_cast<double>(n) * e, *proxy, kLatticeSlack).empty()) {
      arrivals.indices.push_back(n);
    }
  }
  arrivals.truncated = static_cast<int>(arrivals.indices.size()) < count;
  return arrivals;
}

PointConfiguration recentered(const PointConfiguration& config, const Vec& shift) {
  PointConfiguration out = config;
  for (Vec& p : out.points) p -= shift;
  return out;
}

PalmEstimate empirical_palm_expectation(const PalmObservable& observable,
                                        std::span<const PointConfiguration> ensemble, double window_half_width) {
  if (ensemble.empty()) throw std::invalid_argument("empty ensemble");
  if (!(window_half_width > 0.0)) throw std::invalid_argument("window must be non-empty");
  std::vector<double> per_config;
  per_config.reserve(ensemble.size());
  for (const auto& config : ensemble) {
    if (!(config.intensity > 0.0)) throw std::invalid_argument("Palm expectation undefined for zero intensity");
    if (window_half_width > config.box.half_width) throw std::invalid_argument("window exceeds the box");
    const double norm = config.intensity * std::pow(2.0 * window_half_width, config.dimension());
    double sum = 0.0;
    for (std::size_t i = 0; i < config.points.size(); ++i) {
      if (norm_inf(config.points[i]) <= window_half_width) sum += observable(config, i);
    }
    per_config.push_back(sum / norm);
  }
  PalmEstimate est;
  est.configurations = per_config.size();
  double mean = 0.0;
  for (double v : per_config) mean += v;
  mean /= static_cast<double>(per_config.size());
  double var = 0.0;
  for (double v : per_config) var += (v - mean) * (v - mean);
  est.value = mean;
  if (per_config.size() > 1) {
    var /= static_cast<double>(per_config.size() - 1);
    est.standard_error = std::sqrt(var / static_cast<double>(per_config.size()));
  }
  return est;
}

std::string to_json(const PointConfiguration& config) {
  nlohmann::json j;
  j["version"] = kRecordVersion;
  j["dimension"] = config.box.dimension;
  j["half_width"] = config.box.half_width;
  j["intensity"] = config.intensity;
  j["seed"] = config.seed;
  auto& pts = j["points"] = nlohmann::json::array();
  for (const Vec& p : config.points) {
    nlohmann::json row = nlohmann::json::array();
    for (int k = 0; k < config.dimension(); ++k) row.push_back(p[static_cast<std::size_t>(k)]);
    pts.push_back(std::move(row));
  }
  return j.dump();
}

PointConfiguration configuration_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("version").get<int>() != kRecordVersion) throw std::runtime_error("unsupported configuration version");
  PointConfiguration config;
  config.box.dimension = j.at("dimension").get<int>();
  config.box.half_width = j.at("half_width").get<double>();
  config.box.validate();
  config.intensity = j.at("intensity").get<double>();
  config.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& row : j.at("points")) {
    if (static_cast<int>(row.size()) != config.dimension()) throw std::runtime_error("point dimension mismatch");
    Vec p{};
    for (int k = 0; k < config.dimension(); ++k) p[static_cast<std::size_t>(k)] = row[static_cast<std::size_t>(k)].get<double>();
    config.points.push_back(p);
  }
  return config;
}

std::vector<char> to_binary(const PointConfiguration& config) {
  std::vector<char> out(std::begin(kBinaryMagic), std::end(kBinaryMagic));
  put(out, static_cast<std::int32_t>(config.box.dimension));
  put(out, config.box.half_width);
  put(out, config.intensity);
  put(out, config.seed);
  put(out, static_cast<std::uint64_t>(config.points.size()));
  for (const Vec& p : config.points)
    for (int k = 0; k < config.dimension(); ++k) put(out, p[static_cast<std::size_t>(k)]);
  return out;
}

PointConfiguration configuration_from_binary(std::span<const char> bytes) {
  if (bytes.size() < sizeof(kBinaryMagic) || std::memcmp(bytes.data(), kBinaryMagic, sizeof(kBinaryMagic)) != 0) {
    throw std::runtime_error("not a configuration record");
  }
  std::size_t pos = sizeof(kBinaryMagic);
  PointConfiguration config;
  config.box.dimension = take<std::int32_t>(bytes, pos);
  config.box.half_width = take<double>(bytes, pos);
  config.box.validate();
  config.intensity = take<double>(bytes, pos);
  config.seed = take<std::uint64_t>(bytes, pos);
  const auto n = take<std::uint64_t>(bytes, pos);
  config.points.resize(n);
  for (Vec& p : config.points)
    for (int k = 0; k < config.dimension(); ++k) p[static_cast<std::size_t>(k)] = take<double>(bytes, pos);
  return config;
}

}  // namespace chom
