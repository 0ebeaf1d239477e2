// Serial references against the OpenMP kernels.

#include <benchmark/benchmark.h>

#include <vector>

#include "chom/diffusion.h"
#include "chom/effective.h"
#include "chom/environment.h"
#include "chom/hjb.h"
#include "chom/rng.h"

using namespace chom;

namespace {

const PointConfiguration& sample() {
  static const PointConfiguration c = condition_on_origin(4.0, BoxDomain{2, 10.0}, 7, 200);
  return c;
}

const CoefficientField& field() {
  static const CoefficientField f = CoefficientField::on_cluster(sample(), 0.25);
  return f;
}

void hjb_step(benchmark::State& state, bool parallel) {
  const Grid g(field(), 0.25, GridSpec{2, 2.0, 1.0 / 64.0});
  const auto spec = HamiltonianSpec::quadratic();
  const auto u0 = sample_on_grid(g, [](const Vec& x) { return 0.5 * x[0] - 0.3 * x[1]; });
  HjbStepper stepper(g, spec, SolverOptions{});
  stepper.prepare(u0);
  std::vector<double> u1(u0.size());
  for (auto _ : state) {
    if (parallel) stepper.step(u0, u1);
    else stepper.step_serial(u0, u1);
    benchmark::DoNotOptimize(u1.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.interior().size()));
}

void ensemble(benchmark::State& state, bool parallel) {
  EnsembleOptions o;
  o.horizons = {2.0};
  o.dt = 0.02;
  o.paths = 256;
  o.normalization = Normalization::kGenerator;
  for (auto _ : state) {
    const auto e = parallel ? simulate_ensemble(field(), Control::zero(), Vec{}, o)
                            : simulate_ensemble_serial(field(), Control::zero(), Vec{}, o);
    benchmark::DoNotOptimize(e.endpoints.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(o.paths));
}

void objective(benchmark::State& state, bool parallel) {
  const VariationalObjective obj(field(), HamiltonianSpec::quadratic(), make_vec(0.7, -0.3), CorrectorShape{4.0, 0.125});
  std::vector<double> g(obj.variable_count()), grad(obj.variable_count());
  Philox rng(3);
  for (double& v : g) v = 0.05 * rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(obj.softmax(g, 10.0, grad, parallel));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(obj.node_count()));
}

void cluster_graph(benchmark::State& state) {
  const auto c = sample_poisson(4.0, BoxDomain{2, static_cast<double>(state.range(0))}, 5);
  for (auto _ : state) {
    const ClusterGraph g(c);
    benchmark::DoNotOptimize(g.component_count());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c.size()));
}

}  // namespace

BENCHMARK_CAPTURE(hjb_step, serial, false)->Unit(benchmark::kMicrosecond);
BENCHMARK_CAPTURE(hjb_step, parallel, true)->Unit(benchmark::kMicrosecond);
BENCHMARK_CAPTURE(ensemble, serial, false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(ensemble, parallel, true)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(objective, serial, false)->Unit(benchmark::kMicrosecond);
BENCHMARK_CAPTURE(objective, parallel, true)->Unit(benchmark::kMicrosecond);
BENCHMARK(cluster_graph)->Arg(10)->Arg(20)->Arg(40)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
