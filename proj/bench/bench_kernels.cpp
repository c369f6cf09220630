// Serial reference loops against the im2col + BLAS + OpenMP kernels on the
// convolution shapes that dominate training. Thread count is the second
// benchmark argument.

#include <benchmark/benchmark.h>

#include <vector>

#include "mflow/kernels.hpp"
#include "mflow/rng.hpp"

using mflow::kernels::ConvGeom;

namespace {

// Representative layers at batch 4: encoder stride-2 4x4, U-Net 3x3, decoder.
const ConvGeom kShapes[] = {
    {4, 1, 128, 256, 16, 4, 2, 1},
    {4, 16, 64, 128, 32, 3, 1, 1},
    {4, 64, 16, 32, 64, 3, 1, 1},
};

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  mflow::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

struct Buffers {
  std::vector<float> x, w, b, y, dy, dx, dw, db;
  explicit Buffers(const ConvGeom& g)
      : x(noise(g.in_size(), 1)), w(noise(g.weight_size(), 2)), b(noise(static_cast<std::size_t>(g.cout), 3)),
        y(g.out_size()), dy(noise(g.out_size(), 4)), dx(g.in_size()), dw(g.weight_size()),
        db(static_cast<std::size_t>(g.cout)) {}
};

void set_label(benchmark::State& state, const ConvGeom& g) {
  state.SetLabel(std::to_string(g.cin) + "->" + std::to_string(g.cout) + " k" + std::to_string(g.k) + " s" +
                 std::to_string(g.stride) + " " + std::to_string(g.h) + "x" + std::to_string(g.w));
  const double flops = 2.0 * g.n * g.cout * g.oh() * g.ow() * g.cin * g.k * g.k;
  state.counters["GFLOP/s"] = benchmark::Counter(flops * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

void BM_forward_reference(benchmark::State& state) {
  const ConvGeom& g = kShapes[state.range(0)];
  Buffers buf(g);
  for (auto _ : state) {
    mflow::kernels::reference::conv2d_forward(g, buf.x.data(), buf.w.data(), buf.b.data(), buf.y.data());
    benchmark::DoNotOptimize(buf.y.data());
  }
  set_label(state, g);
}

void BM_forward_parallel(benchmark::State& state) {
  const ConvGeom& g = kShapes[state.range(0)];
  mflow::kernels::set_worker_count(static_cast<int>(state.range(1)));
  Buffers buf(g);
  for (auto _ : state) {
    mflow::kernels::conv2d_forward(g, buf.x.data(), buf.w.data(), buf.b.data(), buf.y.data());
    benchmark::DoNotOptimize(buf.y.data());
  }
  set_label(state, g);
}

void BM_backward_reference(benchmark::State& state) {
  const ConvGeom& g = kShapes[state.range(0)];
  Buffers buf(g);
  for (auto _ : state) {
    mflow::kernels::reference::conv2d_backward_input(g, buf.dy.data(), buf.w.data(), buf.dx.data());
    mflow::kernels::reference::conv2d_backward_weight(g, buf.x.data(), buf.dy.data(), buf.dw.data(), buf.db.data());
    benchmark::DoNotOptimize(buf.dw.data());
  }
  set_label(state, g);
}

void BM_backward_parallel(benchmark::State& state) {
  const ConvGeom& g = kShapes[state.range(0)];
  mflow::kernels::set_worker_count(static_cast<int>(state.range(1)));
  Buffers buf(g);
  for (auto _ : state) {
    mflow::kernels::conv2d_backward_input(g, buf.dy.data(), buf.w.data(), buf.dx.data());
    mflow::kernels::conv2d_backward_weight(g, buf.x.data(), buf.dy.data(), buf.dw.data(), buf.db.data());
    benchmark::DoNotOptimize(buf.dw.data());
  }
  set_label(state, g);
}

}  // namespace

BENCHMARK(BM_forward_reference)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_forward_parallel)->ArgsProduct({{0, 1, 2}, {1, 2, 4}})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_backward_reference)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_backward_parallel)->ArgsProduct({{0, 1, 2}, {1, 2, 4}})->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
