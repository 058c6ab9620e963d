// Serial reference kernels against the OpenMP ones.
#include <chprune/kernels.hpp>

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

using chprune::kernels::Conv2dGeometry;

namespace {

Conv2dGeometry geometry(int64_t channels, int64_t size) {
  Conv2dGeometry g;
  g.batch = 8;
  g.in_channels = channels;
  g.out_channels = channels;
  g.in_h = g.in_w = size;
  g.kernel_h = g.kernel_w = 3;
  g.padding = 1;
  g.out_h = g.out_w = size;
  return g;
}

struct Buffers {
  std::vector<float> in, weight, bias, out;
  explicit Buffers(const Conv2dGeometry& g) {
    std::mt19937 rng(1);
    std::normal_distribution<float> d;
    in.resize(static_cast<size_t>(g.batch * g.in_channels * g.in_h * g.in_w));
    weight.resize(static_cast<size_t>(g.out_channels * g.in_channels * g.kernel_h * g.kernel_w));
    bias.resize(static_cast<size_t>(g.out_channels));
    out.resize(static_cast<size_t>(g.batch * g.out_channels * g.out_h * g.out_w));
    for (auto* v : {&in, &weight, &bias})
      for (auto& x : *v) x = d(rng);
  }
};

void conv_reference(benchmark::State& state) {
  auto g = geometry(state.range(0), state.range(1));
  Buffers b(g);
  for (auto _ : state) {
    chprune::reference::conv2d_forward(g, b.in.data(), b.weight.data(), b.bias.data(), b.out.data());
    benchmark::DoNotOptimize(b.out.data());
  }
}

void conv_openmp(benchmark::State& state) {
  auto g = geometry(state.range(0), state.range(1));
  Buffers b(g);
  for (auto _ : state) {
    chprune::kernels::conv2d_forward(g, b.in.data(), b.weight.data(), b.bias.data(), b.out.data());
    benchmark::DoNotOptimize(b.out.data());
  }
}

void conv_backward_input_openmp(benchmark::State& state) {
  auto g = geometry(state.range(0), state.range(1));
  Buffers b(g);
  std::vector<float> grad_in(b.in.size());
  for (auto _ : state) {
    chprune::kernels::conv2d_backward_input(g, b.out.data(), b.weight.data(), grad_in.data());
    benchmark::DoNotOptimize(grad_in.data());
  }
}

void conv_backward_input_reference(benchmark::State& state) {
  auto g = geometry(state.range(0), state.range(1));
  Buffers b(g);
  std::vector<float> grad_in(b.in.size());
  for (auto _ : state) {
    chprune::reference::conv2d_backward_input(g, b.out.data(), b.weight.data(), grad_in.data());
    benchmark::DoNotOptimize(grad_in.data());
  }
}

}  // namespace

BENCHMARK(conv_reference)->Args({16, 16})->Args({32, 32});
BENCHMARK(conv_openmp)->Args({16, 16})->Args({32, 32});
BENCHMARK(conv_backward_input_reference)->Args({16, 16})->Args({32, 32});
BENCHMARK(conv_backward_input_openmp)->Args({16, 16})->Args({32, 32});

BENCHMARK_MAIN();
