// Microbenchmarks for the hot paths: quantization, step-size search, the
// dense kernels at LeNet-5 shapes, the full training step, and quantized
// inference. Run with --benchmark_filter=... to narrow.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <random>
#include <vector>

#include "sgm/export.hpp"
#include "sgm/fixed_point.hpp"
#include "sgm/nn.hpp"
#include "sgm/regularizer.hpp"
#include "sgm/trainer.hpp"

using namespace sgm;

namespace {

Tensor gaussian_tensor(std::vector<std::size_t> shape, double sigma, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma);
  for (double& x : t.v) x = dist(rng);
  return t;
}

// A batch of synthetic MNIST-shaped images in [0, 1).
Tensor fake_images(std::size_t batch, std::uint64_t seed) {
  Tensor t({batch, 1, 28, 28});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (double& x : t.v) x = dist(rng);
  return t;
}

std::vector<int> fake_labels(std::size_t batch, std::uint64_t seed) {
  std::vector<int> labels(batch);
  std::mt19937_64 rng(seed);
  for (int& l : labels) l = static_cast<int>(rng() % 10);
  return labels;
}

// LeNet-5 with weights snapped to a ternary grid, ready for export paths.
QuantizedModel quantized_lenet() {
  Network net = make_lenet5(99, -0.13);
  std::vector<LayerQuantState> states = search_layer_specs(net, 2, -8, 8);
  hard_quantize(net, states);
  narrow_biases(net);
  return quantize_model(net, states);
}

}  // namespace

static void BM_QuantizeTensor(benchmark::State& state) {
  const Tensor w = gaussian_tensor({static_cast<std::size_t>(state.range(0))}, 0.05, 1);
  const QuantizerSpec spec{2, 4};
  for (auto _ : state) {
    benchmark::DoNotOptimize(quantize_tensor(w, spec));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_QuantizeTensor)->Arg(500)->Arg(25000)->Arg(400000);

static void BM_StepSearch(benchmark::State& state) {
  const Tensor w = gaussian_tensor({static_cast<std::size_t>(state.range(0))}, 0.05, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(search_step_exponent(w, 2, -8, 8));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_StepSearch)->Arg(500)->Arg(25000)->Arg(400000);

// Shapes of the two LeNet conv layers at batch 64, selected by range(0).
struct ConvCase {
  Tensor x, k, b;
};
ConvCase conv_case(int which) {
  if (which == 1) {
    return {gaussian_tensor({64, 1, 28, 28}, 1.0, 3), gaussian_tensor({20, 1, 5, 5}, 0.1, 4),
            gaussian_tensor({20}, 0.1, 5)};
  }
  return {gaussian_tensor({64, 20, 12, 12}, 1.0, 3), gaussian_tensor({50, 20, 5, 5}, 0.1, 4),
          gaussian_tensor({50}, 0.1, 5)};
}

static void BM_Conv2dForward(benchmark::State& state) {
  const ConvCase c = conv_case(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        conv2d_forward(c.x, c.k, c.b, 1, 0, 1.0, static_cast<Tensor*>(nullptr)));
  }
}
BENCHMARK(BM_Conv2dForward)->Arg(1)->Arg(2);

static void BM_LinearForward(benchmark::State& state) {
  // LeNet fc1 at batch 64: 800 -> 500.
  const Tensor x = gaussian_tensor({64, 800}, 1.0, 6);
  const Tensor w = gaussian_tensor({500, 800}, 0.05, 7);
  const Tensor b = gaussian_tensor({500}, 0.05, 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(linear_forward(x, w, b, 1.0));
  }
}
BENCHMARK(BM_LinearForward);

static void BM_Conv2dBackward(benchmark::State& state) {
  const ConvCase c = conv_case(static_cast<int>(state.range(0)));
  Tensor cols;
  const Tensor y = conv2d_forward(c.x, c.k, c.b, 1, 0, 1.0, &cols);
  const Tensor dy = gaussian_tensor(y.shape, 1.0, 13);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d_backward(c.x, c.k, dy, 1, 0, &cols));
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(1)->Arg(2);

static void BM_LeNetForwardTraced(benchmark::State& state) {
  const Network net = make_lenet5(42, -0.13);
  const Tensor images = fake_images(64, 9);
  ForwardTrace trace;
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward(net, images, &trace));
  }
}
BENCHMARK(BM_LeNetForwardTraced);

static void BM_LeNetBackward(benchmark::State& state) {
  const Network net = make_lenet5(42, -0.13);
  const Tensor images = fake_images(64, 9);
  const std::vector<int> labels = fake_labels(64, 11);
  ForwardTrace trace;
  forward(net, images, &trace);
  const SoftmaxCEResult<double> ce = softmax_cross_entropy(trace.logits, labels);
  for (auto _ : state) {
    benchmark::DoNotOptimize(backward(net, trace, ce.grad_logits));
  }
}
BENCHMARK(BM_LeNetBackward);

static void BM_LinearBackward(benchmark::State& state) {
  const Tensor x = gaussian_tensor({64, 800}, 1.0, 6);
  const Tensor w = gaussian_tensor({500, 800}, 0.05, 7);
  const Tensor dy = gaussian_tensor({64, 500}, 1.0, 14);
  for (auto _ : state) {
    benchmark::DoNotOptimize(linear_backward(x, w, dy));
  }
}
BENCHMARK(BM_LinearBackward);

static void BM_RegGrad(benchmark::State& state) {
  const Network net = make_lenet5(42, -0.13);
  const std::vector<LayerQuantState> states = search_layer_specs(net, 2, -8, 8);
  const std::vector<Tensor> weights = net.trainable_weight_copies();
  for (auto _ : state) {
    benchmark::DoNotOptimize(reg_grad(weights, states, 500.0));
  }
}
BENCHMARK(BM_RegGrad);

static void BM_LeNetForward(benchmark::State& state) {
  const Network net = make_lenet5(42, -0.13);
  const Tensor images = fake_images(64, 9);
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward(net, images));
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_LeNetForward);

static void BM_TrainingStep(benchmark::State& state) {
  // Forward + backward + SGD update on one batch, regularizer included --
  // the per-batch cost that dominates a training run.
  Network net = make_lenet5(42, -0.13);
  const std::vector<LayerQuantState> states = search_layer_specs(net, 2, -8, 8);
  const Tensor images = fake_images(64, 10);
  const std::vector<int> labels = fake_labels(64, 11);
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].trainable()) positions.push_back(i);
  }
  ForwardTrace trace;
  ParamGrads reg;
  reg.dweight.resize(net.layers.size());
  reg.dbias.resize(net.layers.size());
  for (auto _ : state) {
    BatchResult r = batch_loss_and_grads(net, images, labels, &trace);
    const std::vector<Tensor> weights = net.trainable_weight_copies();
    std::vector<Tensor> rg = reg_grad(weights, states, 500.0);
    for (std::size_t t = 0; t < positions.size(); ++t) {
      reg.dweight[positions[t]] = std::move(rg[t]);
    }
    sgd_step(net, r.grads, &reg, 0.005);
    benchmark::DoNotOptimize(net.layers.back().weight.v.data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_TrainingStep);

static void BM_IntegerForward(benchmark::State& state) {
  const QuantizedModel model = quantized_lenet();
  const Tensor images = fake_images(64, 12);
  for (auto _ : state) {
    benchmark::DoNotOptimize(integer_forward(model, images));
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_IntegerForward);

static void BM_SgmqRoundTrip(benchmark::State& state) {
  const QuantizedModel model = quantized_lenet();
  for (auto _ : state) {
    benchmark::DoNotOptimize(parse_sgmq(sgmq_bytes(model)));
  }
}
BENCHMARK(BM_SgmqRoundTrip);

BENCHMARK_MAIN();
