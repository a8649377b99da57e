#include <benchmark/benchmark.h>

#include "dtn/backbone.hpp"
#include "dtn/geometry.hpp"
#include "dtn/model.hpp"
#include "dtn/ops.hpp"
#include "dtn/random.hpp"

using namespace dtn;

namespace {

TensorF random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return TensorF::from_vector(std::move(shape), std::move(v), requires_grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

// Forward + backward of the encoder-sized product used by attention.
void BM_MatmulBackward(benchmark::State& state) {
  Rng rng(2);
  auto a = random_tensor({122, 64}, rng, true), b = random_tensor({64, 192}, rng, true);
  for (auto _ : state) {
    auto loss = sum(matmul(a, b));
    loss.backward();
    a.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_MatmulBackward);

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const auto x = random_tensor({11, 11, c}, rng), w = random_tensor({3, 3, c, c}, rng),
             b = random_tensor({c}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(64);

void BM_Encoder(benchmark::State& state) {
  PatchConfig patch;
  EncoderConfig enc;
  enc.depth = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  const auto weights = init_backbone<float>(patch, enc, 0, rng);
  const auto tokens = TokenSequence<float>{random_tensor({patch.num_patches() + 1, enc.embed_dim}, rng)};
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(encoder_forward(tokens, enc, std::span(weights.layers)));
}
BENCHMARK(BM_Encoder)->Arg(1)->Arg(4);

void BM_Nms(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  std::vector<BBox> boxes;
  std::vector<double> scores;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
    boxes.push_back({x, y, x + rng.uniform(4, 30), y + rng.uniform(4, 30)});
    scores.push_back(rng.uniform());
  }
  for (auto _ : state) benchmark::DoNotOptimize(nms(boxes, scores, 0.7));
}
BENCHMARK(BM_Nms)->Arg(100)->Arg(300)->Arg(1000);

void BM_ForwardDesk(benchmark::State& state) {
  ModelConfig cfg;
  const auto model = DetTransNet<float>::create(cfg, 42);
  Rng rng(6);
  const auto image = random_tensor({cfg.patch.height, cfg.patch.width, cfg.patch.channels}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(run_inference(model, image));
}
BENCHMARK(BM_ForwardDesk)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
