// Measures training throughput of the MNIST preset on synthetic inputs.
#include <chrono>
#include <iostream>
#include <random>

#include "capsroute/model.hpp"
#include "capsroute/trainer.hpp"

int main(int argc, char** argv) {
  using namespace capsroute;
  const std::size_t steps = argc > 1 ? std::stoul(argv[1]) : 20;
  const std::size_t batch = argc > 2 ? std::stoul(argv[2]) : 16;
  const ModelSpec spec = build_mnist_spec();
  auto params = init_params<float>(spec, 1);
  auto opt = OptimizerState<float>::zeros_for(params);
  std::mt19937_64 rng(3);
  const auto images = random_uniform<float>({batch, 28, 28, 1}, rng, 0.0, 1.0);
  Tensor<float> targets({batch, 10});
  std::vector<std::size_t> cls(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    cls[i] = i % 10;
    targets[i * 10 + cls[i]] = 1;
  }
  const std::vector<Tensor<float>> recon{images.reshaped({batch, 784})};
  const auto t0 = std::chrono::steady_clock::now();
  double loss = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    auto lg = loss_and_grads(spec, params, images, targets, recon, {MaskSelect::target(cls)}, true);
    adam_step(params, lg.grads, opt, 5e-4);
    loss = lg.loss.total;
  }
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "steps " << steps << " batch " << batch << " loss " << loss << " : " << sec / steps * 1e3
            << " ms/step, " << sec / (steps * batch) * 1e3 << " ms/sample, epoch(60k) ~ "
            << sec / (steps * batch) * 60000 / 60 << " min\n";
}
