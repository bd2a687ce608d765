#pragma once

// Registry of finite-difference checks covering every differentiable op and
// the end-to-end training objective.

#include <algorithm>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "capsroute/caps.hpp"
#include "capsroute/gradcheck.hpp"
#include "capsroute/model.hpp"
#include "capsroute/objective.hpp"
#include "capsroute/ops.hpp"

namespace capsroute {

struct SuiteOptions {
  FdOptions fd;
  /// Test fixture: scale the analytic gradient of this case by 1.1.
  std::string corrupt;
  /// Batch size for the end-to-end model check.
  std::size_t model_batch = 2;
  /// Model check step.
  double model_step = 1e-6;
};

struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport(const SuiteOptions&)> run;
};

namespace detail {

using Fwd = std::function<Tensor<double>(const TensorList&)>;
using Bwd = std::function<TensorList(const TensorList&, const Tensor<double>&)>;

inline GradCheckCase op_case(std::string name, std::function<TensorList(std::mt19937_64&)> make_inputs, Fwd fwd, Bwd bwd,
                             std::vector<bool> mask = {}) {
  return {name, [=](const SuiteOptions& so) {
            std::mt19937_64 rng(so.fd.seed + std::hash<std::string>{}(name));
            const TensorList inputs = make_inputs(rng);
            Bwd b = bwd;
            if (so.corrupt == name) {
              b = [bwd](const TensorList& x, const Tensor<double>& w) {
                auto g = bwd(x, w);
                for (auto& v : g.front().values()) v *= 1.1;
                return g;
              };
            }
            return check_tensor_op(name, fwd, b, inputs, so.fd, mask);
          }};
}

/// Uniform values whose magnitude is at least `gap`, so kinks at zero are
/// never straddled by a finite-difference step.
inline Tensor<double> away_from_zero(Shape shape, std::mt19937_64& rng, double gap) {
  std::uniform_real_distribution<double> mag(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

}  // namespace detail

/// End-to-end objective at a random parameter point: parameter tensors,
/// their analytic gradients, which ones to probe, and an oracle objective.
struct ModelCheckFixture {
  std::vector<std::string> names;
  TensorList inputs;
  TensorList grads;
  std::vector<bool> probe;
  PiecewiseObjective objective;
};

inline ModelCheckFixture make_model_check(const ModelSpec& spec, std::uint64_t seed, std::size_t n) {
  auto params = init_params<double>(spec, seed + 11);
  std::mt19937_64 rng(seed + 12);
  // non-zero priors and affine terms so every parameter path is exercised
  for (auto& p : params.params) {
    if (p.name.find(".B") != std::string::npos || p.name.find(".beta") != std::string::npos ||
        p.name.find(".bias") != std::string::npos) {
      p.value = random_normal<double>(p.value.shape(), rng, 0.05);
    }
  }
  const auto images = random_uniform<double>({n, spec.height, spec.width, spec.channels}, rng, 0.0, 1.0);
  const std::size_t classes = spec.classes();
  Tensor<double> targets({n, classes});
  std::vector<std::size_t> cls(n);
  for (std::size_t i = 0; i < n; ++i) {
    cls[i] = (3 * i + 1) % classes;
    targets[i * classes + cls[i]] = 1.0;
  }
  const std::vector<Tensor<double>> recon{images.reshaped({n, spec.pixels()})};
  const std::vector<MaskSelect> masks{MaskSelect::target(cls)};

  ModelCheckFixture fx;
  for (const auto& p : params.params) {
    fx.names.push_back(p.name);
    fx.inputs.push_back(p.value);
    // a bias feeding a normalization layer cancels out exactly
    bool probe = true;
    for (std::size_t i = 0; i < spec.conv.size(); ++i) {
      if (spec.conv[i].norm && p.name == "conv" + std::to_string(i + 1) + ".bias") probe = false;
    }
    fx.probe.push_back(probe);
  }
  fx.grads = loss_and_grads(spec, params, images, targets, recon, masks, true).grads;

  // The oracle runs the forward pass in long double and recomputes the loss
  // there: many gradients are ~1e-8, below what differences of a double loss
  // of order one can resolve.
  using LD = long double;
  auto base = std::make_shared<const ModelParams<LD>>(params.cast<LD>());
  auto images_ld = std::make_shared<const Tensor<LD>>(images.cast<LD>());
  fx.objective = [spec, base, images_ld, targets, recon, masks, n](const TensorList& x) {
    auto q = *base;
    for (std::size_t i = 0; i < x.size(); ++i) q.params[i].value = x[i].cast<LD>();
    ForwardOptions opt;
    opt.training = true;
    opt.masks = masks;
    ForwardCache<LD> cache;
    const auto res = forward(spec, q, *images_ld, opt, &cache);
    PiecewiseValue out;
    for (const auto& act : cache.conv_outputs) {
      for (std::size_t i = 0; i < act.size(); ++i) out.pattern.push_back(act[i] > 0);
    }
    for (const auto& acts : cache.decoder_acts) {
      // inputs of every layer after the first are ReLU outputs
      for (std::size_t k = 1; k + 1 < acts.size(); ++k) {
        for (std::size_t i = 0; i < acts[k].size(); ++i) out.pattern.push_back(acts[k][i] > 0);
      }
    }
    const MarginConfig& cfg = spec.loss;
    LD margin = 0;
    for (std::size_t i = 0; i < res.lengths.size(); ++i) {
      const LD len = res.lengths[i], t = targets[i];
      out.pattern.push_back(len < LD(cfg.m_plus));
      out.pattern.push_back(len > LD(cfg.m_minus));
      const LD present = std::max(LD(0), LD(cfg.m_plus) - len);
      const LD absent = std::max(LD(0), len - LD(cfg.m_minus));
      margin += t * present * present + LD(cfg.lambda) * (1 - t) * absent * absent;
    }
    LD recon_sum = 0;
    for (std::size_t r = 0; r < recon.size(); ++r) {
      const auto& dec = res.reconstructions[r];
      LD acc = 0;
      for (std::size_t i = 0; i < dec.size(); ++i) {
        const LD diff = dec[i] - LD(recon[r][i]);
        acc += diff * diff;
      }
      recon_sum += acc / LD(dec.size());
    }
    out.value = margin / LD(n) + LD(cfg.recon_weight) * recon_sum;
    return out;
  };
  return fx;
}

inline GradCheckReport check_model_total_loss(const ModelSpec& spec, const SuiteOptions& so,
                                              const std::string& name = "model_total_loss") {
  auto fx = make_model_check(spec, so.fd.seed, so.model_batch);
  if (so.corrupt == name) {
    for (auto& v : fx.grads.front().values()) v *= 1.1;
  }
  FdOptions fd = so.fd;
  fd.step = so.model_step;
  return finite_difference_check(name, fx.objective, fx.grads, fx.inputs, fd, fx.probe);
}

/// All registered checks, each listed exactly once.
inline std::vector<GradCheckCase> gradcheck_suite() {
  using detail::op_case;
  using TL = TensorList;
  std::vector<GradCheckCase> cases;

  cases.push_back(op_case(
      "conv2d",
      [](auto& r) { return TL{random_normal<double>({2, 5, 5, 3}, r), random_normal<double>({3, 3, 3, 4}, r), random_normal<double>({4}, r)}; },
      [](const TL& x) { return ops::conv2d(x[0], x[1], x[2], 1); },
      [](const TL& x, const Tensor<double>& w) {
        auto g = ops::conv2d_backward(x[0], x[1], w, 1);
        return TL{g.input, g.kernel, g.bias};
      }));
  cases.push_back(op_case(
      "conv2d_stride2",
      [](auto& r) { return TL{random_normal<double>({2, 8, 7, 2}, r), random_normal<double>({3, 3, 2, 3}, r), random_normal<double>({3}, r)}; },
      [](const TL& x) { return ops::conv2d(x[0], x[1], x[2], 2); },
      [](const TL& x, const Tensor<double>& w) {
        auto g = ops::conv2d_backward(x[0], x[1], w, 2);
        return TL{g.input, g.kernel, g.bias};
      }));
  cases.push_back(op_case(
      "depthwise_conv2d",
      [](auto& r) { return TL{random_normal<double>({2, 6, 6, 3}, r), random_normal<double>({3, 3, 3}, r), random_normal<double>({3}, r)}; },
      [](const TL& x) { return ops::depthwise_conv2d(x[0], x[1], x[2], 2); },
      [](const TL& x, const Tensor<double>& w) {
        auto g = ops::depthwise_conv2d_backward(x[0], x[1], w, 2);
        return TL{g.input, g.kernel, g.bias};
      }));
  for (auto mode : {ops::NormMode::batch, ops::NormMode::instance}) {
    const std::string name = mode == ops::NormMode::batch ? "normalize_batch" : "normalize_instance";
    cases.push_back(op_case(
        name,
        [](auto& r) { return TL{random_normal<double>({3, 4, 4, 2}, r, 2.0, 0.5), random_normal<double>({2}, r, 0.5, 1.0), random_normal<double>({2}, r)}; },
        [mode](const TL& x) {
          ops::RunningStats<double> rs{Tensor<double>({2}), Tensor<double>({2}, 1.0)};
          return ops::normalize(x[0], x[1], x[2], mode, &rs, true);
        },
        [mode](const TL& x, const Tensor<double>& w) {
          ops::RunningStats<double> rs{Tensor<double>({2}), Tensor<double>({2}, 1.0)};
          ops::NormCache<double> cache;
          ops::normalize(x[0], x[1], x[2], mode, &rs, true, &cache);
          auto g = ops::normalize_backward(cache, x[1], mode, w);
          return TL{g.input, g.gamma, g.beta};
        }));
  }
  cases.push_back(op_case(
      "matmul_batched",
      [](auto& r) { return TL{random_normal<double>({2, 3, 4, 5}, r), random_normal<double>({3, 5, 2}, r)}; },
      [](const TL& x) { return ops::matmul_batched(x[0], x[1]); },
      [](const TL& x, const Tensor<double>& w) {
        auto g = ops::matmul_batched_backward(x[0], x[1], w);
        return TL{g.a, g.b};
      }));
  cases.push_back(op_case(
      "softmax",
      [](auto& r) { return TL{random_normal<double>({3, 4, 5}, r, 2.0)}; },
      [](const TL& x) { return ops::softmax(x[0], 1); },
      [](const TL& x, const Tensor<double>& w) { return TL{ops::softmax_backward(ops::softmax(x[0], 1), w, 1)}; }));
  const std::vector<std::pair<std::string, ops::Unary>> unary{
      {"relu", ops::Unary::relu}, {"exp", ops::Unary::exp}, {"scale", ops::Unary::scale}, {"add", ops::Unary::add}};
  for (const auto& [name, op] : unary) {
    cases.push_back(op_case(
        name, [](auto& r) { return TL{detail::away_from_zero({4, 6}, r, 1e-3)}; },
        [op](const TL& x) { return ops::elementwise(x[0], op, 2.0); },
        [op](const TL& x, const Tensor<double>& w) {
          return TL{ops::elementwise_backward(x[0], ops::elementwise(x[0], op, 2.0), w, op, 2.0)};
        }));
  }
  cases.push_back(op_case(
      "sigmoid", [](auto& r) { return TL{random_normal<double>({4, 6}, r, 2.0)}; },
      [](const TL& x) { return ops::sigmoid(x[0]); },
      [](const TL& x, const Tensor<double>& w) { return TL{ops::sigmoid_backward(ops::sigmoid(x[0]), w)}; }));
  cases.push_back(op_case(
      "linear",
      [](auto& r) { return TL{random_normal<double>({3, 5}, r), random_normal<double>({5, 4}, r), random_normal<double>({4}, r)}; },
      [](const TL& x) { return ops::linear(x[0], x[1], x[2]); },
      [](const TL& x, const Tensor<double>& w) {
        auto g = ops::linear_backward(x[0], x[1], w);
        return TL{g.input, g.weight, g.bias};
      }));
  cases.push_back(op_case(
      "squash", [](auto& r) { return TL{random_normal<double>({3, 4, 5}, r)}; },
      [](const TL& x) { return caps::squash(x[0]); },
      [](const TL& x, const Tensor<double>& w) { return TL{caps::squash_backward(x[0], w)}; }));
  cases.push_back(op_case(
      "lengths", [](auto& r) { return TL{random_normal<double>({3, 4, 5}, r)}; },
      [](const TL& x) { return caps::lengths(x[0]); },
      [](const TL& x, const Tensor<double>& w) { return TL{caps::lengths_backward(x[0], caps::lengths(x[0]), w)}; }));
  cases.push_back(op_case(
      "primary_caps",
      [](auto& r) { return TL{random_normal<double>({2, 3, 3, 6}, r), random_normal<double>({3, 3, 6}, r), random_normal<double>({6}, r)}; },
      [](const TL& x) { return caps::primary_caps(x[0], x[1], x[2], 3, 2).caps; },
      [](const TL& x, const Tensor<double>& w) {
        auto out = caps::primary_caps(x[0], x[1], x[2], 3, 2);
        auto ds = caps::squash_backward(out.pre_squash, w);
        auto g = ops::depthwise_conv2d_backward(x[0], x[1], caps::caps_to_channels(ds), 1);
        return TL{g.input, g.kernel, g.bias};
      }));
  cases.push_back(op_case(
      "predict",
      [](auto& r) { return TL{random_normal<double>({2, 3, 4}, r), random_normal<double>({3, 5, 4, 6}, r)}; },
      [](const TL& x) { return caps::predict(x[0], x[1]); },
      [](const TL& x, const Tensor<double>& w) {
        auto g = caps::predict_backward(x[0], x[1], w);
        return TL{g.u, g.W};
      }));
  cases.push_back(op_case(
      "attention_scores", [](auto& r) { return TL{random_normal<double>({2, 3, 4, 5}, r)}; },
      [](const TL& x) { return caps::attention_scores(x[0], 4); },
      [](const TL& x, const Tensor<double>& w) { return TL{caps::attention_scores_backward(x[0], 4, w)}; }));
  cases.push_back(op_case(
      "coupling", [](auto& r) { return TL{random_normal<double>({2, 3, 3, 4}, r)}; },
      [](const TL& x) { return caps::coupling(x[0]); },
      [](const TL& x, const Tensor<double>& w) { return TL{caps::coupling_backward(caps::coupling(x[0]), w)}; }));
  cases.push_back(op_case(
      "caps_dense",
      [](auto& r) {
        return TL{caps::squash(random_normal<double>({2, 4, 3}, r)), random_normal<double>({4, 5, 3, 6}, r, 0.7),
                  random_normal<double>({4, 5}, r, 0.3)};
      },
      [](const TL& x) { return caps::caps_dense_forward(x[0], caps::CapsDenseParams<double>{x[1], x[2]}).caps; },
      [](const TL& x, const Tensor<double>& w) {
        const caps::CapsDenseParams<double> p{x[1], x[2]};
        const auto out = caps::caps_dense_forward(x[0], p);
        auto g = caps::caps_dense_backward(x[0], p, out, w);
        return TL{g.u, g.W, g.B};
      }));
  cases.push_back({"margin_loss", [](const SuiteOptions& so) {
                     std::mt19937_64 rng(so.fd.seed + 5);
                     // lengths at least 1e-3 away from both hinge points
                     std::vector<double> grid{0.02, 0.05, 0.3, 0.5, 0.7, 0.95, 0.2, 0.12, 0.85, 0.6};
                     Tensor<double> len({2, 10}), tgt({2, 10});
                     for (std::size_t i = 0; i < 20; ++i) len[i] = grid[(i * 7 + 3) % 10];
                     tgt[1] = 1;
                     tgt[10 + 4] = 1;
                     const MarginConfig cfg;
                     auto obj = [&](const TensorList& x) { return margin_loss(x[0], tgt, cfg); };
                     TensorList g{margin_loss_grad(len, tgt, cfg)};
                     if (so.corrupt == "margin_loss") {
                       for (auto& v : g[0].values()) v *= 1.1;
                     }
                     return finite_difference_check("margin_loss", obj, g, {len}, so.fd);
                   }});
  cases.push_back({"reconstruction_loss", [](const SuiteOptions& so) {
                     std::mt19937_64 rng(so.fd.seed + 6);
                     const auto dec = random_uniform<double>({2, 16}, rng, 0.0, 1.0);
                     const auto img = random_uniform<double>({2, 16}, rng, 0.0, 1.0);
                     auto obj = [&](const TensorList& x) { return reconstruction_loss(x[0], img); };
                     TensorList g{reconstruction_loss_grad(dec, img)};
                     if (so.corrupt == "reconstruction_loss") {
                       for (auto& v : g[0].values()) v *= 1.1;
                     }
                     return finite_difference_check("reconstruction_loss", obj, g, {dec}, so.fd);
                   }});
  cases.push_back({"model_total_loss", [](const SuiteOptions& so) {
                     return check_model_total_loss(build_mnist_spec(), so);
                   }});
  return cases;
}

}  // namespace capsroute
