#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "capsroute/errors.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

struct MarginConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
  double recon_weight = 0.392;  // 0.0005 * 784: mean-squared form of the summed-L2 weight

  void validate() const {
    if (!(0.0 < m_minus && m_minus < m_plus && m_plus < 1.0)) {
      throw ConfigError("margin config: need 0 < m_minus < m_plus < 1");
    }
    if (!(lambda > 0.0)) throw ConfigError("margin config: lambda must be > 0");
    if (!(recon_weight >= 0.0)) throw ConfigError("margin config: recon_weight must be >= 0");
  }
};

namespace detail {

template <typename T>
void require_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.rank() != 2) throw DimensionError(std::string(what) + ": expected [N, K], got " + shape_str(a.shape()));
  require_same_shape(a, b, what);
}

}  // namespace detail

/// Per-class squared hinge on capsule lengths, summed over classes and
/// averaged over the batch.
template <typename T>
double margin_loss(const Tensor<T>& lengths, const Tensor<T>& targets, const MarginConfig& cfg) {
  detail::require_pair(lengths, targets, "margin_loss");
  const std::size_t n = lengths.dim(0);
  double total = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const double len = lengths[i];
    const double t = targets[i];
    const double present = std::max(0.0, cfg.m_plus - len);
    const double absent = std::max(0.0, len - cfg.m_minus);
    total += t * present * present + cfg.lambda * (1.0 - t) * absent * absent;
  }
  return total / static_cast<double>(n);
}

template <typename T>
Tensor<T> margin_loss_grad(const Tensor<T>& lengths, const Tensor<T>& targets, const MarginConfig& cfg) {
  detail::require_pair(lengths, targets, "margin_loss_grad");
  const double inv_n = 1.0 / static_cast<double>(lengths.dim(0));
  Tensor<T> grad(lengths.shape());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const double len = lengths[i];
    const double t = targets[i];
    const double present = std::max(0.0, cfg.m_plus - len);
    const double absent = std::max(0.0, len - cfg.m_minus);
    grad[i] = static_cast<T>(inv_n * (-2.0 * t * present + 2.0 * cfg.lambda * (1.0 - t) * absent));
  }
  return grad;
}

/// Capsule selection for the reconstruction decoder.
struct MaskSelect {
  enum class Kind { by_target, by_longest };
  Kind kind = Kind::by_longest;
  std::vector<std::size_t> targets;  // one class index per sample for by_target

  static MaskSelect longest() { return {}; }
  static MaskSelect target(std::vector<std::size_t> idx) { return {Kind::by_target, std::move(idx)}; }
};

template <typename T>
struct MaskedCaps {
  Tensor<T> flat;                     // [N, n * d]
  std::vector<std::size_t> selected;  // chosen capsule per sample
};

/// Zeroes every capsule but the selected one and flattens. Length ties under
/// by_longest go to the lowest class index.
template <typename T>
MaskedCaps<T> mask_capsules(const Tensor<T>& caps, const MaskSelect& select) {
  if (caps.rank() != 3) throw DimensionError("mask_capsules: expected [N, n, d], got " + shape_str(caps.shape()));
  const std::size_t N = caps.dim(0), n = caps.dim(1), d = caps.dim(2);
  MaskedCaps<T> out{Tensor<T>({N, n * d}), std::vector<std::size_t>(N)};
  if (select.kind == MaskSelect::Kind::by_target && select.targets.size() != N) {
    throw ArgumentError("mask_capsules: need one target per sample");
  }
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t pick = 0;
    if (select.kind == MaskSelect::Kind::by_target) {
      pick = select.targets[i];
      if (pick >= n) {
        throw ArgumentError("mask_capsules: target " + std::to_string(pick) + " out of range for " +
                            std::to_string(n) + " capsules");
      }
    } else {
      double best = -1;
      for (std::size_t c = 0; c < n; ++c) {
        double sq = 0;
        for (std::size_t k = 0; k < d; ++k) sq += static_cast<double>(caps[(i * n + c) * d + k]) * caps[(i * n + c) * d + k];
        if (sq > best) {
          best = sq;
          pick = c;
        }
      }
    }
    out.selected[i] = pick;
    std::copy_n(caps.data() + (i * n + pick) * d, d, out.flat.data() + i * n * d + pick * d);
  }
  return out;
}

/// Routes the gradient of the flattened mask back onto the selected capsules.
template <typename T>
Tensor<T> mask_capsules_backward(const Shape& caps_shape, const std::vector<std::size_t>& selected,
                                 const Tensor<T>& grad_flat) {
  const std::size_t N = caps_shape[0], n = caps_shape[1], d = caps_shape[2];
  Tensor<T> dcaps(caps_shape);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t off = i * n * d + selected[i] * d;
    std::copy_n(grad_flat.data() + off, d, dcaps.data() + off);
  }
  return dcaps;
}

/// Mean over all N*P elements of the squared pixel difference.
template <typename T>
double reconstruction_loss(const Tensor<T>& decoded, const Tensor<T>& image) {
  detail::require_pair(decoded, image, "reconstruction_loss");
  double total = 0;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    const double diff = static_cast<double>(decoded[i]) - image[i];
    total += diff * diff;
  }
  return total / static_cast<double>(decoded.size());
}

template <typename T>
Tensor<T> reconstruction_loss_grad(const Tensor<T>& decoded, const Tensor<T>& image) {
  detail::require_pair(decoded, image, "reconstruction_loss_grad");
  const double scale = 2.0 / static_cast<double>(decoded.size());
  Tensor<T> grad(decoded.shape());
  for (std::size_t i = 0; i < decoded.size(); ++i) grad[i] = static_cast<T>(scale * (decoded[i] - image[i]));
  return grad;
}

struct LossBreakdown {
  double total = 0;
  double margin = 0;
  double reconstruction = 0;  // unweighted sum over reconstructions
};

/// margin + recon_weight * sum of reconstruction losses. With two masked
/// reconstructions per sample the preset halves recon_weight.
template <typename T>
LossBreakdown total_loss(const Tensor<T>& lengths, const Tensor<T>& targets, const std::vector<Tensor<T>>& decoded,
                         const std::vector<Tensor<T>>& images, const MarginConfig& cfg) {
  if (decoded.size() != images.size()) throw DimensionError("total_loss: reconstruction/target count mismatch");
  LossBreakdown out;
  out.margin = margin_loss(lengths, targets, cfg);
  for (std::size_t r = 0; r < decoded.size(); ++r) out.reconstruction += reconstruction_loss(decoded[r], images[r]);
  out.total = out.margin + cfg.recon_weight * out.reconstruction;
  return out;
}

}  // namespace capsroute
