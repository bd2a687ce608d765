#pragma once

// Differentiable tensor primitives. Every forward function has a matching
// *_backward that maps the gradient of a scalar objective w.r.t. the output
// onto gradients w.r.t. each differentiable input.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "capsroute/errors.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute::ops {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride) {
  return (in - k) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, h, w, cin, k, cout, stride, ho, wo;
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                           bool depthwise, const char* op) {
  if (input.rank() != 4) {
    throw DimensionError(std::string(op) + ": input must be [N,H,W,C], got " + shape_str(input.shape()));
  }
  if (stride == 0) throw DimensionError(std::string(op) + ": stride must be >= 1");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.cin = input.dim(3);
  g.stride = stride;
  if (depthwise) {
    if (kernel.rank() != 3 || kernel.dim(0) != kernel.dim(1)) {
      throw DimensionError(std::string(op) + ": kernel must be [k,k,C], got " + shape_str(kernel.shape()));
    }
    if (kernel.dim(2) != g.cin) {
      throw DimensionError(std::string(op) + ": kernel has " + std::to_string(kernel.dim(2)) +
                           " channels, input has " + std::to_string(g.cin));
    }
    g.cout = g.cin;
  } else {
    if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1)) {
      throw DimensionError(std::string(op) + ": kernel must be [k,k,Cin,Cout], got " +
                           shape_str(kernel.shape()));
    }
    if (kernel.dim(2) != g.cin) {
      throw DimensionError(std::string(op) + ": kernel Cin " + std::to_string(kernel.dim(2)) +
                           " vs input C " + std::to_string(g.cin));
    }
    g.cout = kernel.dim(3);
  }
  g.k = kernel.dim(0);
  if (g.k > g.h || g.k > g.w) {
    throw DimensionError(std::string(op) + ": kernel " + std::to_string(g.k) + " larger than input " +
                         std::to_string(g.h) + "x" + std::to_string(g.w));
  }
  g.ho = conv_out_extent(g.h, g.k, stride);
  g.wo = conv_out_extent(g.w, g.k, stride);
  return g;
}

// Each output position becomes one row of k*k*Cin values ordered (kh, kw, c),
// matching the row-major flattening of a [k,k,Cin,Cout] kernel.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* cols) {
  const std::size_t row_len = g.k * g.cin;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          const T* src = in + ((n * g.h + oy * g.stride + kh) * g.w + ox * g.stride) * g.cin;
          std::memcpy(cols, src, row_len * sizeof(T));
          cols += row_len;
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* in) {
  const std::size_t row_len = g.k * g.cin;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          T* dst = in + ((n * g.h + oy * g.stride + kh) * g.w + ox * g.stride) * g.cin;
          for (std::size_t i = 0; i < row_len; ++i) dst[i] += cols[i];
          cols += row_len;
        }
      }
    }
  }
}

// Sums the rows of a row-major [rows, cols] block in row order. Unlike an
// Eigen colwise reduction the rounding does not depend on buffer alignment.
template <typename T>
void column_sums(const T* m, std::size_t rows, std::size_t cols, T* out) {
  std::fill(out, out + cols, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = m + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c];
  }
}

template <typename T>
void require_bias(const Tensor<T>& bias, std::size_t c, const char* op) {
  if (bias.rank() != 1 || bias.dim(0) != c) {
    throw DimensionError(std::string(op) + ": bias must be [" + std::to_string(c) + "], got " +
                         shape_str(bias.shape()));
  }
}

}  // namespace detail

/// Valid-padding 2-D convolution, NHWC input and [k,k,Cin,Cout] kernel.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride) {
  const auto g = detail::conv_geometry(input, kernel, stride, false, "conv2d");
  detail::require_bias(bias, g.cout, "conv2d");
  const std::size_t rows = g.n * g.ho * g.wo;
  const std::size_t depth = g.k * g.k * g.cin;
  std::vector<T> cols(rows * depth);
  detail::im2col(input.data(), g, cols.data());
  Tensor<T> out({g.n, g.ho, g.wo, g.cout});
  MatMap<T> y(out.data(), rows, g.cout);
  y.noalias() = ConstMatMap<T>(cols.data(), rows, depth) * ConstMatMap<T>(kernel.data(), depth, g.cout);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), g.cout);
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  Tensor<T> bias;
};

/// Gradients of conv2d. The input gradient is skipped (left as a scalar
/// placeholder) when need_input is false.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                             std::size_t stride, bool need_input = true) {
  const auto g = detail::conv_geometry(input, kernel, stride, false, "conv2d_backward");
  if (grad_out.shape() != Shape{g.n, g.ho, g.wo, g.cout}) {
    throw DimensionError("conv2d_backward: grad shape " + shape_str(grad_out.shape()));
  }
  const std::size_t rows = g.n * g.ho * g.wo;
  const std::size_t depth = g.k * g.k * g.cin;
  std::vector<T> cols(rows * depth);
  detail::im2col(input.data(), g, cols.data());
  ConstMatMap<T> dy(grad_out.data(), rows, g.cout);

  ConvGrads<T> grads;
  grads.kernel = Tensor<T>(kernel.shape());
  MatMap<T>(grads.kernel.data(), depth, g.cout).noalias() =
      ConstMatMap<T>(cols.data(), rows, depth).transpose() * dy;
  grads.bias = Tensor<T>({g.cout});
  detail::column_sums(grad_out.data(), rows, g.cout, grads.bias.data());
  if (need_input) {
    MatMap<T>(cols.data(), rows, depth).noalias() = dy * ConstMatMap<T>(kernel.data(), depth, g.cout).transpose();
    grads.input = Tensor<T>(input.shape());
    detail::col2im_add(cols.data(), g, grads.input.data());
  }
  return grads;
}

/// Per-channel spatial convolution (the first half of a depthwise separable
/// convolution) with linear activation.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           std::size_t stride) {
  const auto g = detail::conv_geometry(input, kernel, stride, true, "depthwise_conv2d");
  detail::require_bias(bias, g.cin, "depthwise_conv2d");
  const std::size_t c = g.cin;
  Tensor<T> out({g.n, g.ho, g.wo, c});
  T* y = out.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        T* dst = y + ((n * g.ho + oy) * g.wo + ox) * c;
        std::copy(bias.data(), bias.data() + c, dst);
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const T* src = input.data() + ((n * g.h + oy * stride + kh) * g.w + ox * stride + kw) * c;
            const T* kk = kernel.data() + (kh * g.k + kw) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * kk[ch];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                                       const Tensor<T>& grad_out, std::size_t stride, bool need_input = true) {
  const auto g = detail::conv_geometry(input, kernel, stride, true, "depthwise_conv2d_backward");
  const std::size_t c = g.cin;
  if (grad_out.shape() != Shape{g.n, g.ho, g.wo, c}) {
    throw DimensionError("depthwise_conv2d_backward: grad shape " + shape_str(grad_out.shape()));
  }
  ConvGrads<T> grads;
  grads.kernel = Tensor<T>(kernel.shape());
  grads.bias = Tensor<T>({c});
  if (need_input) grads.input = Tensor<T>(input.shape());
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const T* dy = grad_out.data() + ((n * g.ho + oy) * g.wo + ox) * c;
        for (std::size_t ch = 0; ch < c; ++ch) grads.bias[ch] += dy[ch];
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const std::size_t in_off = ((n * g.h + oy * stride + kh) * g.w + ox * stride + kw) * c;
            const std::size_t k_off = (kh * g.k + kw) * c;
            const T* src = input.data() + in_off;
            T* dk = grads.kernel.data() + k_off;
            for (std::size_t ch = 0; ch < c; ++ch) dk[ch] += dy[ch] * src[ch];
            if (need_input) {
              const T* kk = kernel.data() + k_off;
              T* dx = grads.input.data() + in_off;
              for (std::size_t ch = 0; ch < c; ++ch) dx[ch] += dy[ch] * kk[ch];
            }
          }
        }
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormMode { batch, instance };

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
};

template <typename T>
struct NormCache {
  Tensor<T> x_hat;
  std::vector<T> inv_std;     // per group
  std::vector<T> batch_mean;  // per group, for running-stat updates
  std::vector<T> batch_var;
  bool used_batch_stats = true;
};

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kRunningMomentum = 0.99;

/**
 * Batch mode standardizes each channel over (N, H, W) and falls back to the
 * running statistics at inference. Instance mode standardizes each
 * (sample, channel) over (H, W) and never uses running statistics.
 */
template <typename T>
Tensor<T> normalize(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, NormMode mode,
                    const RunningStats<T>* running, bool training, NormCache<T>* cache = nullptr) {
  if (input.rank() != 4) throw DimensionError("normalize: input must be [N,H,W,C]");
  const std::size_t n = input.dim(0), hw = input.dim(1) * input.dim(2), c = input.dim(3);
  detail::require_bias(gamma, c, "normalize(gamma)");
  detail::require_bias(beta, c, "normalize(beta)");
  const bool instance = mode == NormMode::instance;
  const std::size_t groups = instance ? n * c : c;
  const bool batch_stats = instance || training;

  std::vector<T> mean(groups), var(groups), inv_std(groups);
  if (batch_stats) {
    using A = Accum<T>;
    std::vector<A> sum(groups, A(0)), sq(groups, A(0));
    const A count = static_cast<A>(instance ? hw : n * hw);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < hw; ++p) {
        const T* x = input.data() + (i * hw + p) * c;
        const std::size_t base = instance ? i * c : 0;
        for (std::size_t ch = 0; ch < c; ++ch) sum[base + ch] += x[ch];
      }
    }
    for (std::size_t gi = 0; gi < groups; ++gi) mean[gi] = static_cast<T>(sum[gi] / count);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < hw; ++p) {
        const T* x = input.data() + (i * hw + p) * c;
        const std::size_t base = instance ? i * c : 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const A d = static_cast<A>(x[ch]) - mean[base + ch];
          sq[base + ch] += d * d;
        }
      }
    }
    for (std::size_t gi = 0; gi < groups; ++gi) var[gi] = static_cast<T>(sq[gi] / count);
  } else {
    if (running == nullptr) throw ConfigError("normalize: batch-mode inference needs running statistics");
    detail::require_bias(running->mean, c, "normalize(running mean)");
    detail::require_bias(running->var, c, "normalize(running var)");
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running->mean[ch];
      var[ch] = running->var[ch];
    }
  }
  for (std::size_t gi = 0; gi < groups; ++gi) {
    inv_std[gi] = static_cast<T>(1 / std::sqrt(static_cast<Accum<T>>(var[gi]) + static_cast<Accum<T>>(kNormEpsilon)));
  }

  Tensor<T> out(input.shape());
  Tensor<T> x_hat;
  if (cache) x_hat = Tensor<T>(input.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = instance ? i * c : 0;
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t off = (i * hw + p) * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T xh = (input[off + ch] - mean[base + ch]) * inv_std[base + ch];
        if (cache) x_hat[off + ch] = xh;
        out[off + ch] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->batch_mean = std::move(mean);
    cache->batch_var = std::move(var);
    cache->used_batch_stats = batch_stats;
  }
  return out;
}

template <typename T>
struct NormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
NormGrads<T> normalize_backward(const NormCache<T>& cache, const Tensor<T>& gamma, NormMode mode,
                                const Tensor<T>& grad_out) {
  require_same_shape(cache.x_hat, grad_out, "normalize_backward");
  const std::size_t n = grad_out.dim(0), hw = grad_out.dim(1) * grad_out.dim(2), c = grad_out.dim(3);
  const bool instance = mode == NormMode::instance;
  const std::size_t groups = instance ? n * c : c;
  const double count = static_cast<double>(instance ? hw : n * hw);

  NormGrads<T> grads{Tensor<T>(grad_out.shape()), Tensor<T>({c}), Tensor<T>({c})};
  std::vector<double> sum_dy(groups, 0.0), sum_dy_xh(groups, 0.0);
  std::vector<double> dgamma(c, 0.0), dbeta(c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = instance ? i * c : 0;
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t off = (i * hw + p) * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double dy = grad_out[off + ch];
        const double xh = cache.x_hat[off + ch];
        dgamma[ch] += dy * xh;
        dbeta[ch] += dy;
        sum_dy[base + ch] += dy;
        sum_dy_xh[base + ch] += dy * xh;
      }
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    grads.gamma[ch] = static_cast<T>(dgamma[ch]);
    grads.beta[ch] = static_cast<T>(dbeta[ch]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = instance ? i * c : 0;
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t off = (i * hw + p) * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t gi = base + ch;
        const double scale = static_cast<double>(gamma[ch]) * cache.inv_std[gi];
        const double dy = grad_out[off + ch];
        if (cache.used_batch_stats) {
          const double xh = cache.x_hat[off + ch];
          grads.input[off + ch] =
              static_cast<T>(scale * (dy - sum_dy[gi] / count - xh * sum_dy_xh[gi] / count));
        } else {
          grads.input[off + ch] = static_cast<T>(scale * dy);
        }
      }
    }
  }
  return grads;
}

/// Exponential moving average of batch statistics (batch mode only).
template <typename T>
void update_running_stats(RunningStats<T>& running, const NormCache<T>& cache,
                          double momentum = kRunningMomentum) {
  for (std::size_t ch = 0; ch < running.mean.size(); ++ch) {
    running.mean[ch] = static_cast<T>(momentum * running.mean[ch] + (1.0 - momentum) * cache.batch_mean[ch]);
    running.var[ch] = static_cast<T>(momentum * running.var[ch] + (1.0 - momentum) * cache.batch_var[ch]);
  }
}

// ---------------------------------------------------------------------------
// Batched matrix product with numpy-style broadcasting of leading dims.

namespace detail {

struct MatmulPlan {
  Shape lead;
  std::vector<std::size_t> a_offsets, b_offsets;  // per output slice
  std::size_t m, k, n;
};

inline MatmulPlan matmul_plan(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2) throw DimensionError("matmul_batched: operands need rank >= 2");
  MatmulPlan plan;
  plan.m = a[a.size() - 2];
  plan.k = a[a.size() - 1];
  plan.n = b[b.size() - 1];
  if (b[b.size() - 2] != plan.k) {
    throw DimensionError("matmul_batched: inner dimension " + shape_str(a) + " x " + shape_str(b));
  }
  const std::size_t la = a.size() - 2, lb = b.size() - 2, lr = std::max(la, lb);
  plan.lead.assign(lr, 1);
  for (std::size_t i = 0; i < lr; ++i) {
    const std::size_t ea = i + la >= lr ? a[i + la - lr] : 1;
    const std::size_t eb = i + lb >= lr ? b[i + lb - lr] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("matmul_batched: leading dims not broadcastable " + shape_str(a) + " x " + shape_str(b));
    }
    plan.lead[i] = std::max(ea, eb);
  }
  const std::size_t slices = shape_numel(plan.lead);
  plan.a_offsets.resize(slices);
  plan.b_offsets.resize(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    std::size_t rem = s, oa = 0, ob = 0, sa = plan.m * plan.k, sb = plan.k * plan.n;
    for (std::size_t i = lr; i-- > 0;) {
      const std::size_t idx = rem % plan.lead[i];
      rem /= plan.lead[i];
      if (i + la >= lr) {
        const std::size_t ea = a[i + la - lr];
        if (ea != 1) oa += idx * sa;
        sa *= ea;
      }
      if (i + lb >= lr) {
        const std::size_t eb = b[i + lb - lr];
        if (eb != 1) ob += idx * sb;
        sb *= eb;
      }
    }
    plan.a_offsets[s] = oa;
    plan.b_offsets[s] = ob;
  }
  return plan;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul_batched(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::matmul_plan(a.shape(), b.shape());
  Shape out_shape = plan.lead;
  out_shape.push_back(plan.m);
  out_shape.push_back(plan.n);
  Tensor<T> out(out_shape);
  for (std::size_t s = 0; s < plan.a_offsets.size(); ++s) {
    MatMap<T>(out.data() + s * plan.m * plan.n, plan.m, plan.n).noalias() =
        ConstMatMap<T>(a.data() + plan.a_offsets[s], plan.m, plan.k) *
        ConstMatMap<T>(b.data() + plan.b_offsets[s], plan.k, plan.n);
  }
  return out;
}

template <typename T>
struct MatmulGrads {
  Tensor<T> a;
  Tensor<T> b;
};

/// Broadcast operands receive the sum of gradients over their replicated slices.
template <typename T>
MatmulGrads<T> matmul_batched_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out) {
  const auto plan = detail::matmul_plan(a.shape(), b.shape());
  MatmulGrads<T> grads{Tensor<T>(a.shape()), Tensor<T>(b.shape())};
  for (std::size_t s = 0; s < plan.a_offsets.size(); ++s) {
    ConstMatMap<T> dy(grad_out.data() + s * plan.m * plan.n, plan.m, plan.n);
    MatMap<T>(grads.a.data() + plan.a_offsets[s], plan.m, plan.k).noalias() +=
        dy * ConstMatMap<T>(b.data() + plan.b_offsets[s], plan.k, plan.n).transpose();
    MatMap<T>(grads.b.data() + plan.b_offsets[s], plan.k, plan.n).noalias() +=
        ConstMatMap<T>(a.data() + plan.a_offsets[s], plan.m, plan.k).transpose() * dy;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Softmax

namespace detail {

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& shape, int axis, const char* op) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError(std::string(op) + ": invalid axis for " + shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  for (int i = axis + 1; i < rank; ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Max-shifted softmax along one axis (negative axes count from the end).
template <typename T>
Tensor<T> softmax(const Tensor<T>& input, int axis) {
  const auto s = detail::split_axis(input.shape(), axis, "softmax");
  Tensor<T> out(input.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, input[base + e * s.inner]);
      T sum = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(input[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        sum += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= sum;
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& output, const Tensor<T>& grad_out, int axis) {
  require_same_shape(output, grad_out, "softmax_backward");
  const auto s = detail::split_axis(output.shape(), axis, "softmax_backward");
  Tensor<T> dx(output.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T dot = 0;
      for (std::size_t e = 0; e < s.extent; ++e) dot += output[base + e * s.inner] * grad_out[base + e * s.inner];
      for (std::size_t e = 0; e < s.extent; ++e) {
        const std::size_t j = base + e * s.inner;
        dx[j] = output[j] * (grad_out[j] - dot);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Elementwise maps

enum class Unary { relu, exp, scale, add };

/// `param` is the factor for scale and the offset for add; ignored otherwise.
template <typename T>
Tensor<T> elementwise(const Tensor<T>& input, Unary op, T param = T{0}) {
  Tensor<T> out(input.shape());
  const std::size_t n = input.size();
  switch (op) {
    case Unary::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
      break;
    case Unary::exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(input[i]);
      break;
    case Unary::scale:
      for (std::size_t i = 0; i < n; ++i) out[i] = input[i] * param;
      break;
    case Unary::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = input[i] + param;
      break;
  }
  return out;
}

/// ReLU's subgradient at exactly zero is zero.
template <typename T>
Tensor<T> elementwise_backward(const Tensor<T>& input, const Tensor<T>& output, const Tensor<T>& grad_out,
                               Unary op, T param = T{0}) {
  require_same_shape(input, grad_out, "elementwise_backward");
  Tensor<T> dx(input.shape());
  const std::size_t n = input.size();
  switch (op) {
    case Unary::relu:
      for (std::size_t i = 0; i < n; ++i) dx[i] = input[i] > T{0} ? grad_out[i] : T{0};
      break;
    case Unary::exp:
      for (std::size_t i = 0; i < n; ++i) dx[i] = output[i] * grad_out[i];
      break;
    case Unary::scale:
      for (std::size_t i = 0; i < n; ++i) dx[i] = param * grad_out[i];
      break;
    case Unary::add:
      dx = grad_out;
      break;
  }
  return dx;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return elementwise(x, Unary::relu);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-input[i]));
  return out;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& output, const Tensor<T>& grad_out) {
  require_same_shape(output, grad_out, "sigmoid_backward");
  Tensor<T> dx(output.shape());
  for (std::size_t i = 0; i < output.size(); ++i) dx[i] = grad_out[i] * output[i] * (T{1} - output[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// Fully connected layer: [N, in] x [in, out] + [out]

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(0) != x.dim(1)) {
    throw DimensionError("linear: " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  }
  detail::require_bias(bias, weight.dim(1), "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  Tensor<T> out({n, out_dim});
  MatMap<T> y(out.data(), n, out_dim);
  y.noalias() = ConstMatMap<T>(x.data(), n, in) * ConstMatMap<T>(weight.data(), in, out_dim);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), out_dim);
  return out;
}

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out) {
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  if (grad_out.shape() != Shape{n, out_dim}) throw DimensionError("linear_backward: grad shape");
  ConstMatMap<T> dy(grad_out.data(), n, out_dim);
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>({out_dim})};
  MatMap<T>(g.input.data(), n, in).noalias() = dy * ConstMatMap<T>(weight.data(), in, out_dim).transpose();
  MatMap<T>(g.weight.data(), in, out_dim).noalias() = ConstMatMap<T>(x.data(), n, in).transpose() * dy;
  detail::column_sums(grad_out.data(), n, out_dim, g.bias.data());
  return g;
}

}  // namespace capsroute::ops
