#pragma once

// Capsule layers: squash, primary capsules, predictions through the
// transformation tensor, and single-pass self-attention routing.

#include <cmath>
#include <string>

#include "capsroute/errors.hpp"
#include "capsroute/ops.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute::caps {

inline constexpr double kSquashEpsilon = 1e-12;

namespace detail {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

}  // namespace detail

/// squash(s) = (1 - exp(-|s|)) s / |s| applied to each vector along the last
/// axis. |s| carries a 1e-12 guard under the root so zero maps to zero.
template <typename T>
Tensor<T> squash(const Tensor<T>& s) {
  const std::size_t d = s.shape().back();
  const std::size_t vectors = s.size() / d;
  Tensor<T> out(s.shape());
  for (std::size_t v = 0; v < vectors; ++v) {
    const T* x = s.data() + v * d;
    using A = Accum<T>;
    A sq = 0;
    for (std::size_t i = 0; i < d; ++i) sq += static_cast<A>(x[i]) * x[i];
    const A norm = std::sqrt(sq + static_cast<A>(kSquashEpsilon));
    const A factor = -std::expm1(-norm) / norm;
    for (std::size_t i = 0; i < d; ++i) out[v * d + i] = static_cast<T>(factor * x[i]);
  }
  return out;
}

template <typename T>
Tensor<T> squash_backward(const Tensor<T>& s, const Tensor<T>& grad_out) {
  require_same_shape(s, grad_out, "squash_backward");
  const std::size_t d = s.shape().back();
  const std::size_t vectors = s.size() / d;
  Tensor<T> dx(s.shape());
  for (std::size_t v = 0; v < vectors; ++v) {
    const T* x = s.data() + v * d;
    const T* dy = grad_out.data() + v * d;
    double sq = 0, dot = 0;
    for (std::size_t i = 0; i < d; ++i) {
      sq += static_cast<double>(x[i]) * x[i];
      dot += static_cast<double>(x[i]) * dy[i];
    }
    const double norm = std::sqrt(sq + kSquashEpsilon);
    const double e = std::exp(-norm);
    const double f = -std::expm1(-norm) / norm;
    // f'(n) / n, where f(n) = (1 - e^-n) / n
    const double df_over_n = (e * norm - (1.0 - e)) / (norm * norm * norm);
    for (std::size_t i = 0; i < d; ++i) dx[v * d + i] = static_cast<T>(f * dy[i] + df_over_n * x[i] * dot);
  }
  return dx;
}

/// Capsule lengths |u| over the last axis.
template <typename T>
Tensor<T> lengths(const Tensor<T>& caps) {
  const std::size_t d = caps.shape().back();
  Shape shape(caps.shape().begin(), caps.shape().end() - 1);
  Tensor<T> out(shape);
  for (std::size_t v = 0; v < out.size(); ++v) {
    Accum<T> sq = 0;
    for (std::size_t i = 0; i < d; ++i) sq += static_cast<Accum<T>>(caps[v * d + i]) * caps[v * d + i];
    out[v] = static_cast<T>(std::sqrt(sq + static_cast<Accum<T>>(kSquashEpsilon)));
  }
  return out;
}

template <typename T>
Tensor<T> lengths_backward(const Tensor<T>& caps, const Tensor<T>& len, const Tensor<T>& grad_len) {
  const std::size_t d = caps.shape().back();
  Tensor<T> dx(caps.shape());
  for (std::size_t v = 0; v < len.size(); ++v) {
    for (std::size_t i = 0; i < d; ++i) dx[v * d + i] = grad_len[v] * caps[v * d + i] / len[v];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Primary capsules

template <typename T>
struct PrimaryCapsOutput {
  Tensor<T> pre_squash;  // [N, n, d]
  Tensor<T> caps;        // [N, n, d]
};

/// Depthwise convolution whose kernel spans the whole feature map, then the
/// F = n*d channels are regrouped so channel c feeds capsule c / d, component
/// c % d, then squashed.
template <typename T>
PrimaryCapsOutput<T> primary_caps(const Tensor<T>& feature_map, const Tensor<T>& kernel, const Tensor<T>& bias,
                                  std::size_t n, std::size_t d) {
  detail::require_rank(feature_map, 4, "primary_caps");
  const std::size_t h = feature_map.dim(1), w = feature_map.dim(2), f = feature_map.dim(3);
  if (f != n * d) {
    throw ConfigError("primary_caps: " + std::to_string(f) + " channels cannot form " + std::to_string(n) +
                      " capsules of dimension " + std::to_string(d));
  }
  if (kernel.rank() != 3 || kernel.dim(0) != h || kernel.dim(1) != w) {
    throw ConfigError("primary_caps: depthwise kernel " + shape_str(kernel.shape()) + " must span the " +
                      std::to_string(h) + "x" + std::to_string(w) + " feature map");
  }
  Tensor<T> flat = ops::depthwise_conv2d(feature_map, kernel, bias, 1);
  PrimaryCapsOutput<T> out;
  out.pre_squash = std::move(flat).reshaped({feature_map.dim(0), n, d});
  out.caps = squash(out.pre_squash);
  return out;
}

/// Inverse of the channel regrouping: [N, n, d] -> [N, 1, 1, n*d].
template <typename T>
Tensor<T> caps_to_channels(const Tensor<T>& caps) {
  return caps.reshaped({caps.dim(0), 1, 1, caps.dim(1) * caps.dim(2)});
}

// ---------------------------------------------------------------------------
// Routing

/// Per-pair transformation tensor W [n_l, n_l1, d_l, d_l1] and log priors
/// B [n_l, n_l1].
template <typename T>
struct CapsDenseParams {
  Tensor<T> W;
  Tensor<T> B;

  std::size_t lower() const { return W.dim(0); }
  std::size_t upper() const { return W.dim(1); }
  std::size_t lower_dim() const { return W.dim(2); }
  std::size_t upper_dim() const { return W.dim(3); }
};

template <typename T>
struct RoutingTrace {
  Tensor<T> A;      // [N, n_l, n_l, n_l1]
  Tensor<T> C;      // [N, n_l, n_l1]
  Tensor<T> U_hat;  // [N, n_l, n_l1, d_l1]
};

/// U_hat[i, j, k, :] = u[i, j, :]^T W[j, k, :, :]
template <typename T>
Tensor<T> predict(const Tensor<T>& u, const Tensor<T>& W) {
  detail::require_rank(u, 3, "predict(u)");
  detail::require_rank(W, 4, "predict(W)");
  const std::size_t N = u.dim(0), nl = u.dim(1), dl = u.dim(2);
  if (W.dim(0) != nl || W.dim(2) != dl) {
    throw DimensionError("predict: capsules " + shape_str(u.shape()) + " vs W " + shape_str(W.shape()));
  }
  const std::size_t nu = W.dim(1), du = W.dim(3);
  Tensor<T> U_hat({N, nl, nu, du});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < nl; ++j) {
      const T* uj = u.data() + (i * nl + j) * dl;
      for (std::size_t k = 0; k < nu; ++k) {
        T* out = U_hat.data() + ((i * nl + j) * nu + k) * du;
        const T* wjk = W.data() + (j * nu + k) * dl * du;
        for (std::size_t a = 0; a < dl; ++a) {
          const T ua = uj[a];
          const T* row = wjk + a * du;
          for (std::size_t b = 0; b < du; ++b) out[b] += ua * row[b];
        }
      }
    }
  }
  return U_hat;
}

template <typename T>
struct PredictGrads {
  Tensor<T> u;
  Tensor<T> W;
};

template <typename T>
PredictGrads<T> predict_backward(const Tensor<T>& u, const Tensor<T>& W, const Tensor<T>& grad_U_hat) {
  const std::size_t N = u.dim(0), nl = u.dim(1), dl = u.dim(2), nu = W.dim(1), du = W.dim(3);
  if (grad_U_hat.shape() != Shape{N, nl, nu, du}) throw DimensionError("predict_backward: grad shape");
  PredictGrads<T> g{Tensor<T>(u.shape()), Tensor<T>(W.shape())};
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < nl; ++j) {
      const T* uj = u.data() + (i * nl + j) * dl;
      T* duj = g.u.data() + (i * nl + j) * dl;
      for (std::size_t k = 0; k < nu; ++k) {
        const T* dy = grad_U_hat.data() + ((i * nl + j) * nu + k) * du;
        const T* wjk = W.data() + (j * nu + k) * dl * du;
        T* dwjk = g.W.data() + (j * nu + k) * dl * du;
        for (std::size_t a = 0; a < dl; ++a) {
          T acc = 0;
          for (std::size_t b = 0; b < du; ++b) {
            acc += wjk[a * du + b] * dy[b];
            dwjk[a * du + b] += uj[a] * dy[b];
          }
          duj[a] += acc;
        }
      }
    }
  }
  return g;
}

/// A[i, :, :, k] = U_hat[i, :, k, :] U_hat[i, :, k, :]^T / sqrt(lower_dim);
/// one symmetric agreement matrix per upper capsule.
template <typename T>
Tensor<T> attention_scores(const Tensor<T>& U_hat, std::size_t lower_dim) {
  detail::require_rank(U_hat, 4, "attention_scores");
  if (lower_dim == 0) throw DimensionError("attention_scores: lower capsule dimension must be >= 1");
  const std::size_t N = U_hat.dim(0), nl = U_hat.dim(1), nu = U_hat.dim(2), du = U_hat.dim(3);
  const T scale = static_cast<T>(1 / std::sqrt(static_cast<Accum<T>>(lower_dim)));
  Tensor<T> A({N, nl, nl, nu});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < nl; ++j) {
      for (std::size_t jj = j; jj < nl; ++jj) {
        for (std::size_t k = 0; k < nu; ++k) {
          const T* a = U_hat.data() + ((i * nl + j) * nu + k) * du;
          const T* b = U_hat.data() + ((i * nl + jj) * nu + k) * du;
          T dot = 0;
          for (std::size_t c = 0; c < du; ++c) dot += a[c] * b[c];
          dot *= scale;
          A[((i * nl + j) * nl + jj) * nu + k] = dot;
          A[((i * nl + jj) * nl + j) * nu + k] = dot;
        }
      }
    }
  }
  return A;
}

template <typename T>
Tensor<T> attention_scores_backward(const Tensor<T>& U_hat, std::size_t lower_dim, const Tensor<T>& grad_A) {
  const std::size_t N = U_hat.dim(0), nl = U_hat.dim(1), nu = U_hat.dim(2), du = U_hat.dim(3);
  if (grad_A.shape() != Shape{N, nl, nl, nu}) throw DimensionError("attention_scores_backward: grad shape");
  const T scale = static_cast<T>(1 / std::sqrt(static_cast<Accum<T>>(lower_dim)));
  Tensor<T> dU(U_hat.shape());
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < nl; ++j) {
      for (std::size_t jj = 0; jj < nl; ++jj) {
        for (std::size_t k = 0; k < nu; ++k) {
          const T g = (grad_A[((i * nl + j) * nl + jj) * nu + k] + grad_A[((i * nl + jj) * nl + j) * nu + k]) * scale;
          if (g == T{0}) continue;
          const T* b = U_hat.data() + ((i * nl + jj) * nu + k) * du;
          T* da = dU.data() + ((i * nl + j) * nu + k) * du;
          for (std::size_t c = 0; c < du; ++c) da[c] += g * b[c];
        }
      }
    }
  }
  return dU;
}

/// C[i, j, :] = softmax over upper capsules of sum_j' A[i, j, j', :].
/// Self-agreement (diagonal) terms are included in the sum.
template <typename T>
Tensor<T> coupling(const Tensor<T>& A) {
  detail::require_rank(A, 4, "coupling");
  if (!A.all_finite()) throw NumericError("coupling: non-finite agreement scores");
  const std::size_t N = A.dim(0), nl = A.dim(1), nu = A.dim(3);
  Tensor<T> logits({N, nl, nu});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < nl; ++j) {
      T* row = logits.data() + (i * nl + j) * nu;
      for (std::size_t jj = 0; jj < nl; ++jj) {
        const T* a = A.data() + ((i * nl + j) * nl + jj) * nu;
        for (std::size_t k = 0; k < nu; ++k) row[k] += a[k];
      }
    }
  }
  return ops::softmax(logits, -1);
}

template <typename T>
Tensor<T> coupling_backward(const Tensor<T>& C, const Tensor<T>& grad_C) {
  const std::size_t N = C.dim(0), nl = C.dim(1), nu = C.dim(2);
  Tensor<T> dlogits = ops::softmax_backward(C, grad_C, -1);
  Tensor<T> dA({N, nl, nl, nu});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < nl; ++j) {
      const T* g = dlogits.data() + (i * nl + j) * nu;
      for (std::size_t jj = 0; jj < nl; ++jj) {
        T* dst = dA.data() + ((i * nl + j) * nl + jj) * nu;
        for (std::size_t k = 0; k < nu; ++k) dst[k] = g[k];
      }
    }
  }
  return dA;
}

template <typename T>
struct CapsDenseOutput {
  Tensor<T> pre_squash;  // s [N, n_l1, d_l1]
  Tensor<T> caps;        // squash(s)
  RoutingTrace<T> trace;
};

/**
 * Fully connected capsule layer with one self-attention routing pass:
 * s[i, k, :] = sum_j U_hat[i, j, k, :] (C[i, j, k] + B[j, k]), then squash.
 * There is no iteration; A and C are computed exactly once.
 */
template <typename T>
CapsDenseOutput<T> caps_dense_forward(const Tensor<T>& u, const CapsDenseParams<T>& params) {
  detail::require_rank(u, 3, "caps_dense_forward");
  const std::size_t N = u.dim(0), nl = u.dim(1), dl = u.dim(2);
  if (params.B.shape() != Shape{params.W.dim(0), params.W.dim(1)}) {
    throw DimensionError("caps_dense_forward: priors " + shape_str(params.B.shape()) + " vs W " +
                         shape_str(params.W.shape()));
  }
  CapsDenseOutput<T> out;
  out.trace.U_hat = predict(u, params.W);
  out.trace.A = attention_scores(out.trace.U_hat, dl);
  out.trace.C = coupling(out.trace.A);
  const std::size_t nu = params.upper(), du = params.upper_dim();
  out.pre_squash = Tensor<T>({N, nu, du});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < nl; ++j) {
      for (std::size_t k = 0; k < nu; ++k) {
        const T weight = out.trace.C[(i * nl + j) * nu + k] + params.B[j * nu + k];
        const T* pred = out.trace.U_hat.data() + ((i * nl + j) * nu + k) * du;
        T* dst = out.pre_squash.data() + (i * nu + k) * du;
        for (std::size_t b = 0; b < du; ++b) dst[b] += weight * pred[b];
      }
    }
  }
  out.caps = squash(out.pre_squash);
  return out;
}

template <typename T>
struct CapsDenseGrads {
  Tensor<T> u;
  Tensor<T> W;
  Tensor<T> B;
};

/// Gradients flow through the routing branch (A and C) as well as through
/// the direct prediction path.
template <typename T>
CapsDenseGrads<T> caps_dense_backward(const Tensor<T>& u, const CapsDenseParams<T>& params,
                                      const CapsDenseOutput<T>& fwd, const Tensor<T>& grad_caps) {
  const std::size_t N = u.dim(0), nl = u.dim(1), dl = u.dim(2);
  const std::size_t nu = params.upper(), du = params.upper_dim();
  const Tensor<T> ds = squash_backward(fwd.pre_squash, grad_caps);
  const auto& U_hat = fwd.trace.U_hat;

  Tensor<T> dU_hat(U_hat.shape());
  Tensor<T> dC({N, nl, nu});
  Tensor<T> dB(params.B.shape());
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < nl; ++j) {
      for (std::size_t k = 0; k < nu; ++k) {
        const std::size_t jk = (i * nl + j) * nu + k;
        const T weight = fwd.trace.C[jk] + params.B[j * nu + k];
        const T* g = ds.data() + (i * nu + k) * du;
        const T* pred = U_hat.data() + jk * du;
        T* dpred = dU_hat.data() + jk * du;
        T dot = 0;
        for (std::size_t b = 0; b < du; ++b) {
          dpred[b] = weight * g[b];
          dot += g[b] * pred[b];
        }
        dC[jk] = dot;
        dB[j * nu + k] += dot;
      }
    }
  }
  const Tensor<T> dA = coupling_backward(fwd.trace.C, dC);
  dU_hat += attention_scores_backward(U_hat, dl, dA);
  auto pg = predict_backward(u, params.W, dU_hat);
  return {std::move(pg.u), std::move(pg.W), std::move(dB)};
}

}  // namespace capsroute::caps
