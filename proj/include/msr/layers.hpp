#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msr/prng.hpp"
#include "msr/tensor.hpp"

namespace msr {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = v > T{} ? v : T{};
  return y;
}

/// Gradient is taken as 0 at x == 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  detail::require_same_shape(x, dy, "relu_backward");
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > T{})) dx[i] = T{};
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Fully connected classifier head: y = x W^T + b, W is [out, in].

template <typename T = double>
struct LinearParams {
  Tensor<T> W;
  Tensor<T> b;
};

template <typename T = double>
struct LinearGrads {
  Tensor<T> dx;
  Tensor<T> dW;
  Tensor<T> db;
};

namespace detail {
template <typename T>
void check_linear(const Tensor<T>& x, const LinearParams<T>& p) {
  if (x.rank() != 2 || p.W.rank() != 2 || x.dim(1) != p.W.dim(1)) {
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                " incompatible with weight " + shape_str(p.W.shape()));
  }
  if (p.b.shape() != Shape{p.W.dim(0)}) {
    throw std::invalid_argument("linear: bias shape " + shape_str(p.b.shape()) +
                                " does not match weight " + shape_str(p.W.shape()));
  }
}
template <typename T>
using RowMatL = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace detail

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const LinearParams<T>& p) {
  detail::check_linear(x, p);
  const std::size_t N = x.dim(0), in = x.dim(1), out = p.W.dim(0);
  Tensor<T> y({N, out});
  Eigen::Map<const detail::RowMatL<T>> X(x.raw(), N, in);
  Eigen::Map<const detail::RowMatL<T>> W(p.W.raw(), out, in);
  Eigen::Map<detail::RowMatL<T>> Y(y.raw(), N, out);
  Y.noalias() = X * W.transpose();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < out; ++o) Y(n, o) += p.b[o];
  }
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const LinearParams<T>& p, const Tensor<T>& dy) {
  detail::check_linear(x, p);
  const std::size_t N = x.dim(0), in = x.dim(1), out = p.W.dim(0);
  if (dy.shape() != Shape{N, out}) {
    throw std::invalid_argument("linear_backward: dy shape " + shape_str(dy.shape()) +
                                " expected " + shape_str({N, out}));
  }
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(p.W.shape()), Tensor<T>(p.b.shape())};
  Eigen::Map<const detail::RowMatL<T>> X(x.raw(), N, in);
  Eigen::Map<const detail::RowMatL<T>> W(p.W.raw(), out, in);
  Eigen::Map<const detail::RowMatL<T>> DY(dy.raw(), N, out);
  Eigen::Map<detail::RowMatL<T>>(g.dx.raw(), N, in).noalias() = DY * W;
  Eigen::Map<detail::RowMatL<T>>(g.dW.raw(), out, in).noalias() = DY.transpose() * X;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < out; ++o) g.db[o] += DY(n, o);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Global average pool: [N,C,H,W] -> [N,C]

template <typename T>
Tensor<T> gap_forward(const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("gap: expected [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Tensor<T> y({N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    T s{};
    for (std::size_t k = 0; k < P; ++k) s += x[i * P + k];
    y[i] = s / static_cast<T>(P);
  }
  return y;
}

template <typename T>
Tensor<T> gap_backward(const Shape& input_shape, const Tensor<T>& dy) {
  if (input_shape.size() != 4 || dy.shape() != Shape{input_shape[0], input_shape[1]}) {
    throw std::invalid_argument("gap_backward: dy shape " + shape_str(dy.shape()) +
                                " does not match input " + shape_str(input_shape));
  }
  const std::size_t P = input_shape[2] * input_shape[3];
  Tensor<T> dx(input_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    const T v = dy[i] / static_cast<T>(P);
    for (std::size_t k = 0; k < P; ++k) dx[i * P + k] = v;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Mean softmax cross-entropy over the batch.

template <typename T = double>
struct XentResult {
  T loss{};
  Tensor<T> dlogits;
  std::size_t correct = 0;  // argmax hits, ties resolved to the lowest index
};

template <typename T>
XentResult<T> softmax_xent(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("softmax_xent: logits must be [N,K], got " + shape_str(logits.shape()));
  }
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    throw std::invalid_argument("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(N) + " rows");
  }
  XentResult<T> r{T{}, Tensor<T>(logits.shape()), 0};
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw std::invalid_argument("softmax_xent: label " + std::to_string(y) + " outside [0," +
                                  std::to_string(K) + ")");
    }
    const T* z = logits.raw() + n * K;
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (z[k] > z[arg]) arg = k;
    }
    const T m = z[arg];
    T s{};
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - m);
    r.loss += m + std::log(s) - z[y];
    T* d = r.dlogits.raw() + n * K;
    for (std::size_t k = 0; k < K; ++k) {
      d[k] = (std::exp(z[k] - m) / s - (static_cast<std::size_t>(y) == k ? T{1} : T{})) /
             static_cast<T>(N);
    }
    if (arg == static_cast<std::size_t>(y)) ++r.correct;
  }
  r.loss /= static_cast<T>(N);
  return r;
}

// ---------------------------------------------------------------------------
// Multiplicative noise injection: y = x * u, u ~ U(1-a, 1+a) in train mode.

enum class NoiseGranularity { element, channel };

template <typename T = double>
struct NoiseOutput {
  Tensor<T> y;
  std::optional<Tensor<T>> mask;  // absent when the layer acted as identity
};

/// In eval mode, or with a == 0, y is x bit-for-bit and no random draws are
/// consumed. Channel granularity draws one factor per (n, c) of an [N,C,...]
/// input.
template <typename T>
NoiseOutput<T> noise_forward(const Tensor<T>& x, T amplitude, Mode mode, Prng& rng,
                             NoiseGranularity granularity = NoiseGranularity::element) {
  if (!(amplitude >= T{0} && amplitude < T{1})) {
    throw std::invalid_argument("noise_forward: amplitude must be in [0,1), got " +
                                std::to_string(static_cast<double>(amplitude)));
  }
  if (mode == Mode::eval || amplitude == T{0}) return {x, std::nullopt};
  Tensor<T> mask(x.shape());
  if (granularity == NoiseGranularity::element || x.rank() < 2) {
    for (auto& m : mask.data()) m = static_cast<T>(rng.uniform(1.0 - amplitude, 1.0 + amplitude));
  } else {
    const std::size_t groups = x.dim(0) * x.dim(1);
    const std::size_t inner = x.size() / groups;
    for (std::size_t i = 0; i < groups; ++i) {
      const T u = static_cast<T>(rng.uniform(1.0 - amplitude, 1.0 + amplitude));
      std::fill_n(mask.raw() + i * inner, inner, u);
    }
  }
  return {mul(x, mask), std::move(mask)};
}

template <typename T>
Tensor<T> noise_backward(const std::optional<Tensor<T>>& mask, const Tensor<T>& dy) {
  if (!mask) return dy;
  return mul(dy, *mask);
}

// ---------------------------------------------------------------------------
// Batch normalization, kept only for the comparison baseline.
//
// Per-channel statistics over (N, H, W); biased variance for normalization,
// unbiased variance for the running estimate; eps = 1e-5.

template <typename T = double>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNormParams identity(std::size_t channels) {
    return {Tensor<T>({channels}, T{1}), Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{0}),
            Tensor<T>({channels}, T{1})};
  }
};

template <typename T = double>
struct BatchNormForward {
  Tensor<T> y;
  Tensor<T> xhat;
  std::vector<T> inv_std;
  Mode mode = Mode::train;
  // Train mode only: running statistics after this batch.
  std::optional<Tensor<T>> new_running_mean;
  std::optional<Tensor<T>> new_running_var;
};

template <typename T = double>
struct BatchNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

template <typename T>
BatchNormForward<T> batchnorm_forward(const Tensor<T>& x, const BatchNormParams<T>& p, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != p.gamma.size()) {
    throw std::invalid_argument("batchnorm: input " + shape_str(x.shape()) + " does not match " +
                                std::to_string(p.gamma.size()) + " channels");
  }
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (mode == Mode::train && N < 2) {
    throw std::invalid_argument("batchnorm: batch size 1 in train mode has degenerate variance");
  }
  BatchNormForward<T> out{Tensor<T>(x.shape()), Tensor<T>(x.shape()), std::vector<T>(C), mode,
                          std::nullopt, std::nullopt};
  const T M = static_cast<T>(N * P);
  Tensor<T> rm = p.running_mean, rv = p.running_var;
  for (std::size_t c = 0; c < C; ++c) {
    T mean, var;
    if (mode == Mode::train) {
      T s{};
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = x.raw() + (n * C + c) * P;
        for (std::size_t k = 0; k < P; ++k) s += src[k];
      }
      mean = s / M;
      T q{};
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = x.raw() + (n * C + c) * P;
        for (std::size_t k = 0; k < P; ++k) q += (src[k] - mean) * (src[k] - mean);
      }
      var = q / M;
      rm[c] = (T{1} - p.momentum) * rm[c] + p.momentum * mean;
      rv[c] = (T{1} - p.momentum) * rv[c] + p.momentum * var * M / (M - T{1});
    } else {
      mean = p.running_mean[c];
      var = p.running_var[c];
    }
    const T inv = T{1} / std::sqrt(var + p.eps);
    out.inv_std[c] = inv;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * P;
      for (std::size_t k = 0; k < P; ++k) {
        const T xh = (x[base + k] - mean) * inv;
        out.xhat[base + k] = xh;
        out.y[base + k] = p.gamma[c] * xh + p.beta[c];
      }
    }
  }
  if (mode == Mode::train) {
    out.new_running_mean = std::move(rm);
    out.new_running_var = std::move(rv);
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormForward<T>& fwd, const BatchNormParams<T>& p,
                                     const Tensor<T>& dy) {
  detail::require_same_shape(fwd.y, dy, "batchnorm_backward");
  const std::size_t N = dy.dim(0), C = dy.dim(1), P = dy.dim(2) * dy.dim(3);
  const T M = static_cast<T>(N * P);
  BatchNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({C}), Tensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    T sum_dy{}, sum_dy_xhat{};
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * P;
      for (std::size_t k = 0; k < P; ++k) {
        sum_dy += dy[base + k];
        sum_dy_xhat += dy[base + k] * fwd.xhat[base + k];
      }
    }
    g.dgamma[c] = sum_dy_xhat;
    g.dbeta[c] = sum_dy;
    const T scale = p.gamma[c] * fwd.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * P;
      for (std::size_t k = 0; k < P; ++k) {
        if (fwd.mode == Mode::train) {
          g.dx[base + k] = scale * (dy[base + k] - sum_dy / M - fwd.xhat[base + k] * sum_dy_xhat / M);
        } else {
          g.dx[base + k] = scale * dy[base + k];
        }
      }
    }
  }
  return g;
}

}  // namespace msr
