#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msr/tensor.hpp"

namespace msr {

/// Parameters of one conv layer under the reparameterization W = exp(g) * V.
///
/// V is [F, C, Kh, Kw]. g holds one log-scale per filter; when absent the
/// layer is a plain convolution with W = V (batch-norm baseline, folded
/// inference weights). b is an optional per-filter bias.
template <typename T = double>
struct ConvFilterParams {
  Tensor<T> V;
  std::optional<Tensor<T>> g;
  std::optional<Tensor<T>> b;
  bool czm_eligible = false;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t filters() const { return V.dim(0); }
  std::size_t channels() const { return V.dim(1); }
  std::size_t kernel_h() const { return V.dim(2); }
  std::size_t kernel_w() const { return V.dim(3); }
  std::size_t filter_size() const { return V.size() / V.dim(0); }

  /// exp(g_f) per filter, or 1 when the layer carries no scale.
  std::vector<T> filter_scales() const {
    std::vector<T> s(filters(), T{1});
    if (g) {
      for (std::size_t f = 0; f < s.size(); ++f) s[f] = std::exp((*g)[f]);
    }
    return s;
  }

  void validate() const {
    if (V.rank() != 4) {
      throw std::invalid_argument("ConvFilterParams: V must be [F,C,Kh,Kw], got " +
                                  shape_str(V.shape()));
    }
    if (stride == 0) throw std::invalid_argument("ConvFilterParams: stride must be >= 1");
    if (g && g->shape() != Shape{filters()}) {
      throw std::invalid_argument("ConvFilterParams: g must have shape [" +
                                  std::to_string(filters()) + "], got " + shape_str(g->shape()));
    }
    if (b && b->shape() != Shape{filters()}) {
      throw std::invalid_argument("ConvFilterParams: b must have shape [" +
                                  std::to_string(filters()) + "], got " + shape_str(b->shape()));
    }
  }
};

template <typename T = double>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dV;
  std::optional<Tensor<T>> dg;
  std::optional<Tensor<T>> db;
};

/// Output extent along one spatial axis.
///
/// Windows are placed at stride steps from the start of the padded input. When
/// the padded extent is not an exact multiple of the stride, the trailing
/// remainder is allowed only if it falls entirely inside the zero padding;
/// dropping real input rows/columns is rejected as a non-integral output size.
inline std::size_t conv_output_dim(std::size_t in, std::size_t kernel, std::size_t pad,
                                   std::size_t stride) {
  if (in + 2 * pad < kernel) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kernel) +
                                " larger than padded input " + std::to_string(in + 2 * pad));
  }
  const std::size_t span = in + 2 * pad - kernel;
  if (span % stride > pad) {
    throw std::invalid_argument("conv2d: non-integral output size (" + std::to_string(in) + " + 2*" +
                                std::to_string(pad) + " - " + std::to_string(kernel) + ") / " +
                                std::to_string(stride));
  }
  return span / stride + 1;
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t C, H, W, F, Kh, Kw, Ho, Wo, stride, pad;
  std::size_t rows() const { return C * Kh * Kw; }
  std::size_t cols() const { return Ho * Wo; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const ConvFilterParams<T>& p) {
  p.validate();
  if (x.rank() != 4) {
    throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  }
  if (x.dim(1) != p.channels()) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(x.dim(1)) +
                                " channels but kernel expects " + std::to_string(p.channels()));
  }
  ConvGeometry g{};
  g.C = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.F = p.filters();
  g.Kh = p.kernel_h();
  g.Kw = p.kernel_w();
  g.stride = p.stride;
  g.pad = p.padding;
  g.Ho = conv_output_dim(g.H, g.Kh, g.pad, g.stride);
  g.Wo = conv_output_dim(g.W, g.Kw, g.pad, g.stride);
  return g;
}

// col is [C*Kh*Kw, Ho*Wo], row-major.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  for (std::size_t c = 0; c < g.C; ++c) {
    for (std::size_t ki = 0; ki < g.Kh; ++ki) {
      for (std::size_t kj = 0; kj < g.Kw; ++kj) {
        T* row = col + ((c * g.Kh + ki) * g.Kw + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= static_cast<long>(g.H)) {
            std::fill(dst, dst + g.Wo, T{});
            continue;
          }
          const T* src = img + (c * g.H + static_cast<std::size_t>(iy)) * g.W;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.W)) ? T{} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  for (std::size_t c = 0; c < g.C; ++c) {
    for (std::size_t ki = 0; ki < g.Kh; ++ki) {
      for (std::size_t kj = 0; kj < g.Kw; ++kj) {
        const T* row = col + ((c * g.Kh + ki) * g.Kw + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
          T* dst = img + (c * g.H + static_cast<std::size_t>(iy)) * g.W;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.W)) dst[ix] += row[oy * g.Wo + ox];
          }
        }
      }
    }
  }
}

template <typename T>
RowMat<T> effective_kernel(const ConvFilterParams<T>& p) {
  const auto scales = p.filter_scales();
  const std::size_t k = p.filter_size();
  RowMat<T> w(p.filters(), k);
  for (std::size_t f = 0; f < p.filters(); ++f) {
    for (std::size_t i = 0; i < k; ++i) w(f, i) = scales[f] * p.V[f * k + i];
  }
  return w;
}

}  // namespace detail

/// Pre-activation exp(g_f) * (V[f] cross-correlated with x) + b_f, zero padding.
/// The kernel is not flipped.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvFilterParams<T>& p) {
  const auto g = detail::conv_geometry(x, p);
  const std::size_t N = x.dim(0);
  Tensor<T> y({N, g.F, g.Ho, g.Wo});
  const auto w = detail::effective_kernel(p);
  detail::RowMat<T> col(g.rows(), g.cols());
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.raw() + n * g.C * g.H * g.W, g, col.data());
    Eigen::Map<detail::RowMat<T>> out(y.raw() + n * g.F * g.cols(), g.F, g.cols());
    out.noalias() = w * col;
    if (p.b) {
      for (std::size_t f = 0; f < g.F; ++f) out.row(f).array() += (*p.b)[f];
    }
  }
  return y;
}

/// Gradients of conv2d_forward. dV = exp(g_f) * dL/dW[f];
/// dg_f = <dL/dW[f], W[f]>; db_f = sum of dy over batch and positions.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvFilterParams<T>& p, const Tensor<T>& dy) {
  const auto g = detail::conv_geometry(x, p);
  const std::size_t N = x.dim(0);
  const Shape expected{N, g.F, g.Ho, g.Wo};
  if (dy.shape() != expected) {
    throw std::invalid_argument("conv2d_backward: dy shape " + shape_str(dy.shape()) +
                                " does not match output shape " + shape_str(expected));
  }
  const auto w = detail::effective_kernel(p);
  detail::RowMat<T> dW = detail::RowMat<T>::Zero(g.F, g.rows());
  detail::RowMat<T> col(g.rows(), g.cols());
  detail::RowMat<T> dcol(g.rows(), g.cols());
  ConvGrads<T> out{Tensor<T>(x.shape()), Tensor<T>(p.V.shape()), std::nullopt, std::nullopt};
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.raw() + n * g.C * g.H * g.W, g, col.data());
    Eigen::Map<const detail::RowMat<T>> dyn(dy.raw() + n * g.F * g.cols(), g.F, g.cols());
    dW.noalias() += dyn * col.transpose();
    dcol.noalias() = w.transpose() * dyn;
    detail::col2im_add(dcol.data(), g, out.dx.raw() + n * g.C * g.H * g.W);
  }
  const auto scales = p.filter_scales();
  const std::size_t k = g.rows();
  for (std::size_t f = 0; f < g.F; ++f) {
    for (std::size_t i = 0; i < k; ++i) out.dV[f * k + i] = scales[f] * dW(f, i);
  }
  if (p.g) {
    Tensor<T> dg({g.F});
    for (std::size_t f = 0; f < g.F; ++f) dg[f] = dW.row(f).dot(w.row(f));
    out.dg = std::move(dg);
  }
  if (p.b) {
    Tensor<T> db({g.F});
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t f = 0; f < g.F; ++f) {
        const T* row = dy.raw() + (n * g.F + f) * g.cols();
        T s{};
        for (std::size_t i = 0; i < g.cols(); ++i) s += row[i];
        db[f] += s;
      }
    }
    out.db = std::move(db);
  }
  return out;
}

}  // namespace msr
