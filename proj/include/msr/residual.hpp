#pragma once

#include <optional>
#include <stdexcept>
#include <string>

#include "msr/conv.hpp"
#include "msr/layers.hpp"

namespace msr {

/// identity: channels and resolution must match.
/// zero_pad: strided subsampling plus zero-filled extra channels (no weights).
enum class ShortcutKind { identity, zero_pad };

/// Pre-activation residual unit, y = shortcut(x) + branch(noise(x)) with
///   branch = [bn1] -> relu -> conv1 -> [bn2] -> relu -> conv2.
/// Noise sits at the branch input; batch norm is present only for the
/// baseline arm. conv1 carries the block stride.
template <typename T = double>
struct ResidualBlockParams {
  ConvFilterParams<T> conv1;
  ConvFilterParams<T> conv2;
  std::optional<BatchNormParams<T>> bn1;
  std::optional<BatchNormParams<T>> bn2;
  T noise_amplitude = T{0};
  NoiseGranularity noise_granularity = NoiseGranularity::element;
  ShortcutKind shortcut = ShortcutKind::identity;

  std::size_t in_channels() const { return conv1.channels(); }
  std::size_t out_channels() const { return conv2.filters(); }
  std::size_t stride() const { return conv1.stride; }

  void validate() const {
    conv1.validate();
    conv2.validate();
    if (conv2.channels() != conv1.filters()) {
      throw std::invalid_argument("residual block: conv2 expects " +
                                  std::to_string(conv2.channels()) + " channels, conv1 produces " +
                                  std::to_string(conv1.filters()));
    }
    if (conv2.stride != 1) throw std::invalid_argument("residual block: conv2 stride must be 1");
    if (shortcut == ShortcutKind::identity && (in_channels() != out_channels() || stride() != 1)) {
      throw std::invalid_argument("residual block: identity shortcut needs matching shapes, got " +
                                  std::to_string(in_channels()) + "->" +
                                  std::to_string(out_channels()) + " stride " +
                                  std::to_string(stride()) + " (use a zero-pad shortcut)");
    }
    if (shortcut == ShortcutKind::zero_pad && out_channels() < in_channels()) {
      throw std::invalid_argument("residual block: zero-pad shortcut cannot reduce channels");
    }
  }
};

template <typename T = double>
struct ResidualContext {
  Tensor<T> x;
  std::optional<Tensor<T>> noise_mask;
  std::optional<BatchNormForward<T>> bn1;
  Tensor<T> a1;  // relu input before conv1
  Tensor<T> h1;  // conv1 input
  std::optional<BatchNormForward<T>> bn2;
  Tensor<T> a2;
  Tensor<T> h2;  // conv2 input
};

template <typename T = double>
struct ResidualForward {
  Tensor<T> y;
  ResidualContext<T> ctx;
};

template <typename T = double>
struct ResidualGrads {
  Tensor<T> dx;
  ConvGrads<T> conv1;
  ConvGrads<T> conv2;
  std::optional<BatchNormGrads<T>> bn1;
  std::optional<BatchNormGrads<T>> bn2;
};

namespace detail {

template <typename T>
std::size_t shortcut_pad_front(const ResidualBlockParams<T>& p) {
  return (p.out_channels() - p.in_channels()) / 2;
}

template <typename T>
Tensor<T> shortcut_forward(const ResidualBlockParams<T>& p, const Tensor<T>& x, const Shape& out_shape) {
  if (p.shortcut == ShortcutKind::identity) return x;
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = out_shape[1], Ho = out_shape[2], Wo = out_shape[3], s = p.stride();
  const std::size_t front = shortcut_pad_front(p);
  Tensor<T> y(out_shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho && i * s < H; ++i)
        for (std::size_t j = 0; j < Wo && j * s < W; ++j)
          y.at(n, c + front, i, j) = x.at(n, c, i * s, j * s);
  (void)Co;
  return y;
}

template <typename T>
Tensor<T> shortcut_backward(const ResidualBlockParams<T>& p, const Shape& in_shape, const Tensor<T>& dy) {
  if (p.shortcut == ShortcutKind::identity) return dy;
  const std::size_t N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
  const std::size_t Ho = dy.dim(2), Wo = dy.dim(3), s = p.stride();
  const std::size_t front = shortcut_pad_front(p);
  Tensor<T> dx(in_shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho && i * s < H; ++i)
        for (std::size_t j = 0; j < Wo && j * s < W; ++j)
          dx.at(n, c, i * s, j * s) = dy.at(n, c + front, i, j);
  return dx;
}

}  // namespace detail

template <typename T>
ResidualForward<T> residual_block_forward(const Tensor<T>& x, const ResidualBlockParams<T>& p,
                                          Mode mode, Prng& noise_rng) {
  p.validate();
  if (x.rank() != 4 || x.dim(1) != p.in_channels()) {
    throw std::invalid_argument("residual block: input " + shape_str(x.shape()) + " but block expects " +
                                std::to_string(p.in_channels()) + " channels");
  }
  ResidualForward<T> out;
  auto& c = out.ctx;
  c.x = x;
  auto noisy = noise_forward(x, p.noise_amplitude, mode, noise_rng, p.noise_granularity);
  c.noise_mask = std::move(noisy.mask);
  if (p.bn1) {
    c.bn1 = batchnorm_forward(noisy.y, *p.bn1, mode);
    c.a1 = c.bn1->y;
  } else {
    c.a1 = std::move(noisy.y);
  }
  c.h1 = relu_forward(c.a1);
  Tensor<T> z1 = conv2d_forward(c.h1, p.conv1);
  if (p.bn2) {
    c.bn2 = batchnorm_forward(z1, *p.bn2, mode);
    c.a2 = c.bn2->y;
  } else {
    c.a2 = std::move(z1);
  }
  c.h2 = relu_forward(c.a2);
  Tensor<T> branch = conv2d_forward(c.h2, p.conv2);
  out.y = add(detail::shortcut_forward(p, x, branch.shape()), branch);
  return out;
}

template <typename T>
ResidualGrads<T> residual_block_backward(const ResidualContext<T>& c, const ResidualBlockParams<T>& p,
                                         const Tensor<T>& dy) {
  ResidualGrads<T> g;
  g.conv2 = conv2d_backward(c.h2, p.conv2, dy);
  Tensor<T> da2 = relu_backward(c.a2, g.conv2.dx);
  Tensor<T> dz1;
  if (p.bn2) {
    g.bn2 = batchnorm_backward(*c.bn2, *p.bn2, da2);
    dz1 = g.bn2->dx;
  } else {
    dz1 = std::move(da2);
  }
  g.conv1 = conv2d_backward(c.h1, p.conv1, dz1);
  Tensor<T> da1 = relu_backward(c.a1, g.conv1.dx);
  Tensor<T> dnoisy;
  if (p.bn1) {
    g.bn1 = batchnorm_backward(*c.bn1, *p.bn1, da1);
    dnoisy = g.bn1->dx;
  } else {
    dnoisy = std::move(da1);
  }
  g.dx = add(detail::shortcut_backward(p, c.x.shape(), dy), noise_backward(c.noise_mask, dnoisy));
  // conv dx buffers are intermediate; drop them to keep the result small.
  g.conv1.dx = Tensor<T>();
  g.conv2.dx = Tensor<T>();
  return g;
}

}  // namespace msr
