#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

#include "msr/conv.hpp"
#include "msr/errors.hpp"
#include "msr/prng.hpp"
#include "msr/tensor.hpp"

namespace msr {

/// Hyperparameters of mean shift rejection training.
struct MsrConfig {
  double zmg = 0.85;            // fraction of the spatial gradient mean removed
  double luma_weight = 5e-4;    // unity-magnitude anchoring weight
  double init_scale = 0.8;      // initial exp(g)
  double noise_amplitude = 0.1;
  bool first_layer_czm = false;

  void validate() const {
    if (!(zmg >= 0.0 && zmg <= 1.0)) throw std::invalid_argument("MsrConfig: zmg must be in [0,1]");
    if (!(luma_weight >= 0.0)) throw std::invalid_argument("MsrConfig: luma_weight must be >= 0");
    if (!(init_scale > 0.0)) throw std::invalid_argument("MsrConfig: init_scale must be > 0");
    if (!(noise_amplitude >= 0.0 && noise_amplitude < 1.0)) {
      throw std::invalid_argument("MsrConfig: noise_amplitude must be in [0,1)");
    }
  }
};

namespace detail {
template <typename T>
std::size_t spatial_slice_size(const Tensor<T>& t, const char* op) {
  if (t.rank() < 2) {
    throw std::invalid_argument(std::string(op) + ": need at least 2 trailing spatial dims, got " +
                                shape_str(t.shape()));
  }
  return t.dim(t.rank() - 2) * t.dim(t.rank() - 1);
}
}  // namespace detail

/// Mean of every trailing 2D slice, shape [..., 1, 1].
template <typename T>
Tensor<T> spatial_slice_means(const Tensor<T>& t) {
  const std::size_t k = detail::spatial_slice_size(t, "spatial_slice_means");
  Shape s = t.shape();
  s[s.size() - 1] = 1;
  s[s.size() - 2] = 1;
  Tensor<T> m(s);
  for (std::size_t i = 0; i < m.size(); ++i) {
    T acc{};
    for (std::size_t j = 0; j < k; ++j) acc += t[i * k + j];
    m[i] = acc / static_cast<T>(k);
  }
  return m;
}

template <typename T>
T max_abs_slice_mean(const Tensor<T>& t) {
  return max_abs(spatial_slice_means(t));
}

/// Removes z times each 2D slice's spatial mean. z = 1 is the projection onto
/// channel-wise zero mean.
template <typename T>
Tensor<T> subtract_slice_means(const Tensor<T>& t, T z) {
  const std::size_t k = detail::spatial_slice_size(t, "subtract_slice_means");
  Tensor<T> out = t;
  for (std::size_t i = 0; i < t.size() / k; ++i) {
    T acc{};
    for (std::size_t j = 0; j < k; ++j) acc += t[i * k + j];
    const T shift = z * (acc / static_cast<T>(k));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] -= shift;
  }
  return out;
}

/// Projection of every trailing 2D slice onto zero spatial mean.
template <typename T>
Tensor<T> czm_project(const Tensor<T>& t) {
  return subtract_slice_means(t, T{1});
}

/// Rescales each filter (leading axis) to unit Euclidean magnitude.
template <typename T>
void normalize_filters(Tensor<T>& V) {
  const std::size_t F = V.dim(0), k = V.size() / F;
  for (std::size_t f = 0; f < F; ++f) {
    std::span<T> filt(V.raw() + f * k, k);
    const T n = l2_norm<T>(filt);
    if (n < T(1e-12)) throw DegenerateFilterError("normalize_filters: filter " + std::to_string(f) + " is zero");
    for (auto& v : filt) v /= n;
  }
}

template <typename S>
concept UniformSampler = requires(S s) {
  { s() } -> std::convertible_to<double>;
};

/// Channel-wise zero mean initialization of a [F, C, Kh, Kw] kernel:
/// draw U(-1, 1), subtract each slice's spatial mean, scale every filter to
/// unit magnitude. `draw` supplies the U(-1, 1) samples in row-major order.
template <typename T = double, UniformSampler Sampler>
Tensor<T> czmi_init(const Shape& shape, Sampler&& draw) {
  if (shape.size() != 4) {
    throw std::invalid_argument("czmi_init: expected [F,C,Kh,Kw], got " + shape_str(shape));
  }
  if (shape[2] * shape[3] <= 1) {
    throw std::invalid_argument("czmi_init: 1x1 kernels have no spatial extent; use unit_uniform_init");
  }
  Tensor<T> X(shape);
  for (auto& v : X.data()) v = static_cast<T>(draw());
  Tensor<T> V = czm_project(X);
  normalize_filters(V);
  return V;
}

template <typename T = double>
Tensor<T> czmi_init(const Shape& shape, Prng& rng) {
  return czmi_init<T>(shape, [&rng] { return rng.uniform(-1.0, 1.0); });
}

/// U(-1, 1) scaled to unit magnitude per filter, without the zero-mean
/// projection. Used for the first layer and 1x1 layers.
template <typename T = double>
Tensor<T> unit_uniform_init(const Shape& shape, Prng& rng) {
  Tensor<T> V = uniform_tensor<T>(rng, shape, T(-1), T(1));
  normalize_filters(V);
  return V;
}

/// grad - z * (spatial mean of each 2D slice). Each slice mean becomes
/// (1 - z) times its old value.
template <typename T>
Tensor<T> czmg_transform(const Tensor<T>& grad, T z) {
  if (!(z >= T{0} && z <= T{1})) {
    throw std::invalid_argument("czmg_transform: zmg factor must be in [0,1], got " +
                                std::to_string(static_cast<double>(z)));
  }
  return subtract_slice_means(grad, z);
}

template <typename T = double>
struct LumaResult {
  T loss{};
  Tensor<T> grad;
};

/// Unity magnitude anchoring, summed over filters (leading axis):
///   loss_f = lambda * (||V_f|| - 1)^2
///   dloss/dV_f = 2 lambda (||V_f|| - 1) V_f / ||V_f||
/// The gradient is radial, so it preserves zero slice means of V.
template <typename T>
LumaResult<T> luma_loss_and_grad(const Tensor<T>& V, T lambda) {
  if (V.rank() < 1) throw std::invalid_argument("luma: V must have a filter axis");
  const std::size_t F = V.dim(0), k = V.size() / F;
  LumaResult<T> r{T{}, Tensor<T>(V.shape())};
  for (std::size_t f = 0; f < F; ++f) {
    std::span<const T> filt(V.raw() + f * k, k);
    const T n = l2_norm<T>(filt);
    if (n < T(1e-8)) {
      throw DegenerateFilterError("luma: filter " + std::to_string(f) + " has magnitude " +
                                  std::to_string(static_cast<double>(n)) +
                                  " (< 1e-8); anchoring direction undefined");
    }
    const T d = n - T{1};
    r.loss += lambda * d * d;
    const T c = T{2} * lambda * d / n;
    for (std::size_t i = 0; i < k; ++i) r.grad[f * k + i] = c * filt[i];
  }
  return r;
}

/// Step size relative to filter magnitude: lr / m^2.
inline double effective_lr(double lr, double magnitude) {
  if (!(magnitude > 0.0)) {
    throw std::invalid_argument("effective_lr: filter magnitude must be > 0");
  }
  return lr / (magnitude * magnitude);
}

/// exp(g_f) * V[f] as one plain [F, C, Kh, Kw] kernel.
template <typename T>
Tensor<T> export_inference_weights(const ConvFilterParams<T>& p) {
  const auto scales = p.filter_scales();
  const std::size_t k = p.filter_size();
  Tensor<T> W = p.V;
  for (std::size_t f = 0; f < p.filters(); ++f) {
    for (std::size_t i = 0; i < k; ++i) W[f * k + i] *= scales[f];
  }
  return W;
}

/// Same layer with the scale folded into the kernel and g removed.
template <typename T>
ConvFilterParams<T> fold_conv(const ConvFilterParams<T>& p) {
  ConvFilterParams<T> q = p;
  q.V = export_inference_weights(p);
  q.g.reset();
  return q;
}

}  // namespace msr
