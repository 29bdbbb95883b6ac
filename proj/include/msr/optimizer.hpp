#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msr/model.hpp"
#include "msr/msr_kit.hpp"
#include "msr/tensor.hpp"

namespace msr {

/// Piecewise-constant learning rate over epochs. A boundary takes effect at
/// its own epoch (closed on the left).
struct LrSchedule {
  double base = 0.1;
  std::vector<std::pair<std::size_t, double>> boundaries;  // (epoch, multiplier)

  void validate() const {
    if (!(base > 0.0)) throw std::invalid_argument("LrSchedule: base lr must be > 0");
    for (std::size_t i = 0; i < boundaries.size(); ++i) {
      if (!(boundaries[i].second > 0.0)) {
        throw std::invalid_argument("LrSchedule: multipliers must be > 0");
      }
      if (i > 0 && boundaries[i].first <= boundaries[i - 1].first) {
        throw std::invalid_argument("LrSchedule: boundaries must be strictly increasing");
      }
    }
  }
};

inline double lr_at(const LrSchedule& s, std::size_t epoch) {
  double lr = s.base;
  for (const auto& [at, mult] : s.boundaries) {
    if (at <= epoch) lr *= mult;
  }
  return lr;
}

/// Momentum buffers keyed by parameter name. Buffers are created as zeros on
/// first use and never reset.
struct OptimState {
  double momentum = 0.9;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::map<std::string, Tensor<double>> buffers;

  Tensor<double>& buffer_for(const std::string& name, const Shape& shape) {
    auto it = buffers.find(name);
    if (it == buffers.end()) it = buffers.emplace(name, Tensor<double>(shape)).first;
    if (it->second.shape() != shape) {
      throw std::invalid_argument("OptimState: buffer " + name + " has shape " +
                                  shape_str(it->second.shape()) + ", parameter has " + shape_str(shape));
    }
    return it->second;
  }
};

/// Heavy-ball step without dampening: v <- mu v + grad; param <- param - lr v.
inline void sgd_momentum_step(Tensor<double>& param, const Tensor<double>& grad, Tensor<double>& velocity,
                              double mu, double lr) {
  detail::require_same_shape(param, grad, "sgd_momentum_step");
  detail::require_same_shape(param, velocity, "sgd_momentum_step");
  double* p = param.raw();
  double* v = velocity.raw();
  const double* g = grad.raw();
  for (std::size_t i = 0; i < param.size(); ++i) {
    v[i] = mu * v[i] + g[i];
    p[i] -= lr * v[i];
  }
}

/// Where the zero-mean gradient transform acts relative to momentum.
enum class CzmgStage { before_momentum, after_momentum };

struct MsrUpdateOptions {
  double zmg = 0.85;
  double luma_weight = 5e-4;
  bool apply_czmg = true;  // false for the plain arm
  CzmgStage stage = CzmgStage::before_momentum;
};

namespace detail {
inline const Tensor<double>& grad_for(const Gradients& grads, const ParamRef& p) {
  auto it = grads.find(p.name);
  if (it == grads.end()) throw std::invalid_argument("optimizer: no gradient for parameter " + p.name);
  if (it->second.shape() != p.value->shape()) {
    throw std::invalid_argument("optimizer: gradient for " + p.name + " has shape " +
                                shape_str(it->second.shape()) + ", parameter has " +
                                shape_str(p.value->shape()));
  }
  return it->second;
}
}  // namespace detail

/// One MSR update over all parameters. For each conv direction tensor V:
///   grad <- backprop grad + LUMA grad
///   grad <- czmg_transform(grad, zmg)    (czm-eligible layers only)
///   momentum step
/// Log-scales, biases and linear weights take a plain momentum step with no
/// decay. Returns the summed LUMA loss.
inline double msr_update_pipeline(const std::vector<ParamRef>& params, const Gradients& grads,
                                  const MsrUpdateOptions& opt, OptimState& state, double lr) {
  double luma_total = 0.0;
  for (const auto& p : params) {
    const Tensor<double>& raw = detail::grad_for(grads, p);
    Tensor<double>& v = state.buffer_for(p.name, p.value->shape());
    if (p.kind != ParamKind::conv_direction) {
      sgd_momentum_step(*p.value, raw, v, state.momentum, lr);
      continue;
    }
    Tensor<double> g = raw;
    if (opt.luma_weight > 0.0) {
      auto luma = luma_loss_and_grad(*p.value, opt.luma_weight);
      luma_total += luma.loss;
      axpy(1.0, luma.grad, g);
    }
    const bool czmg = opt.apply_czmg && p.czm_eligible;
    if (czmg && opt.stage == CzmgStage::before_momentum) g = czmg_transform(g, opt.zmg);
    if (czmg && opt.stage == CzmgStage::after_momentum) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = state.momentum * v[i] + g[i];
      axpy(-lr, czmg_transform(v, opt.zmg), *p.value);
    } else {
      sgd_momentum_step(*p.value, g, v, state.momentum, lr);
    }
  }
  ++state.step;
  return luma_total;
}

/// Baseline step with coupled L2: grad <- grad + 2 lambda param, then
/// momentum, for every parameter.
inline void baseline_l2_step(const std::vector<ParamRef>& params, const Gradients& grads, double weight_decay,
                             OptimState& state, double lr) {
  for (const auto& p : params) {
    Tensor<double> g = detail::grad_for(grads, p);
    if (weight_decay > 0.0) axpy(2.0 * weight_decay, *p.value, g);
    sgd_momentum_step(*p.value, g, state.buffer_for(p.name, p.value->shape()), state.momentum, lr);
  }
  ++state.step;
}

}  // namespace msr
