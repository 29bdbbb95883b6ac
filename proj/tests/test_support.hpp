#pragma once

// Finite-difference oracle and small helpers shared by the unit and
// acceptance suites. Nothing here calls into a layer's backward code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "msr/prng.hpp"
#include "msr/tensor.hpp"

namespace msr::testing {

inline Tensor<double> random_tensor(Prng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  return uniform_tensor<double>(rng, shape, lo, hi);
}

/// Central differences of a scalar function of x, step h.
inline Tensor<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& x, double h = 1e-6) {
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct GradCompare {
  double worst = 0.0;  // largest per-component relative error
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Per-component relative error |a - n| / max(|a|, |n|, floor), where floor is
/// 1e-3 of the largest numeric component (or 1e-12). The floor keeps
/// components many orders below the gradient's scale, where double
/// cancellation in the difference quotient dominates, from reading as
/// relative failures.
inline GradCompare compare_gradients(const Tensor<double>& analytic, const Tensor<double>& numeric) {
  GradCompare r;
  if (analytic.shape() != numeric.shape()) {
    r.worst = INFINITY;
    return r;
  }
  const double floor = std::max(1e-12, 1e-3 * max_abs(numeric));
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    const double e = std::abs(analytic[i] - numeric[i]) / denom;
    if (e > r.worst || std::isnan(e)) {
      r.worst = e;
      r.index = i;
      r.analytic = analytic[i];
      r.numeric = numeric[i];
    }
  }
  return r;
}

/// Scalar probe loss sum(w * y) with fixed random weights, so every output
/// element gets an O(1) upstream gradient.
struct ProbeLoss {
  Tensor<double> weights;
  double operator()(const Tensor<double>& y) const { return dot(weights, y); }
  const Tensor<double>& grad() const { return weights; }
};

inline ProbeLoss make_probe(Prng& rng, const Shape& shape) { return {random_tensor(rng, shape)}; }

// Central differences (h = 1e-6) of an independently written LUMA loss in
// extended precision. In double the loss (~1e-3) loses too many digits to
// resolve the gradient at 1e-7 relative error.
inline Tensor<double> luma_numeric_gradient(const Tensor<double>& V, double lambda) {
  const std::size_t F = V.dim(0), k = V.size() / F;
  auto filter_loss = [&](const std::vector<long double>& v) {
    long double s = 0.0L;
    for (long double x : v) s += x * x;
    const long double d = std::sqrt(s) - 1.0L;
    return static_cast<long double>(lambda) * d * d;
  };
  const long double h = 1e-6L;
  Tensor<double> out(V.shape(), 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    std::vector<long double> v(V.raw() + f * k, V.raw() + (f + 1) * k);
    for (std::size_t i = 0; i < k; ++i) {
      const long double x0 = v[i];
      v[i] = x0 + h;
      const long double up = filter_loss(v);
      v[i] = x0 - h;
      const long double dn = filter_loss(v);
      v[i] = x0;
      out[f * k + i] = static_cast<double>((up - dn) / (2.0L * h));
    }
  }
  return out;
}

}  // namespace msr::testing
