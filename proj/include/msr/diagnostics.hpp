#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "msr/model.hpp"
#include "msr/msr_kit.hpp"

namespace msr {

struct FilterDiagnostics {
  double v_norm = 0.0;  // ||V_f||
  double scale = 1.0;   // exp(g_f), 1 without reparameterization
  double w_norm = 0.0;  // scale * ||V_f||
  double effective_lr = 0.0;
};

struct LayerDiagnostics {
  std::string name;
  bool czm_eligible = false;
  double max_abs_slice_mean = 0.0;
  std::vector<FilterDiagnostics> filters;
};

/// Per-layer mean-shift and magnitude report of a model's conv kernels.
struct ShiftDiagnostics {
  double lr = 0.0;
  std::vector<LayerDiagnostics> layers;

  /// Largest |slice mean| over czm-eligible layers.
  double max_slice_mean() const {
    double m = 0.0;
    for (const auto& l : layers)
      if (l.czm_eligible) m = std::max(m, l.max_abs_slice_mean);
    return m;
  }

  struct Summary {
    double w_mean = 0.0, w_min = 0.0, w_max = 0.0;
    double v_min = 0.0, v_max = 0.0;
    double eff_lr_mean = 0.0;
    std::size_t filters = 0;
  };

  Summary summary() const {
    Summary s;
    s.w_min = s.v_min = std::numeric_limits<double>::infinity();
    s.w_max = s.v_max = 0.0;
    for (const auto& l : layers) {
      for (const auto& f : l.filters) {
        s.w_mean += f.w_norm;
        s.eff_lr_mean += f.effective_lr;
        s.w_min = std::min(s.w_min, f.w_norm);
        s.w_max = std::max(s.w_max, f.w_norm);
        s.v_min = std::min(s.v_min, f.v_norm);
        s.v_max = std::max(s.v_max, f.v_norm);
        ++s.filters;
      }
    }
    if (s.filters > 0) {
      s.w_mean /= static_cast<double>(s.filters);
      s.eff_lr_mean /= static_cast<double>(s.filters);
    } else {
      s.w_min = s.v_min = 0.0;
    }
    return s;
  }

  /// Filters whose ||W|| fell below `threshold`.
  std::size_t deflated_count(double threshold = 0.1) const {
    std::size_t n = 0;
    for (const auto& l : layers)
      for (const auto& f : l.filters) n += f.w_norm < threshold ? 1 : 0;
    return n;
  }
};

inline ShiftDiagnostics shift_diagnostics(const Model& model, double lr) {
  ShiftDiagnostics d;
  d.lr = lr;
  for (const auto& [name, p] : model.conv_layers()) {
    LayerDiagnostics l;
    l.name = name;
    l.czm_eligible = p->czm_eligible;
    if (p->kernel_h() * p->kernel_w() > 1) l.max_abs_slice_mean = max_abs_slice_mean(p->V);
    const auto scales = p->filter_scales();
    const std::size_t k = p->filter_size();
    for (std::size_t f = 0; f < p->filters(); ++f) {
      FilterDiagnostics fd;
      fd.v_norm = l2_norm<double>(std::span<const double>(p->V.raw() + f * k, k));
      fd.scale = scales[f];
      fd.w_norm = fd.scale * fd.v_norm;
      fd.effective_lr = fd.w_norm > 0.0 ? effective_lr(lr, fd.w_norm) : std::numeric_limits<double>::infinity();
      l.filters.push_back(fd);
    }
    d.layers.push_back(std::move(l));
  }
  return d;
}

}  // namespace msr
