#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "msr/errors.hpp"
#include "msr/model.hpp"

namespace msr {

struct ModelOptions {
  std::string arch = "tinycnn";
  Arm arm = Arm::msr;
  MsrConfig msr;
  std::size_t in_channels = 3;
  std::size_t num_classes = 10;
  NoisePosition noise_position = NoisePosition::residual_input;
  NoiseGranularity noise_granularity = NoiseGranularity::element;
  /// Conv bias. Unset means: on for the batch-norm arm, off otherwise.
  std::optional<bool> conv_bias;
};

inline const std::vector<std::string>& architecture_names() {
  static const std::vector<std::string> names{"tinycnn", "vggsmall", "resnet-mini", "resnet-mini-N",
                                              "resnet110"};
  return names;
}

namespace detail {

/// Blocks per stage for "resnet-mini" / "resnet-mini-N" / "resnet110", or 0.
inline std::size_t resnet_depth(const std::string& arch) {
  if (arch == "resnet110") return 18;
  if (arch == "resnet-mini") return 1;
  const std::string prefix = "resnet-mini-";
  if (arch.rfind(prefix, 0) == 0 && arch.size() > prefix.size()) {
    std::size_t n = 0;
    for (char c : arch.substr(prefix.size())) {
      if (c < '0' || c > '9') return 0;
      n = n * 10 + static_cast<std::size_t>(c - '0');
      if (n > 1000) return 0;
    }
    return n;
  }
  return 0;
}

class Builder {
 public:
  Builder(const ModelOptions& o, Prng& rng) : o_(o), rng_(rng) {}

  ConvFilterParams<double> conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                                bool first_layer) {
    ConvFilterParams<double> p;
    p.stride = stride;
    p.padding = k / 2;
    p.czm_eligible = k * k > 1 && (!first_layer || o_.msr.first_layer_czm);
    const Shape shape{cout, cin, k, k};
    if (o_.arm == Arm::batchnorm) {
      // He normal, fan-in.
      const double stdv = std::sqrt(2.0 / static_cast<double>(cin * k * k));
      p.V = Tensor<double>(shape);
      for (auto& v : p.V.data()) v = stdv * rng_.normal();
    } else {
      p.V = (o_.arm == Arm::msr && p.czm_eligible) ? czmi_init<double>(shape, rng_)
                                                   : unit_uniform_init<double>(shape, rng_);
      p.g = Tensor<double>({cout}, std::log(o_.msr.init_scale));
    }
    const bool bias = o_.conv_bias.value_or(o_.arm == Arm::batchnorm);
    if (bias) p.b = Tensor<double>({cout}, 0.0);
    return p;
  }

  LinearParams<double> linear(std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {uniform_tensor<double>(rng_, {out, in}, -bound, bound), Tensor<double>({out}, 0.0)};
  }

  bool bn() const { return o_.arm == Arm::batchnorm; }
  double noise_amp(NoisePosition where) const {
    return o_.noise_position == where ? o_.msr.noise_amplitude : 0.0;
  }
  NoiseGranularity gran() const { return o_.noise_granularity; }

 private:
  const ModelOptions& o_;
  Prng& rng_;
};

inline void conv_stack(Model& m, Builder& b, const std::vector<std::size_t>& widths,
                       const std::vector<std::size_t>& kernels, const std::vector<std::size_t>& strides,
                       std::size_t in_channels) {
  std::size_t cin = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string name = "conv" + std::to_string(i + 1);
    if (i > 0 && b.noise_amp(NoisePosition::conv_input) > 0.0) {
      m.layers.emplace_back(NoiseLayer{b.noise_amp(NoisePosition::conv_input), b.gran()});
    }
    m.layers.emplace_back(ConvLayer{name, b.conv(cin, widths[i], kernels[i], strides[i], i == 0)});
    if (b.bn()) m.layers.emplace_back(BatchNormLayer{"bn" + std::to_string(i + 1),
                                                     BatchNormParams<double>::identity(widths[i])});
    m.layers.emplace_back(ReluLayer{});
    cin = widths[i];
  }
}

}  // namespace detail

/// Builds a named architecture with arm-specific initialization.
///
///   tinycnn        3x3 convs 16, 32/s2, 32/s2; gap; linear
///   vggsmall       3x3 convs 32, 32, 64/s2, 64, 1x1 64, 3x3 128/s2, 128; gap; linear
///   resnet-mini-N  conv 16; three stages (16, 32, 64 channels) of N
///                  pre-activation units; relu; gap; linear
///   resnet-mini    resnet-mini-1
///   resnet110      resnet-mini-18 (6*18 + 2 weight layers)
///
/// Spatial conv layers other than the first are CZM-initialized in the msr
/// arm with exp(g) = init_scale; first and 1x1 layers get unit-magnitude
/// uniform init without the projection.
inline Model build_model(const ModelOptions& o, Prng& rng) {
  o.msr.validate();
  Model m;
  m.arch = o.arch;
  m.arm = o.arm;
  detail::Builder b(o, rng);
  if (o.arch == "tinycnn") {
    detail::conv_stack(m, b, {16, 32, 32}, {3, 3, 3}, {1, 2, 2}, o.in_channels);
    m.layers.emplace_back(GapLayer{});
    m.layers.emplace_back(LinearLayer{"fc", b.linear(32, o.num_classes)});
    return m;
  }
  if (o.arch == "vggsmall") {
    detail::conv_stack(m, b, {32, 32, 64, 64, 64, 128, 128}, {3, 3, 3, 3, 1, 3, 3}, {1, 1, 2, 1, 1, 2, 1},
                       o.in_channels);
    m.layers.emplace_back(GapLayer{});
    m.layers.emplace_back(LinearLayer{"fc", b.linear(128, o.num_classes)});
    return m;
  }
  if (const std::size_t depth = detail::resnet_depth(o.arch); depth > 0) {
    m.layers.emplace_back(ConvLayer{"conv1", b.conv(o.in_channels, 16, 3, 1, true)});
    std::size_t cin = 16;
    const std::size_t widths[3] = {16, 32, 64};
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < depth; ++k) {
        const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
        ResidualBlockParams<double> p;
        if (b.bn()) p.bn1 = BatchNormParams<double>::identity(cin);
        p.conv1 = b.conv(cin, widths[s], 3, stride, false);
        if (b.bn()) p.bn2 = BatchNormParams<double>::identity(widths[s]);
        p.conv2 = b.conv(widths[s], widths[s], 3, 1, false);
        p.noise_amplitude = b.noise_amp(NoisePosition::residual_input);
        p.noise_granularity = b.gran();
        p.shortcut = (cin == widths[s] && stride == 1) ? ShortcutKind::identity : ShortcutKind::zero_pad;
        p.validate();
        m.layers.emplace_back(ResidualLayer{
            "stage" + std::to_string(s + 1) + ".block" + std::to_string(k), std::move(p)});
        cin = widths[s];
      }
    }
    if (b.bn()) m.layers.emplace_back(BatchNormLayer{"bn_final", BatchNormParams<double>::identity(cin)});
    m.layers.emplace_back(ReluLayer{});
    m.layers.emplace_back(GapLayer{});
    m.layers.emplace_back(LinearLayer{"fc", b.linear(cin, o.num_classes)});
    return m;
  }
  std::string valid;
  for (const auto& n : architecture_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown architecture '" + o.arch + "'; valid names: " + valid);
}

}  // namespace msr
