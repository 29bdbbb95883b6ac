#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "msr/conv.hpp"
#include "msr/layers.hpp"
#include "msr/msr_kit.hpp"
#include "msr/residual.hpp"

namespace msr {

/// Training method.
///   msr       - CZM init, CZM gradients, LUMA, exp-scale reparameterization
///   batchnorm - He init, conv bias, batch norm, coupled L2 decay
///   plain     - msr without the zero-mean projection and gradient transform
enum class Arm { msr, batchnorm, plain };

inline const char* to_string(Arm a) {
  switch (a) {
    case Arm::msr: return "msr";
    case Arm::batchnorm: return "batchnorm-baseline";
    case Arm::plain: return "plain";
  }
  return "?";
}

/// Where noise layers go. residual_input places them at the branch input of
/// every residual unit; conv_input in front of every non-first conv layer of a
/// plain feed-forward stack.
enum class NoisePosition { none, residual_input, conv_input };

enum class ParamKind { conv_direction, conv_log_scale, conv_bias, linear_weight, linear_bias, bn_gamma, bn_beta };

struct ParamRef {
  std::string name;
  Tensor<double>* value;
  ParamKind kind;
  bool czm_eligible = false;
};

struct BufferRef {
  std::string name;
  Tensor<double>* value;
};

struct NamedConv {
  std::string name;
  const ConvFilterParams<double>* params;
};

using Gradients = std::map<std::string, Tensor<double>>;

struct ConvLayer {
  std::string name;
  ConvFilterParams<double> p;
};
struct BatchNormLayer {
  std::string name;
  BatchNormParams<double> p;
};
struct ReluLayer {};
struct GapLayer {};
struct NoiseLayer {
  double amplitude = 0.0;
  NoiseGranularity granularity = NoiseGranularity::element;
};
struct ResidualLayer {
  std::string name;
  ResidualBlockParams<double> p;
};
struct LinearLayer {
  std::string name;
  LinearParams<double> p;
};

using Layer = std::variant<ConvLayer, BatchNormLayer, ReluLayer, GapLayer, NoiseLayer, ResidualLayer, LinearLayer>;

struct ConvCtx { Tensor<double> x; };
struct BatchNormCtx { BatchNormForward<double> fwd; };
struct ReluCtx { Tensor<double> x; };
struct GapCtx { Shape input_shape; };
struct NoiseCtx { std::optional<Tensor<double>> mask; };
struct ResidualCtx { ResidualContext<double> ctx; };
struct LinearCtx { Tensor<double> x; };
using LayerCtx = std::variant<ConvCtx, BatchNormCtx, ReluCtx, GapCtx, NoiseCtx, ResidualCtx, LinearCtx>;

struct RunningStatUpdate {
  std::string name;  // batch-norm prefix, e.g. "stage1.block0.bn1"
  Tensor<double> mean;
  Tensor<double> var;
};

/// Everything backward() needs from a forward pass. Nothing is kept inside the
/// model itself.
struct ForwardTrace {
  Tensor<double> logits;
  std::vector<LayerCtx> ctx;
  std::vector<RunningStatUpdate> running_stats;
};

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

class Model {
 public:
  std::string arch;
  Arm arm = Arm::msr;
  std::vector<Layer> layers;

  ForwardTrace forward(const Tensor<double>& x, Mode mode, Prng& noise_rng) const {
    ForwardTrace t;
    t.ctx.reserve(layers.size());
    Tensor<double> h = x;
    for (const auto& layer : layers) {
      std::visit(overloaded{
                     [&](const ConvLayer& l) {
                       t.ctx.emplace_back(ConvCtx{h});
                       h = conv2d_forward(h, l.p);
                     },
                     [&](const BatchNormLayer& l) {
                       auto f = batchnorm_forward(h, l.p, mode);
                       h = f.y;
                       if (f.new_running_mean) {
                         t.running_stats.push_back({l.name, *f.new_running_mean, *f.new_running_var});
                       }
                       t.ctx.emplace_back(BatchNormCtx{std::move(f)});
                     },
                     [&](const ReluLayer&) {
                       Tensor<double> y = relu_forward(h);
                       t.ctx.emplace_back(ReluCtx{std::move(h)});
                       h = std::move(y);
                     },
                     [&](const GapLayer&) {
                       t.ctx.emplace_back(GapCtx{h.shape()});
                       h = gap_forward(h);
                     },
                     [&](const NoiseLayer& l) {
                       auto f = noise_forward(h, l.amplitude, mode, noise_rng, l.granularity);
                       h = std::move(f.y);
                       t.ctx.emplace_back(NoiseCtx{std::move(f.mask)});
                     },
                     [&](const ResidualLayer& l) {
                       auto f = residual_block_forward(h, l.p, mode, noise_rng);
                       if (f.ctx.bn1 && f.ctx.bn1->new_running_mean) {
                         t.running_stats.push_back({l.name + ".bn1", *f.ctx.bn1->new_running_mean,
                                                    *f.ctx.bn1->new_running_var});
                       }
                       if (f.ctx.bn2 && f.ctx.bn2->new_running_mean) {
                         t.running_stats.push_back({l.name + ".bn2", *f.ctx.bn2->new_running_mean,
                                                    *f.ctx.bn2->new_running_var});
                       }
                       h = std::move(f.y);
                       t.ctx.emplace_back(ResidualCtx{std::move(f.ctx)});
                     },
                     [&](const LinearLayer& l) {
                       t.ctx.emplace_back(LinearCtx{h});
                       h = linear_forward(h, l.p);
                     },
                 },
                 layer);
    }
    t.logits = std::move(h);
    return t;
  }

  Gradients backward(const ForwardTrace& t, const Tensor<double>& dlogits) const {
    if (t.ctx.size() != layers.size()) {
      throw std::invalid_argument("Model::backward: trace does not belong to this model");
    }
    Gradients grads;
    Tensor<double> d = dlogits;
    for (std::size_t i = layers.size(); i-- > 0;) {
      const auto& layer = layers[i];
      const auto& ctx = t.ctx[i];
      std::visit(overloaded{
                     [&](const ConvLayer& l) {
                       auto g = conv2d_backward(std::get<ConvCtx>(ctx).x, l.p, d);
                       store_conv(grads, l.name, g);
                       d = std::move(g.dx);
                     },
                     [&](const BatchNormLayer& l) {
                       auto g = batchnorm_backward(std::get<BatchNormCtx>(ctx).fwd, l.p, d);
                       grads[l.name + ".gamma"] = std::move(g.dgamma);
                       grads[l.name + ".beta"] = std::move(g.dbeta);
                       d = std::move(g.dx);
                     },
                     [&](const ReluLayer&) { d = relu_backward(std::get<ReluCtx>(ctx).x, d); },
                     [&](const GapLayer&) { d = gap_backward(std::get<GapCtx>(ctx).input_shape, d); },
                     [&](const NoiseLayer&) { d = noise_backward(std::get<NoiseCtx>(ctx).mask, d); },
                     [&](const ResidualLayer& l) {
                       auto g = residual_block_backward(std::get<ResidualCtx>(ctx).ctx, l.p, d);
                       store_conv(grads, l.name + ".conv1", g.conv1);
                       store_conv(grads, l.name + ".conv2", g.conv2);
                       if (g.bn1) {
                         grads[l.name + ".bn1.gamma"] = std::move(g.bn1->dgamma);
                         grads[l.name + ".bn1.beta"] = std::move(g.bn1->dbeta);
                       }
                       if (g.bn2) {
                         grads[l.name + ".bn2.gamma"] = std::move(g.bn2->dgamma);
                         grads[l.name + ".bn2.beta"] = std::move(g.bn2->dbeta);
                       }
                       d = std::move(g.dx);
                     },
                     [&](const LinearLayer& l) {
                       auto g = linear_backward(std::get<LinearCtx>(ctx).x, l.p, d);
                       grads[l.name + ".W"] = std::move(g.dW);
                       grads[l.name + ".b"] = std::move(g.db);
                       d = std::move(g.dx);
                     },
                 },
                 layer);
    }
    return grads;
  }

  /// Commits the batch-norm running statistics gathered by a train-mode pass.
  void apply_running_stats(const ForwardTrace& t) {
    std::map<std::string, BatchNormParams<double>*> bns;
    for_each_bn([&](const std::string& name, BatchNormParams<double>& p) { bns[name] = &p; });
    for (const auto& u : t.running_stats) {
      auto it = bns.find(u.name);
      if (it == bns.end()) throw std::invalid_argument("apply_running_stats: unknown layer " + u.name);
      it->second->running_mean = u.mean;
      it->second->running_var = u.var;
    }
  }

  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    auto add_conv = [&](const std::string& prefix, ConvFilterParams<double>& p) {
      out.push_back({prefix + ".V", &p.V, ParamKind::conv_direction, p.czm_eligible});
      if (p.g) out.push_back({prefix + ".g", &*p.g, ParamKind::conv_log_scale});
      if (p.b) out.push_back({prefix + ".b", &*p.b, ParamKind::conv_bias});
    };
    auto add_bn = [&](const std::string& prefix, BatchNormParams<double>& p) {
      out.push_back({prefix + ".gamma", &p.gamma, ParamKind::bn_gamma});
      out.push_back({prefix + ".beta", &p.beta, ParamKind::bn_beta});
    };
    for (auto& layer : layers) {
      std::visit(overloaded{
                     [&](ConvLayer& l) { add_conv(l.name, l.p); },
                     [&](BatchNormLayer& l) { add_bn(l.name, l.p); },
                     [&](ResidualLayer& l) {
                       if (l.p.bn1) add_bn(l.name + ".bn1", *l.p.bn1);
                       add_conv(l.name + ".conv1", l.p.conv1);
                       if (l.p.bn2) add_bn(l.name + ".bn2", *l.p.bn2);
                       add_conv(l.name + ".conv2", l.p.conv2);
                     },
                     [&](LinearLayer& l) {
                       out.push_back({l.name + ".W", &l.p.W, ParamKind::linear_weight});
                       out.push_back({l.name + ".b", &l.p.b, ParamKind::linear_bias});
                     },
                     [](auto&) {},
                 },
                 layer);
    }
    return out;
  }

  /// Non-trainable state (batch-norm running statistics).
  std::vector<BufferRef> buffers() {
    std::vector<BufferRef> out;
    for_each_bn([&](const std::string& name, BatchNormParams<double>& p) {
      out.push_back({name + ".running_mean", &p.running_mean});
      out.push_back({name + ".running_var", &p.running_var});
    });
    return out;
  }

  std::vector<NamedConv> conv_layers() const {
    std::vector<NamedConv> out;
    for (const auto& layer : layers) {
      if (auto* c = std::get_if<ConvLayer>(&layer)) out.push_back({c->name, &c->p});
      if (auto* r = std::get_if<ResidualLayer>(&layer)) {
        out.push_back({r->name + ".conv1", &r->p.conv1});
        out.push_back({r->name + ".conv2", &r->p.conv2});
      }
    }
    return out;
  }

  /// Copy with every conv scale folded into its kernel (inference weights).
  Model folded() const {
    Model m = *this;
    for (auto& layer : m.layers) {
      if (auto* c = std::get_if<ConvLayer>(&layer)) c->p = fold_conv(c->p);
      if (auto* r = std::get_if<ResidualLayer>(&layer)) {
        r->p.conv1 = fold_conv(r->p.conv1);
        r->p.conv2 = fold_conv(r->p.conv2);
      }
    }
    return m;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value->size();
    return n;
  }

 private:
  static void store_conv(Gradients& grads, const std::string& prefix, ConvGrads<double>& g) {
    grads[prefix + ".V"] = std::move(g.dV);
    if (g.dg) grads[prefix + ".g"] = std::move(*g.dg);
    if (g.db) grads[prefix + ".b"] = std::move(*g.db);
  }

  template <typename F>
  void for_each_bn(F&& f) {
    for (auto& layer : layers) {
      if (auto* b = std::get_if<BatchNormLayer>(&layer)) f(b->name, b->p);
      if (auto* r = std::get_if<ResidualLayer>(&layer)) {
        if (r->p.bn1) f(r->name + ".bn1", *r->p.bn1);
        if (r->p.bn2) f(r->name + ".bn2", *r->p.bn2);
      }
    }
  }
};

}  // namespace msr
