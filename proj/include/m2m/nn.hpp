#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "m2m/autodiff.hpp"
#include "m2m/error.hpp"
#include "m2m/rng.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

enum class Act { relu, tanh, none };

inline std::string act_name(Act a) {
  switch (a) {
    case Act::relu: return "relu";
    case Act::tanh: return "tanh";
    default: return "none";
  }
}

inline Act act_from_name(const std::string& s) {
  if (s == "relu") return Act::relu;
  if (s == "tanh") return Act::tanh;
  if (s == "none") return Act::none;
  throw validation_error("unknown activation '" + s + "'");
}

// Dense MLP layout. layer_widths includes the input width, so a spec with
// k widths has k-1 layers.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  std::vector<Act> activations;
  std::vector<bool> batch_norm;

  std::size_t n_layers() const { return activations.size(); }
  std::size_t input_width() const { return layer_widths.front(); }
  std::size_t output_width() const { return layer_widths.back(); }

  bool has_batch_norm() const {
    for (bool b : batch_norm)
      if (b) return true;
    return false;
  }

  void validate() const {
    if (layer_widths.size() < 2) throw validation_error("mlp spec: need at least one layer");
    for (std::size_t w : layer_widths)
      if (w == 0) throw validation_error("mlp spec: zero-width layer");
    if (activations.size() != layer_widths.size() - 1)
      throw validation_error("mlp spec: activation count must be layer count");
    if (batch_norm.size() != activations.size())
      throw validation_error("mlp spec: batch_norm flag count must be layer count");
  }

  bool operator==(const MlpSpec& o) const {
    return layer_widths == o.layer_widths && activations == o.activations &&
           batch_norm == o.batch_norm;
  }
};

// Convenience builder: uniform activation choice, final layer as given.
inline MlpSpec mlp_spec(std::vector<std::size_t> widths, Act hidden, Act output,
                        bool hidden_batch_norm = false) {
  MlpSpec s;
  s.layer_widths = std::move(widths);
  std::size_t layers = s.layer_widths.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    s.activations.push_back(i + 1 == layers ? output : hidden);
    s.batch_norm.push_back(i + 1 == layers ? false : hidden_batch_norm);
  }
  return s;
}

struct BnLayer {
  Tensor gamma, beta, running_mean, running_var;
};

struct NetLayer {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out,)
  std::optional<BnLayer> bn;
};

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;

enum class Mode { train, eval };

// An MLP with weights. A plain value: copying copies the weights.
struct Network {
  MlpSpec spec;
  std::vector<NetLayer> layers;

  std::size_t input_width() const { return spec.input_width(); }
  std::size_t output_width() const { return spec.output_width(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
      n += l.weight.numel() + l.bias.numel();
      if (l.bn) n += l.bn->gamma.numel() + l.bn->beta.numel();
    }
    return n;
  }

  bool operator==(const Network& o) const {
    if (!(spec == o.spec) || layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (!(layers[i].weight == o.layers[i].weight) || !(layers[i].bias == o.layers[i].bias))
        return false;
      bool ha = layers[i].bn.has_value(), hb = o.layers[i].bn.has_value();
      if (ha != hb) return false;
      if (ha && !(layers[i].bn->gamma == o.layers[i].bn->gamma &&
                  layers[i].bn->beta == o.layers[i].bn->beta &&
                  layers[i].bn->running_mean == o.layers[i].bn->running_mean &&
                  layers[i].bn->running_var == o.layers[i].bn->running_var))
        return false;
    }
    return true;
  }
};

// He fan-in scaling for relu layers, Xavier for tanh/none; biases zero.
inline Network init_mlp(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network net;
  net.spec = spec;
  for (std::size_t i = 0; i < spec.n_layers(); ++i) {
    std::size_t fan_in = spec.layer_widths[i], fan_out = spec.layer_widths[i + 1];
    double bound = spec.activations[i] == Act::relu
                       ? std::sqrt(6.0 / static_cast<double>(fan_in))
                       : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Rng rng(mix_seed(seed, i));
    NetLayer layer;
    layer.weight = Tensor::zeros({fan_in, fan_out});
    for (auto& w : layer.weight.data()) w = rng.uniform(-bound, bound);
    layer.bias = Tensor::zeros({fan_out});
    if (spec.batch_norm[i]) {
      BnLayer bn;
      bn.gamma = Tensor::full({fan_out}, 1.0);
      bn.beta = Tensor::zeros({fan_out});
      bn.running_mean = Tensor::zeros({fan_out});
      bn.running_var = Tensor::full({fan_out}, 1.0);
      layer.bn = std::move(bn);
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

// Affine identity: single linear layer, unit weights on the diagonal.
inline Network identity_network(std::size_t dim) {
  Network net = init_mlp(mlp_spec({dim, dim}, Act::none, Act::none), 0);
  for (auto& w : net.layers[0].weight.data()) w = 0.0;
  for (std::size_t i = 0; i < dim; ++i) net.layers[0].weight.at(i, i) = 1.0;
  return net;
}

namespace detail {

inline std::string wkey(const std::string& p, std::size_t i) { return p + "/W" + std::to_string(i); }
inline std::string bkey(const std::string& p, std::size_t i) { return p + "/b" + std::to_string(i); }
inline std::string bnkey(const std::string& p, std::size_t i, const char* what) {
  return p + "/bn" + std::to_string(i) + "/" + what;
}

}  // namespace detail

// Appends the network's computation to `g` starting from node `x` (shape
// (n, input_width)), declaring parameter leaves under `prefix`. In train mode
// batch-norm layers normalize by batch statistics and the statistics nodes
// are recorded in bn_stats (for running-average updates); in eval mode the
// running statistics enter as bound leaves, making the network a fixed map.
inline int build_forward(const Network& net, ExprGraph& g, int x, const std::string& prefix,
                         Mode mode, std::vector<std::pair<std::string, int>>* bn_stats = nullptr) {
  const Shape& in_shape = g.shape_of(x);
  if (in_shape.size() != 2 || in_shape[1] != net.input_width())
    throw validation_error("forward: input shape " + shape_str(in_shape) + " does not match width " +
                           std::to_string(net.input_width()));
  std::size_t batch = in_shape[0];
  if (batch < 1) throw validation_error("forward: empty batch");

  int h = x;
  for (std::size_t i = 0; i < net.spec.n_layers(); ++i) {
    const NetLayer& layer = net.layers[i];
    int w = g.param(detail::wkey(prefix, i), layer.weight.shape());
    int b = g.param(detail::bkey(prefix, i), layer.bias.shape());
    h = g.add(g.matmul(h, w), b);
    if (layer.bn) {
      std::size_t f = layer.bias.shape()[0];
      int gamma = g.param(detail::bnkey(prefix, i, "gamma"), {f});
      int beta = g.param(detail::bnkey(prefix, i, "beta"), {f});
      if (mode == Mode::train) {
        if (batch < 2)
          throw validation_error("forward: train-mode batch norm needs a batch of at least 2");
        int mu = g.mean(h, Axis::rows);
        int centered = g.sub(h, g.bcast_row(mu, batch));
        int var = g.mean(g.power(centered, 2.0), Axis::rows);
        int inv_std = g.power(g.affine(var, 1.0, kBnEps), -0.5);
        h = g.add(g.mul(g.mul(centered, g.bcast_row(inv_std, batch)), g.bcast_row(gamma, batch)),
                  beta);
        if (bn_stats) {
          std::string mname = detail::bnkey(prefix, i, "batch_mean");
          std::string vname = detail::bnkey(prefix, i, "batch_var");
          g.mark_output(mname, mu);
          g.mark_output(vname, var);
          bn_stats->emplace_back(mname, mu);
          bn_stats->emplace_back(vname, var);
        }
      } else {
        int rmean = g.input(detail::bnkey(prefix, i, "rmean"), {f});
        int rvar = g.input(detail::bnkey(prefix, i, "rvar"), {f});
        int inv_std = g.power(g.affine(rvar, 1.0, kBnEps), -0.5);
        int centered = g.sub(h, g.bcast_row(rmean, batch));
        h = g.add(g.mul(g.mul(centered, g.bcast_row(inv_std, batch)), g.bcast_row(gamma, batch)),
                  beta);
      }
    }
    switch (net.spec.activations[i]) {
      case Act::relu: h = g.relu(h); break;
      case Act::tanh: h = g.tanh_(h); break;
      case Act::none: break;
    }
  }
  return h;
}

// Binds every parameter leaf declared by build_forward, plus the running
// statistics when eval mode was used.
inline void bind_params(const Network& net, const std::string& prefix, Mode mode, Bindings& out) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const NetLayer& layer = net.layers[i];
    out[detail::wkey(prefix, i)] = layer.weight;
    out[detail::bkey(prefix, i)] = layer.bias;
    if (layer.bn) {
      out[detail::bnkey(prefix, i, "gamma")] = layer.bn->gamma;
      out[detail::bnkey(prefix, i, "beta")] = layer.bn->beta;
      if (mode == Mode::eval) {
        out[detail::bnkey(prefix, i, "rmean")] = layer.bn->running_mean;
        out[detail::bnkey(prefix, i, "rvar")] = layer.bn->running_var;
      }
    }
  }
}

// Trainable parameters as a named map (gradient targets for the optimizer).
inline Bindings param_map(const Network& net, const std::string& prefix) {
  Bindings out;
  bind_params(net, prefix, Mode::train, out);
  return out;
}

inline void set_params(Network& net, const std::string& prefix, const Bindings& params) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    NetLayer& layer = net.layers[i];
    layer.weight = params.at(detail::wkey(prefix, i));
    layer.bias = params.at(detail::bkey(prefix, i));
    if (layer.bn) {
      layer.bn->gamma = params.at(detail::bnkey(prefix, i, "gamma"));
      layer.bn->beta = params.at(detail::bnkey(prefix, i, "beta"));
    }
  }
}

// Applies one momentum-0.9 running-statistics update from evaluated batch
// statistics (train-mode forward outputs).
inline void update_bn_running(Network& net, const std::string& prefix, const Bindings& values) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (!net.layers[i].bn) continue;
    const Tensor& bm = values.at(detail::bnkey(prefix, i, "batch_mean"));
    const Tensor& bv = values.at(detail::bnkey(prefix, i, "batch_var"));
    BnLayer& bn = *net.layers[i].bn;
    for (std::size_t j = 0; j < bm.numel(); ++j) {
      bn.running_mean[j] = kBnMomentum * bn.running_mean[j] + (1.0 - kBnMomentum) * bm[j];
      bn.running_var[j] = kBnMomentum * bn.running_var[j] + (1.0 - kBnMomentum) * bv[j];
    }
  }
}

// One forward pass as a plain function call. Pure; running statistics are
// not touched (training loops use build_forward and update them explicitly).
inline Tensor forward(const Network& net, const Tensor& batch, Mode mode) {
  ExprGraph g;
  int x = g.input("x", batch.shape());
  int y = build_forward(net, g, x, "net", mode);
  g.mark_output("y", y);
  Bindings b;
  b["x"] = batch;
  bind_params(net, "net", mode, b);
  return evaluate(g, b, {"y"})["y"];
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.1;
  double beta2 = 0.5;
  double eps = 1e-8;
};

// Per-parameter first/second moment accumulators, keyed like param_map.
struct AdamState {
  AdamConfig cfg;
  long t = 0;
  Bindings m, v;
};

inline AdamState make_adam(AdamConfig cfg, const Bindings& params) {
  if (cfg.lr <= 0 || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1 ||
      cfg.eps <= 0)
    throw validation_error("adam: invalid hyperparameters");
  AdamState s;
  s.cfg = cfg;
  for (const auto& [name, p] : params) {
    s.m[name] = Tensor::zeros(p.shape());
    s.v[name] = Tensor::zeros(p.shape());
  }
  return s;
}

// Standard bias-corrected Adam update. Pure: returns the new parameters and
// state, inputs untouched.
inline std::pair<Bindings, AdamState> adam_step(const AdamState& state, const Bindings& params,
                                                const Bindings& grads) {
  AdamState next = state;
  next.t = state.t + 1;
  Bindings out = params;
  double b1t = 1.0 - std::pow(state.cfg.beta1, static_cast<double>(next.t));
  double b2t = 1.0 - std::pow(state.cfg.beta2, static_cast<double>(next.t));
  for (auto& [name, p] : out) {
    auto git = grads.find(name);
    if (git == grads.end()) throw validation_error("adam: missing gradient for '" + name + "'");
    const Tensor& grad = git->second;
    if (!grad.same_shape(p))
      throw validation_error("adam: gradient shape mismatch for '" + name + "'");
    if (!grad.all_finite()) throw numeric_error("adam: non-finite gradient for '" + name + "'");
    Tensor& m = next.m.at(name);
    Tensor& v = next.v.at(name);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = state.cfg.beta1 * m[i] + (1.0 - state.cfg.beta1) * grad[i];
      v[i] = state.cfg.beta2 * v[i] + (1.0 - state.cfg.beta2) * grad[i] * grad[i];
      double mhat = m[i] / b1t;
      double vhat = v[i] / b2t;
      p[i] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
  }
  return {std::move(out), std::move(next)};
}

}  // namespace m2m
