#pragma once

// Flat views over a network's trainable arrays, in a fixed order shared by
// the optimizers, the finite-difference audit and the checkpoint writer.
//
// Per layer: dense -> mean, scale, bias; LSTM -> input_weights, mean, scale,
// bias (mean/scale are the hidden-to-hidden distribution).

#include "flipout/net.hpp"

#include <span>
#include <string>
#include <vector>

namespace flipout {

struct ParamRef {
  std::string name;
  Real* data = nullptr;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
  std::span<Real> values() const { return {data, static_cast<std::size_t>(size())}; }
};

struct ConstParamRef {
  std::string name;
  const Real* data = nullptr;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
};

namespace detail {

template <class Ref, class Net, class Fn>
void visit_params(Net& net, Fn&& fn) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto add = [&](const std::string& n, auto& m) { fn(Ref{p + n, m.data(), m.rows(), m.cols()}); };
    auto add_vec = [&](const std::string& n, auto& v) { fn(Ref{p + n, v.data(), v.size(), 1}); };
    auto& layer = net.layers[l];
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      add("mean", d->dist.mean);
      add("scale", d->dist.scale);
      add_vec("bias", d->bias);
    } else {
      auto& c = std::get<LstmCell>(layer);
      add("input_weights", c.input_weights);
      add("mean", c.recurrent.mean);
      add("scale", c.recurrent.scale);
      add_vec("bias", c.bias);
    }
  }
}

}  // namespace detail

inline std::vector<ParamRef> param_refs(Network& net) {
  std::vector<ParamRef> out;
  detail::visit_params<ParamRef>(net, [&](ParamRef r) { out.push_back(std::move(r)); });
  return out;
}

inline std::vector<ConstParamRef> param_refs(const Network& net) {
  std::vector<ConstParamRef> out;
  detail::visit_params<ConstParamRef>(net, [&](ConstParamRef r) { out.push_back(std::move(r)); });
  return out;
}

/// Gradients in the same order and layout as param_refs. Missing entries
/// (e.g. no scale gradient) are zero.
inline std::vector<Matrix> gradient_blocks(const Network& net, const Gradients& grads) {
  require_shape(grads.size() == net.layers.size(), "gradient_blocks: gradient depth does not match network");
  std::vector<Matrix> out;
  auto push = [&](const Matrix& g, Index rows, Index cols) {
    out.push_back(g.size() == 0 ? Matrix::Zero(rows, cols) : g);
    require_shape(out.back().rows() == rows && out.back().cols() == cols, "gradient_blocks: shape mismatch");
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const LayerGradient& g = grads[l];
    if (const auto* d = std::get_if<DenseLayer>(&net.layers[l])) {
      push(g.d_mean, d->dist.rows(), d->dist.cols());
      push(g.d_scale, d->dist.rows(), d->dist.cols());
      push(g.d_bias.size() ? Matrix(g.d_bias) : Matrix(), d->bias.size(), 1);
    } else {
      const auto& c = std::get<LstmCell>(net.layers[l]);
      push(g.d_input_weights, c.input_weights.rows(), c.input_weights.cols());
      push(g.d_mean, c.recurrent.rows(), c.recurrent.cols());
      push(g.d_scale, c.recurrent.rows(), c.recurrent.cols());
      push(g.d_bias.size() ? Matrix(g.d_bias) : Matrix(), c.bias.size(), 1);
    }
  }
  return out;
}

inline Index param_count(const Network& net) {
  Index n = 0;
  for (const auto& r : param_refs(net)) n += r.size();
  return n;
}

inline Vector pack_params(const Network& net) {
  Vector out(param_count(net));
  Index at = 0;
  for (const auto& r : param_refs(net)) {
    std::copy(r.data, r.data + r.size(), out.data() + at);
    at += r.size();
  }
  return out;
}

inline void unpack_params(Network& net, const Vector& flat) {
  require_shape(flat.size() == param_count(net), "unpack_params: vector length does not match network");
  Index at = 0;
  for (auto& r : param_refs(net)) {
    std::copy(flat.data() + at, flat.data() + at + r.size(), r.data);
    at += r.size();
  }
}

inline Vector pack_gradients(const Network& net, const Gradients& grads) {
  Vector out(param_count(net));
  Index at = 0;
  for (const Matrix& g : gradient_blocks(net, grads)) {
    std::copy(g.data(), g.data() + g.size(), out.data() + at);
    at += g.size();
  }
  return out;
}

}  // namespace flipout
