#pragma once

#include "flipout/core.hpp"

#include <cmath>
#include <string>

namespace flipout {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

/// Optimizer over one flat parameter vector. Moments are sized on the first
/// step.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  Vector m, v;
};

inline OptimizerState make_optimizer(OptimizerKind kind, double learning_rate) {
  if (!(learning_rate >= 0)) throw ConfigError("learning rate must be >= 0");
  OptimizerState s;
  s.kind = kind;
  s.learning_rate = learning_rate;
  return s;
}

/// One descent step: params -= update(grad).
inline void optimizer_step(OptimizerState& s, Vector& params, const Vector& grad) {
  require_shape(grad.size() == params.size(), "optimizer_step: gradient length does not match parameters");
  ++s.step;
  if (s.kind == OptimizerKind::sgd) {
    params -= static_cast<Real>(s.learning_rate) * grad;
    return;
  }
  if (s.m.size() == 0) {
    s.m = Vector::Zero(params.size());
    s.v = Vector::Zero(params.size());
  }
  require_shape(s.m.size() == params.size(), "optimizer_step: moment shape does not match parameters");
  const double b1 = s.beta1, b2 = s.beta2;
  s.m = b1 * s.m + (1 - b1) * grad;
  s.v = b2 * s.v + (1 - b2) * grad.cwiseAbs2();
  const double c1 = 1 - std::pow(b1, static_cast<double>(s.step));
  const double c2 = 1 - std::pow(b2, static_cast<double>(s.step));
  for (Index i = 0; i < params.size(); ++i) {
    const double mh = s.m(i) / c1, vh = s.v(i) / c2;
    params(i) -= static_cast<Real>(s.learning_rate * mh / (std::sqrt(vh) + s.epsilon));
  }
}

}  // namespace flipout
