#pragma once

// Bayes by Backprop on dense networks with a factorial Gaussian posterior
// N(mean, sigma^2) per weight, sigma = softplus(rho), and prior N(0, p^2).
//
// The minimised objective is the per-example negative ELBO
//   J = mean_batch(-log lik) + kl_scale * KL(q || p) / dataset_size,
// i.e. the full-dataset negative ELBO divided by dataset_size.

#include "flipout/net.hpp"
#include "flipout/optim.hpp"
#include "flipout/params.hpp"
#include "flipout/runlog.hpp"
#include "flipout/data.hpp"

#include <chrono>
#include <cmath>

namespace flipout {

struct BbbConfig {
  double prior_std = 1.0;
  double kl_scale = 0.1;
  Index batch_size = 1024;
  double learning_rate = 0.003;
  Strategy strategy = Strategy::flipout;
  long steps = 1000;
  OptimizerKind optimizer = OptimizerKind::adam;
  // Initial sigma as a multiple of the weight-init standard deviation.
  double init_sigma_factor = 0.05;
  bool with_replacement = false;
  bool wall_clock = false;

  void validate() const {
    if (!(prior_std > 0)) throw ConfigError("bbb: prior_std must be > 0");
    if (!(kl_scale > 0 && kl_scale <= 1)) throw ConfigError("bbb: kl_scale must be in (0, 1]");
    if (batch_size < 1) throw ConfigError("bbb: batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("bbb: learning_rate must be > 0");
    if (steps < 0) throw ConfigError("bbb: steps must be >= 0");
    if (!(init_sigma_factor > 0)) throw ConfigError("bbb: init_sigma_factor must be > 0");
  }
};

inline double softplus(double z) { return z > 30 ? z : std::log1p(std::exp(z)); }
inline double inverse_softplus(double s) { return s > 30 ? s : std::log(std::expm1(s)); }
inline double logistic(double z) { return 1 / (1 + std::exp(-z)); }

struct BbbModel {
  Network net;             // dist.scale always equals softplus(rho)
  std::vector<Matrix> rho; // one per layer
};

inline void sync_scales(BbbModel& m) {
  for (std::size_t l = 0; l < m.net.layers.size(); ++l)
    layer_dist(m.net.layers[l]).scale = m.rho[l].unaryExpr([](Real r) { return static_cast<Real>(softplus(r)); });
}

inline void check_bbb_network(const Network& net) {
  for (const auto& l : net.layers) {
    if (!std::holds_alternative<DenseLayer>(l)) throw ConfigError("bbb: only dense layers are supported");
    if (layer_dist(l).mode != Mode::additive_gaussian) throw ConfigError("bbb: layers must use additive_gaussian mode");
  }
}

/// Glorot-initialised means; sigma_0 = init_sigma_factor * (init std), where
/// a uniform(-a, a) draw has std a / sqrt 3.
inline BbbModel make_bbb_model(const std::vector<Index>& widths, Activation hidden, const BbbConfig& cfg,
                               const RngKey& key) {
  BbbModel m;
  m.net = make_mlp(widths, hidden, Loss::softmax_cross_entropy, Mode::additive_gaussian, 0, key);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double init_std = std::sqrt(6.0 / static_cast<double>(widths[l] + widths[l + 1])) / std::sqrt(3.0);
    m.rho.push_back(Matrix::Constant(widths[l], widths[l + 1], inverse_softplus(cfg.init_sigma_factor * init_std)));
  }
  sync_scales(m);
  return m;
}

/// Flat optimisation vector: per layer mean, rho, bias.
inline Vector bbb_params(const BbbModel& m) {
  Index n = 0;
  for (std::size_t l = 0; l < m.net.layers.size(); ++l) {
    const auto& d = std::get<DenseLayer>(m.net.layers[l]);
    n += 2 * d.dist.mean.size() + d.bias.size();
  }
  Vector out(n);
  Index at = 0;
  for (std::size_t l = 0; l < m.net.layers.size(); ++l) {
    const auto& d = std::get<DenseLayer>(m.net.layers[l]);
    out.segment(at, d.dist.mean.size()) = Eigen::Map<const Vector>(d.dist.mean.data(), d.dist.mean.size());
    at += d.dist.mean.size();
    out.segment(at, m.rho[l].size()) = Eigen::Map<const Vector>(m.rho[l].data(), m.rho[l].size());
    at += m.rho[l].size();
    out.segment(at, d.bias.size()) = d.bias;
    at += d.bias.size();
  }
  return out;
}

inline void set_bbb_params(BbbModel& m, const Vector& p) {
  Index at = 0;
  for (std::size_t l = 0; l < m.net.layers.size(); ++l) {
    auto& d = std::get<DenseLayer>(m.net.layers[l]);
    require_shape(at + 2 * d.dist.mean.size() + d.bias.size() <= p.size(), "set_bbb_params: vector too short");
    Eigen::Map<Vector>(d.dist.mean.data(), d.dist.mean.size()) = p.segment(at, d.dist.mean.size());
    at += d.dist.mean.size();
    Eigen::Map<Vector>(m.rho[l].data(), m.rho[l].size()) = p.segment(at, m.rho[l].size());
    at += m.rho[l].size();
    d.bias = p.segment(at, d.bias.size());
    at += d.bias.size();
  }
  require_shape(at == p.size(), "set_bbb_params: vector too long");
  sync_scales(m);
}

/// KL(N(mean, scale^2) || N(0, prior_std^2)) summed over entries.
inline double kl_factorial_gaussian(const WeightDist& dist, double prior_std) {
  if (!(prior_std > 0)) throw ConfigError("kl: prior_std must be > 0");
  if (!(dist.scale.array() > 0).all()) throw ConfigError("kl: posterior scales must be > 0");
  const double p2 = prior_std * prior_std;
  double kl = 0;
  for (Index i = 0; i < dist.mean.size(); ++i) {
    const double s = dist.scale.data()[i], mu = dist.mean.data()[i];
    kl += std::log(prior_std / s) + (s * s + mu * mu) / (2 * p2) - 0.5;
  }
  return kl;
}

struct BbbEvaluation {
  double objective = 0;
  double nll = 0;
  double kl = 0;
  double error_rate = 0;
  Vector grad;  // d objective / d bbb_params
};

/// Objective and gradient with the perturbation noise held fixed.
inline BbbEvaluation bbb_evaluate(const BbbModel& m, const Matrix& x, const Targets& t, const BbbConfig& cfg,
                                  const NetNoise& noise, Index dataset_size) {
  const ForwardResult fr = net_forward_sampled(m.net, x, noise);
  const BackwardResult br = net_backward(m.net, fr.cache, t);
  BbbEvaluation e;
  e.nll = br.loss;
  e.error_rate = t.labels.empty() ? 0.0 : error_rate(fr.output, t.labels);
  const double w = cfg.kl_scale / static_cast<double>(dataset_size);
  const double p2 = cfg.prior_std * cfg.prior_std;
  e.grad.resize(bbb_params(m).size());
  Index at = 0;
  for (std::size_t l = 0; l < m.net.layers.size(); ++l) {
    const auto& d = std::get<DenseLayer>(m.net.layers[l]);
    const LayerGradient& g = br.grads[l];
    e.kl += kl_factorial_gaussian(d.dist, cfg.prior_std);
    const Index n = d.dist.mean.size();
    for (Index i = 0; i < n; ++i) {
      const double mu = d.dist.mean.data()[i], s = d.dist.scale.data()[i], r = m.rho[l].data()[i];
      e.grad(at + i) = g.d_mean.data()[i] + w * mu / p2;
      e.grad(at + n + i) = (g.d_scale.data()[i] + w * (-1 / s + s / p2)) * logistic(r);
    }
    at += 2 * n;
    e.grad.segment(at, d.bias.size()) = g.d_bias;
    at += d.bias.size();
  }
  e.objective = e.nll + w * e.kl;
  return e;
}

/// One optimiser step on a mini-batch; returns the pre-step evaluation.
inline BbbEvaluation bbb_step(BbbModel& m, const Matrix& x, const Targets& t, const BbbConfig& cfg,
                              OptimizerState& opt, const RngKey& key, Index dataset_size) {
  const NetNoise noise = sample_noise(m.net, x.rows(), cfg.strategy, key);
  BbbEvaluation e = bbb_evaluate(m, x, t, cfg, noise, dataset_size);
  Vector p = bbb_params(m);
  optimizer_step(opt, p, e.grad);
  set_bbb_params(m, p);
  return e;
}

/// Trains in place; step i uses key.split(i) (mini-batch from split 0,
/// perturbation noise from split 1). Logged loss is the mini-batch objective
/// before the step.
inline RunLog bbb_train(BbbModel& m, const Dataset& data, const BbbConfig& cfg, const RngKey& key) {
  cfg.validate();
  check_bbb_network(m.net);
  if (!data.is_classification()) throw ConfigError("bbb: dataset must have class labels");
  OptimizerState opt = make_optimizer(cfg.optimizer, cfg.learning_rate);
  RunLog log;
  log.metric = "loss";
  for (long i = 0; i < cfg.steps; ++i) {
    const auto start = std::chrono::steady_clock::now();
    const RngKey k = key.split(static_cast<std::uint64_t>(i));
    const auto idx = sample_indices(k.split(0), data.size(), cfg.batch_size, cfg.with_replacement);
    const BbbEvaluation e = bbb_step(m, data.rows(idx), data.targets_for(idx), cfg, opt, k.split(1), data.size());
    RunRecord r;
    r.iter = i;
    r.loss = e.objective;
    r.error_rate = e.error_rate;
    r.samples_used = static_cast<long long>(i + 1) * cfg.batch_size;
    if (cfg.wall_clock)
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    r.strategy = to_string(cfg.strategy);
    r.seed = key.root_seed();
    log.records.push_back(std::move(r));
  }
  return log;
}

}  // namespace flipout
