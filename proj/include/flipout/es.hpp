#pragma once

// Evolution strategies with flipout-vectorised sample evaluation.
//
// Perturbations have entries of standard deviation sigma and the update
// direction is divided by sigma^2 times the sample count. Fitness values are
// used raw (no ranking or baseline).

#include "flipout/data.hpp"
#include "flipout/net.hpp"
#include "flipout/optim.hpp"
#include "flipout/parallel.hpp"
#include "flipout/runlog.hpp"

#include <chrono>
#include <functional>

namespace flipout {

enum class EsSampling { flipout, independent };
enum class EsFitness { neg_cross_entropy, accuracy };

inline std::string to_string(EsSampling s) { return s == EsSampling::flipout ? "flipout" : "independent"; }
inline std::string to_string(EsFitness f) { return f == EsFitness::accuracy ? "accuracy" : "neg_cross_entropy"; }

inline EsSampling parse_es_sampling(std::string_view s) {
  if (s == "flipout") return EsSampling::flipout;
  if (s == "independent") return EsSampling::independent;
  throw ConfigError("unknown ES sampling '" + std::string(s) + "'");
}

inline EsFitness parse_es_fitness(std::string_view s) {
  if (s == "neg_cross_entropy") return EsFitness::neg_cross_entropy;
  if (s == "accuracy") return EsFitness::accuracy;
  throw ConfigError("unknown ES fitness '" + std::string(s) + "'");
}

struct EsConfig {
  double sigma = 0.1;
  double learning_rate = 0.01;
  Index workers = 40;     // M
  Index flip_batch = 40;  // N
  Index samples_per_update = 1600;
  long iterations = 100;
  OptimizerKind optimizer = OptimizerKind::adam;
  EsSampling sampling = EsSampling::flipout;
  EsFitness fitness = EsFitness::neg_cross_entropy;
  int threads = 1;
  bool wall_clock = false;

  void validate() const {
    if (!(sigma > 0)) throw ConfigError("es: sigma must be > 0");
    if (!(learning_rate >= 0)) throw ConfigError("es: learning_rate must be >= 0");
    if (workers < 1 || flip_batch < 1) throw ConfigError("es: workers and flip_batch must be >= 1");
    if (samples_per_update != workers * flip_batch)
      throw ConfigError("es: samples_per_update must equal workers * flip_batch");
    if (iterations < 0) throw ConfigError("es: iterations must be >= 0");
  }
};

/// (1 / (M sigma^2)) sum_m F_m eps_m.
inline Matrix es_gradient(const std::vector<double>& fitness, const std::vector<Matrix>& perturbations, double sigma) {
  require_shape(fitness.size() == perturbations.size() && !fitness.empty(),
                "es_gradient: " + std::to_string(fitness.size()) + " fitness values for " +
                    std::to_string(perturbations.size()) + " perturbations");
  Matrix out = Matrix::Zero(perturbations[0].rows(), perturbations[0].cols());
  for (std::size_t m = 0; m < fitness.size(); ++m) {
    require_shape(perturbations[m].rows() == out.rows() && perturbations[m].cols() == out.cols(),
                  "es_gradient: perturbation shapes differ");
    out += static_cast<Real>(fitness[m]) * perturbations[m];
  }
  return out / static_cast<Real>(static_cast<double>(fitness.size()) * sigma * sigma);
}

/// (1 / (M N sigma^2)) sum_m base_m o (S_m^T diag(F_m) R_m): the sum over n of
/// F_mn (base_m o s_mn r_mn^T) without forming the N perturbations.
inline Matrix es_gradient_flipout(const Matrix& fitness, const std::vector<Matrix>& bases,
                                  const std::vector<SignPair>& signs, double sigma) {
  const Index M = fitness.rows(), N = fitness.cols();
  require_shape(static_cast<Index>(bases.size()) == M && static_cast<Index>(signs.size()) == M && M > 0,
                "es_gradient_flipout: fitness " + shape_of(fitness) + " needs one base and sign pair per worker");
  Matrix out = Matrix::Zero(bases[0].rows(), bases[0].cols());
  for (Index m = 0; m < M; ++m) {
    const Matrix& base = bases[static_cast<std::size_t>(m)];
    const SignPair& sp = signs[static_cast<std::size_t>(m)];
    require_shape(base.rows() == out.rows() && base.cols() == out.cols(), "es_gradient_flipout: base shapes differ");
    require_shape(sp.s.rows() == N && sp.r.rows() == N && sp.s.cols() == base.rows() && sp.r.cols() == base.cols(),
                  "es_gradient_flipout: signs S " + shape_of(sp.s) + ", R " + shape_of(sp.r) +
                      " do not match base " + shape_of(base) + " and " + std::to_string(N) + " samples");
    const Matrix weighted = sp.r.array().colwise() * fitness.row(m).transpose().array();
    out += base.cwiseProduct(sp.s.transpose() * weighted);
  }
  return out / static_cast<Real>(static_cast<double>(M * N) * sigma * sigma);
}

// ---------------------------------------------------------------------------
// Parameter-vector ES.

using FitnessFn = std::function<double(const Vector&)>;

/// Maximises `fitness` starting from `params` (updated in place). Worker m at
/// iteration i draws from key.split(i).split(m): base from split 0, signs
/// from split 1. Under independent sampling, sample n of worker m has its
/// own perturbation from split 2 of that key, split n.
inline RunLog es_train(Vector& params, const FitnessFn& fitness, const EsConfig& cfg, const RngKey& key) {
  cfg.validate();
  const Index P = params.size(), M = cfg.workers, N = cfg.flip_batch;
  OptimizerState opt = make_optimizer(cfg.optimizer, cfg.learning_rate);
  RunLog log;
  log.metric = "fitness_mean";
  for (long it = 0; it < cfg.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    const RngKey ik = key.split(static_cast<std::uint64_t>(it));
    std::vector<Matrix> directions(static_cast<std::size_t>(M));
    std::vector<double> sums(static_cast<std::size_t>(M));
    parallel_for(static_cast<std::size_t>(M), cfg.threads, [&](std::size_t m) {
      const RngKey wk = ik.split(m);
      Matrix f(1, N);
      if (cfg.sampling == EsSampling::flipout) {
        const Matrix base = static_cast<Real>(cfg.sigma) * sample_gaussian(wk.split(0), P, 1);
        SignPair sp = sample_sign_pair(wk.split(1), N, P, 1);
        for (Index n = 0; n < N; ++n) {
          const Vector delta = base.col(0).cwiseProduct(sp.s.row(n).transpose()) * sp.r(n, 0);
          f(0, n) = fitness(params + delta);
        }
        directions[m] = es_gradient_flipout(f, {base}, {sp}, cfg.sigma);
      } else {
        std::vector<Matrix> eps;
        std::vector<double> fv;
        for (Index n = 0; n < N; ++n) {
          eps.push_back(static_cast<Real>(cfg.sigma) * sample_gaussian(wk.split(2).split(n), P, 1));
          fv.push_back(fitness(params + eps.back().col(0)));
          f(0, n) = fv.back();
        }
        directions[m] = es_gradient(fv, eps, cfg.sigma);
      }
      sums[m] = f.sum();
    });
    Matrix direction = Matrix::Zero(P, 1);
    double total = 0;
    for (Index m = 0; m < M; ++m) {
      direction += directions[static_cast<std::size_t>(m)];
      total += sums[static_cast<std::size_t>(m)];
    }
    direction /= static_cast<Real>(M);
    const Vector descent = -direction.col(0);
    optimizer_step(opt, params, descent);
    RunRecord r;
    r.iter = it;
    r.loss = total / static_cast<double>(M * N);
    r.samples_used = static_cast<long long>(it + 1) * cfg.samples_per_update;
    if (cfg.wall_clock)
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    r.strategy = to_string(cfg.sampling);
    r.seed = key.root_seed();
    log.records.push_back(std::move(r));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Network ES on a classification dataset. Weight matrices are perturbed;
// biases are held fixed. Each worker evaluates its N samples on N examples
// drawn for it, sample n on example n, in one batched forward pass.

inline Vector es_fitness_values(EsFitness kind, const Matrix& logits, const std::vector<int>& labels) {
  Vector f(logits.rows());
  if (kind == EsFitness::neg_cross_entropy) {
    Targets t;
    t.labels = labels;
    f = -example_losses(Loss::softmax_cross_entropy, logits, t);
  } else {
    for (Index n = 0; n < logits.rows(); ++n) {
      Index arg;
      logits.row(n).maxCoeff(&arg);
      f(n) = arg == labels[static_cast<std::size_t>(n)] ? 1 : 0;
    }
  }
  return f;
}

/// Mean-weight error rate on the whole dataset.
inline double dataset_error_rate(const Network& net, const Dataset& data) {
  return error_rate(net_forward(net, data.inputs, Strategy::none, RngKey(0)).output, data.labels);
}

/// The network as ES sees it: every weight matrix gets additive noise of
/// standard deviation sigma.
inline Network es_search_network(const Network& net, double sigma) {
  Network out = net;
  for (auto& l : out.layers) {
    if (!std::holds_alternative<DenseLayer>(l)) throw ConfigError("es: only dense layers are supported");
    WeightDist& d = layer_dist(l);
    d.mode = Mode::additive_gaussian;
    d.scale = Matrix::Constant(d.rows(), d.cols(), static_cast<Real>(sigma));
  }
  return out;
}

/// Trains the weight means in place. Worker m at iteration i uses
/// key.split(i).split(m): examples from split 0, perturbations from split 1.
/// Logged error_rate is the mean network's error on `data` after the update.
inline RunLog es_train(Network& net, const Dataset& data, const EsConfig& cfg, const RngKey& key) {
  cfg.validate();
  if (!data.is_classification()) throw ConfigError("es: dataset must have class labels");
  if (net.loss != Loss::softmax_cross_entropy) throw ConfigError("es: network must end in softmax cross-entropy");
  const Index M = cfg.workers, N = cfg.flip_batch;
  const Strategy strategy = cfg.sampling == EsSampling::flipout ? Strategy::flipout : Strategy::independent;
  const std::size_t L = net.layers.size();
  std::vector<Index> offsets{0};
  for (const auto& l : net.layers) offsets.push_back(offsets.back() + layer_dist(l).mean.size());
  OptimizerState opt = make_optimizer(cfg.optimizer, cfg.learning_rate);
  RunLog log;
  log.metric = "fitness_mean";
  for (long it = 0; it < cfg.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    const RngKey ik = key.split(static_cast<std::uint64_t>(it));
    const Network search = es_search_network(net, cfg.sigma);
    std::vector<std::vector<Matrix>> directions(static_cast<std::size_t>(M));
    std::vector<double> sums(static_cast<std::size_t>(M));
    parallel_for(static_cast<std::size_t>(M), cfg.threads, [&](std::size_t m) {
      const RngKey wk = ik.split(m);
      const auto idx = sample_indices(wk.split(0), data.size(), N, N > data.size());
      std::vector<int> labels;
      for (Index i : idx) labels.push_back(data.labels[static_cast<std::size_t>(i)]);
      const NetNoise noise = sample_noise(search, N, strategy, wk.split(1));
      const Matrix logits = net_forward_sampled(search, data.rows(idx), noise).output;
      const Vector f = es_fitness_values(cfg.fitness, logits, labels);
      auto& dir = directions[m];
      for (std::size_t l = 0; l < L; ++l) {
        const WeightDist& dist = layer_dist(search.layers[l]);
        const LayerNoise& ln = noise.layers[l];
        if (strategy == Strategy::flipout) {
          dir.push_back(es_gradient_flipout(f.transpose(), {ln.base.delta}, {ln.signs}, cfg.sigma));
        } else {
          std::vector<Matrix> eps;
          for (Index n = 0; n < N; ++n) eps.push_back(example_base(dist, ln, n).delta);
          dir.push_back(es_gradient(std::vector<double>(f.data(), f.data() + N), eps, cfg.sigma));
        }
      }
      sums[m] = f.sum();
    });
    Vector descent = Vector::Zero(offsets.back());
    double total = 0;
    for (Index m = 0; m < M; ++m) {
      for (std::size_t l = 0; l < L; ++l) {
        const Matrix& d = directions[static_cast<std::size_t>(m)][l];
        descent.segment(offsets[l], d.size()) -= Eigen::Map<const Vector>(d.data(), d.size());
      }
      total += sums[static_cast<std::size_t>(m)];
    }
    descent /= static_cast<Real>(M);
    Vector means(offsets.back());
    for (std::size_t l = 0; l < L; ++l) {
      const Matrix& w = layer_dist(net.layers[l]).mean;
      means.segment(offsets[l], w.size()) = Eigen::Map<const Vector>(w.data(), w.size());
    }
    optimizer_step(opt, means, descent);
    for (std::size_t l = 0; l < L; ++l) {
      Matrix& w = layer_dist(net.layers[l]).mean;
      Eigen::Map<Vector>(w.data(), w.size()) = means.segment(offsets[l], w.size());
    }
    RunRecord r;
    r.iter = it;
    r.loss = total / static_cast<double>(M * N);
    r.error_rate = dataset_error_rate(net, data);
    r.samples_used = static_cast<long long>(it + 1) * cfg.samples_per_update;
    if (cfg.wall_clock)
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    r.strategy = to_string(cfg.sampling);
    r.seed = key.root_seed();
    log.records.push_back(std::move(r));
  }
  return log;
}

}  // namespace flipout
