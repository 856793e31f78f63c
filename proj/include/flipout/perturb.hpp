#pragma once

// Weight-perturbation distributions and the per-mini-batch sampling
// strategies: one shared sample, flipout (shared base times per-example
// rank-one sign flips), fully independent samples, and the local
// reparameterization trick for dense layers.
//
// Layout convention: a weight matrix is [d_in x d_out] and a mini-batch is
// [N x d_in] with one example per row, so pre-activations are X W. The
// per-example flipout weight is W_n = mean + base o (s_n r_n^T), where s_n
// (length d_in) is row n of S and r_n (length d_out) is row n of R.

#include "flipout/core.hpp"
#include "flipout/prng.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace flipout {

enum class Mode { additive_gaussian, multiplicative_gaussian, dropconnect_half };

enum class Strategy { none, shared, flipout, independent, lrt };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::additive_gaussian: return "additive_gaussian";
    case Mode::multiplicative_gaussian: return "multiplicative_gaussian";
    case Mode::dropconnect_half: return "dropconnect_half";
  }
  return "?";
}

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::none: return "none";
    case Strategy::shared: return "shared";
    case Strategy::flipout: return "flipout";
    case Strategy::independent: return "independent";
    case Strategy::lrt: return "lrt";
  }
  return "?";
}

inline Mode parse_mode(std::string_view text) {
  if (text == "additive_gaussian" || text == "additive") return Mode::additive_gaussian;
  if (text == "multiplicative_gaussian" || text == "multiplicative") return Mode::multiplicative_gaussian;
  if (text == "dropconnect_half" || text == "dropconnect") return Mode::dropconnect_half;
  throw ConfigError("unknown perturbation mode '" + std::string(text) + "'");
}

inline Strategy parse_strategy(std::string_view text) {
  if (text == "none") return Strategy::none;
  if (text == "shared") return Strategy::shared;
  if (text == "flipout") return Strategy::flipout;
  if (text == "independent") return Strategy::independent;
  if (text == "lrt") return Strategy::lrt;
  throw ConfigError("unknown strategy '" + std::string(text) + "'");
}

/// Perturbation distribution of one weight matrix. For dropconnect_half the
/// mean holds the halved raw weights and `scale` is ignored.
struct WeightDist {
  Matrix mean;
  Matrix scale;
  Mode mode = Mode::additive_gaussian;

  Index rows() const { return mean.rows(); }
  Index cols() const { return mean.cols(); }

  void validate() const {
    require_shape(scale.rows() == mean.rows() && scale.cols() == mean.cols(),
                  "WeightDist: scale " + shape_of(scale) + " does not match mean " + shape_of(mean));
    if (!mean.allFinite()) throw ConfigError("WeightDist: non-finite mean");
    if (!(scale.array() >= Real(0)).all() || !scale.allFinite())
      throw ConfigError("WeightDist: scale entries must be finite and >= 0");
  }
};

inline WeightDist make_dist(Matrix mean, Real scale_value, Mode mode) {
  Matrix scale = Matrix::Constant(mean.rows(), mean.cols(), scale_value);
  WeightDist d{std::move(mean), std::move(scale), mode};
  d.validate();
  return d;
}

/// One draw of the shared base perturbation. `noise` keeps the raw draw
/// (epsilon for the Gaussian modes, the sign matrix E for dropconnect) so
/// that gradients can be chained back to the distribution parameters.
struct BasePerturbation {
  Matrix delta;
  Matrix noise;
};

/// Per-example sign vectors: R is [N x d_out], S is [N x d_in].
struct SignPair {
  Matrix r;
  Matrix s;

  Index batch() const { return r.rows(); }
};

// Counts dense matrix products made through `matmul` on this thread. The
// cost-model checks read it around a forward call.
namespace detail {
inline std::uint64_t& matmul_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}
}  // namespace detail

struct MatmulCounter {
  static void reset() { detail::matmul_counter() = 0; }
  static std::uint64_t count() { return detail::matmul_counter(); }
};

template <class A, class B>
Matrix matmul(const A& a, const B& b) {
  ++detail::matmul_counter();
  Matrix out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

inline BasePerturbation sample_base(const WeightDist& dist, const RngKey& key) {
  BasePerturbation base;
  switch (dist.mode) {
    case Mode::additive_gaussian:
      base.noise = sample_gaussian(key, dist.rows(), dist.cols());
      base.delta = dist.scale.cwiseProduct(base.noise);
      break;
    case Mode::multiplicative_gaussian:
      base.noise = sample_gaussian(key, dist.rows(), dist.cols());
      base.delta = dist.mean.cwiseProduct(dist.scale).cwiseProduct(base.noise);
      break;
    case Mode::dropconnect_half:
      base.noise = sample_signs(key, dist.rows(), dist.cols());
      base.delta = dist.mean.cwiseProduct(base.noise);
      break;
  }
  return base;
}

/// Recomputes the base delta for a given raw draw under (possibly updated)
/// distribution parameters.
inline Matrix base_delta(const WeightDist& dist, const Matrix& noise) {
  switch (dist.mode) {
    case Mode::additive_gaussian: return dist.scale.cwiseProduct(noise);
    case Mode::multiplicative_gaussian: return dist.mean.cwiseProduct(dist.scale).cwiseProduct(noise);
    case Mode::dropconnect_half: return dist.mean.cwiseProduct(noise);
  }
  return {};
}

inline SignPair sample_sign_pair(const RngKey& key, Index batch, Index d_in, Index d_out) {
  return {sample_signs(key.split(0), batch, d_out), sample_signs(key.split(1), batch, d_in)};
}

namespace detail {

inline void check_input(const Matrix& x, const WeightDist& dist, const char* op) {
  require_shape(x.cols() == dist.rows(), std::string(op) + ": input " + shape_of(x) +
                                             " does not conform to weights " + shape_of(dist.mean));
}

inline void check_base(const BasePerturbation& base, const WeightDist& dist, const char* op) {
  require_shape(base.delta.rows() == dist.rows() && base.delta.cols() == dist.cols(),
                std::string(op) + ": base " + shape_of(base.delta) + " does not match weights " +
                    shape_of(dist.mean));
}

inline void check_signs(const SignPair& signs, Index batch, const WeightDist& dist, const char* op) {
  require_shape(signs.r.rows() == batch && signs.s.rows() == batch && signs.r.cols() == dist.cols() &&
                    signs.s.cols() == dist.rows(),
                std::string(op) + ": sign matrices R " + shape_of(signs.r) + ", S " + shape_of(signs.s) +
                    " do not match batch " + std::to_string(batch) + " and weights " + shape_of(dist.mean));
}

}  // namespace detail

/// X (mean + base): every example sees the same weight sample.
inline Matrix forward_shared(const Matrix& x, const WeightDist& dist, const BasePerturbation& base) {
  detail::check_input(x, dist, "forward_shared");
  detail::check_base(base, dist, "forward_shared");
  return matmul(x, dist.mean + base.delta);
}

/// X mean + ((X o S) base) o R. Two products, independent of N.
inline Matrix forward_flipout(const Matrix& x, const WeightDist& dist, const BasePerturbation& base,
                              const SignPair& signs) {
  detail::check_input(x, dist, "forward_flipout");
  detail::check_base(base, dist, "forward_flipout");
  detail::check_signs(signs, x.rows(), dist, "forward_flipout");
  Matrix out = matmul(x, dist.mean);
  const Matrix flipped = matmul(x.cwiseProduct(signs.s), base.delta);
  out += flipped.cwiseProduct(signs.r);
  return out;
}

/// Row n uses its own weight sample drawn from keys[n].
inline Matrix forward_independent(const Matrix& x, const WeightDist& dist, const std::vector<RngKey>& keys) {
  detail::check_input(x, dist, "forward_independent");
  require_shape(static_cast<Index>(keys.size()) == x.rows(),
                "forward_independent: " + std::to_string(keys.size()) + " keys for batch of " +
                    std::to_string(x.rows()));
  Matrix out = matmul(x, dist.mean);
  for (Index n = 0; n < x.rows(); ++n) {
    const BasePerturbation base = sample_base(dist, keys[static_cast<std::size_t>(n)]);
    out.row(n).noalias() += x.row(n) * base.delta;
  }
  return out;
}

/// Per-weight variance of the Gaussian perturbation: sigma^2, or
/// sigma^2 mean^2 for the multiplicative mode.
inline Matrix weight_variance(const WeightDist& dist) {
  switch (dist.mode) {
    case Mode::additive_gaussian: return dist.scale.cwiseAbs2();
    case Mode::multiplicative_gaussian: return dist.scale.cwiseProduct(dist.mean).cwiseAbs2();
    case Mode::dropconnect_half: break;
  }
  throw ConfigError("local reparameterization requires a Gaussian perturbation mode");
}

/// Activations of the local reparameterization trick: mean X mu plus
/// sqrt(X^2 var) o noise, with `noise` an [N x d_out] standard-normal draw.
/// `stddev_out`, when given, receives sqrt(X^2 var) for the backward pass.
inline Matrix forward_lrt_with_noise(const Matrix& x, const WeightDist& dist, const Matrix& noise,
                                     Matrix* stddev_out = nullptr) {
  detail::check_input(x, dist, "forward_lrt");
  const Matrix var = weight_variance(dist);
  require_shape(noise.rows() == x.rows() && noise.cols() == dist.cols(),
                "forward_lrt: noise " + shape_of(noise) + " does not match output " +
                    shape_string(x.rows(), dist.cols()));
  Matrix out = matmul(x, dist.mean);
  const Matrix stddev = matmul(x.cwiseAbs2(), var).cwiseSqrt();
  out += stddev.cwiseProduct(noise);
  if (stddev_out) *stddev_out = stddev;
  return out;
}

inline Matrix forward_lrt(const Matrix& x, const WeightDist& dist, const RngKey& key) {
  if (dist.mode == Mode::dropconnect_half)
    throw ConfigError("forward_lrt: dropconnect mode has no local reparameterization");
  return forward_lrt_with_noise(x, dist, sample_gaussian(key, x.rows(), dist.cols()));
}

/// Everything backward_flipout needs from the forward call.
struct FlipoutCache {
  Matrix x;
  SignPair signs;
  Matrix mean;
  Matrix base;
};

struct FlipoutGradients {
  Matrix grad_mean;  // direct path X^T G only
  Matrix grad_base;
  Matrix grad_x;
};

inline FlipoutGradients backward_flipout(const Matrix& grad_out, const FlipoutCache& cache) {
  const Index n = cache.x.rows();
  require_shape(grad_out.rows() == n && grad_out.cols() == cache.mean.cols(),
                "backward_flipout: grad_out " + shape_of(grad_out) + " does not match forward output " +
                    shape_string(n, cache.mean.cols()));
  require_shape(cache.mean.rows() == cache.x.cols() && cache.base.rows() == cache.mean.rows() &&
                    cache.base.cols() == cache.mean.cols(),
                "backward_flipout: inconsistent cache");
  require_shape(cache.signs.r.rows() == n && cache.signs.s.rows() == n &&
                    cache.signs.r.cols() == cache.mean.cols() && cache.signs.s.cols() == cache.mean.rows(),
                "backward_flipout: sign matrices do not match cache");
  const Matrix g_r = grad_out.cwiseProduct(cache.signs.r);
  FlipoutGradients out;
  out.grad_mean = matmul(cache.x.transpose(), grad_out);
  out.grad_base = matmul(cache.x.cwiseProduct(cache.signs.s).transpose(), g_r);
  out.grad_x = matmul(grad_out, cache.mean.transpose());
  out.grad_x += matmul(g_r, cache.base.transpose()).cwiseProduct(cache.signs.s);
  return out;
}

/// Gradients of the distribution parameters given the gradient reaching the
/// mean directly and the gradient reaching the base delta.
struct ParamGradients {
  Matrix d_mean;
  Matrix d_scale;
};

inline ParamGradients chain_to_params(const WeightDist& dist, const Matrix& noise, const Matrix& grad_mean_direct,
                                      const Matrix& grad_base) {
  ParamGradients out;
  switch (dist.mode) {
    case Mode::additive_gaussian:
      out.d_mean = grad_mean_direct;
      out.d_scale = grad_base.cwiseProduct(noise);
      break;
    case Mode::multiplicative_gaussian:
      out.d_mean = grad_mean_direct + grad_base.cwiseProduct(dist.scale).cwiseProduct(noise);
      out.d_scale = grad_base.cwiseProduct(dist.mean).cwiseProduct(noise);
      break;
    case Mode::dropconnect_half:
      out.d_mean = grad_mean_direct + grad_base.cwiseProduct(noise);
      out.d_scale = Matrix::Zero(dist.rows(), dist.cols());
      break;
  }
  return out;
}

/// Perturbation noise drawn for one layer and one mini-batch. Which members
/// are populated depends on the strategy.
struct LayerNoise {
  BasePerturbation base;                       // shared, flipout
  SignPair signs;                              // flipout
  std::vector<RngKey> example_keys;            // independent
  std::vector<BasePerturbation> example_bases; // independent, filled when cached
  Matrix activation_noise;                     // lrt
};

struct LinearGradients {
  Matrix d_input;
  Matrix d_mean;
  Matrix d_scale;
};

/// The shared base delta under the current parameters (the raw draw is
/// what the noise record owns, so parameter updates are picked up).
inline BasePerturbation current_base(const WeightDist& dist, const LayerNoise& noise) {
  require_shape(noise.base.noise.rows() == dist.rows() && noise.base.noise.cols() == dist.cols(),
                "base perturbation " + shape_of(noise.base.noise) + " does not match weights " + shape_of(dist.mean));
  return {base_delta(dist, noise.base.noise), noise.base.noise};
}

inline BasePerturbation example_base(const WeightDist& dist, const LayerNoise& noise, Index n) {
  if (!noise.example_bases.empty()) {
    const BasePerturbation& cached = noise.example_bases[static_cast<std::size_t>(n)];
    return {base_delta(dist, cached.noise), cached.noise};
  }
  return sample_base(dist, noise.example_keys[static_cast<std::size_t>(n)]);
}

/// Pre-activation X W under the given strategy (bias not included).
/// `lrt_stddev` receives sqrt(X^2 var) when the strategy is lrt.
inline Matrix perturbed_linear_forward(const Matrix& x, const WeightDist& dist, Strategy strategy,
                                       const LayerNoise& noise, Matrix* lrt_stddev = nullptr) {
  switch (strategy) {
    case Strategy::none:
      detail::check_input(x, dist, "forward");
      return matmul(x, dist.mean);
    case Strategy::shared: return forward_shared(x, dist, current_base(dist, noise));
    case Strategy::flipout: return forward_flipout(x, dist, current_base(dist, noise), noise.signs);
    case Strategy::independent: {
      detail::check_input(x, dist, "forward_independent");
      const std::size_t have = noise.example_bases.empty() ? noise.example_keys.size() : noise.example_bases.size();
      require_shape(static_cast<Index>(have) == x.rows(),
                    "forward_independent: " + std::to_string(have) + " samples for batch of " +
                        std::to_string(x.rows()));
      Matrix out = matmul(x, dist.mean);
      for (Index n = 0; n < x.rows(); ++n) out.row(n).noalias() += x.row(n) * example_base(dist, noise, n).delta;
      return out;
    }
    case Strategy::lrt: return forward_lrt_with_noise(x, dist, noise.activation_noise, lrt_stddev);
  }
  return {};
}

/// Backward of perturbed_linear_forward, chained to the distribution
/// parameters.
inline LinearGradients perturbed_linear_backward(const Matrix& grad_out, const Matrix& x, const WeightDist& dist,
                                                 Strategy strategy, const LayerNoise& noise,
                                                 const Matrix& lrt_stddev = Matrix()) {
  require_shape(grad_out.rows() == x.rows() && grad_out.cols() == dist.cols(),
                "backward: grad_out " + shape_of(grad_out) + " does not match " + shape_string(x.rows(), dist.cols()));
  LinearGradients out;
  switch (strategy) {
    case Strategy::none:
      out.d_input = matmul(grad_out, dist.mean.transpose());
      out.d_mean = matmul(x.transpose(), grad_out);
      out.d_scale = Matrix::Zero(dist.rows(), dist.cols());
      break;
    case Strategy::shared: {
      out.d_input = matmul(grad_out, (dist.mean + base_delta(dist, noise.base.noise)).transpose());
      const Matrix g = matmul(x.transpose(), grad_out);
      ParamGradients p = chain_to_params(dist, noise.base.noise, g, g);
      out.d_mean = std::move(p.d_mean);
      out.d_scale = std::move(p.d_scale);
      break;
    }
    case Strategy::flipout: {
      FlipoutGradients g = backward_flipout(grad_out, FlipoutCache{x, noise.signs, dist.mean, base_delta(dist, noise.base.noise)});
      ParamGradients p = chain_to_params(dist, noise.base.noise, g.grad_mean, g.grad_base);
      out.d_input = std::move(g.grad_x);
      out.d_mean = std::move(p.d_mean);
      out.d_scale = std::move(p.d_scale);
      break;
    }
    case Strategy::independent: {
      // Shared X^T G and G mean^T terms first, then per-example corrections.
      out.d_input = matmul(grad_out, dist.mean.transpose());
      out.d_mean = matmul(x.transpose(), grad_out);
      out.d_scale = Matrix::Zero(dist.rows(), dist.cols());
      const Matrix zero = Matrix::Zero(dist.rows(), dist.cols());
      for (Index n = 0; n < x.rows(); ++n) {
        const BasePerturbation base = example_base(dist, noise, n);
        out.d_input.row(n).noalias() += grad_out.row(n) * base.delta.transpose();
        const Matrix g = x.row(n).transpose() * grad_out.row(n);
        const ParamGradients p = chain_to_params(dist, base.noise, zero, g);
        if (dist.mode != Mode::additive_gaussian) out.d_mean += p.d_mean;
        out.d_scale += p.d_scale;
      }
      break;
    }
    case Strategy::lrt: {
      const Matrix var = weight_variance(dist);
      // d loss / d variance-sum, zero where the activation has no spread.
      Matrix g_var = Matrix::Zero(grad_out.rows(), grad_out.cols());
      for (Index i = 0; i < g_var.rows(); ++i)
        for (Index j = 0; j < g_var.cols(); ++j)
          if (lrt_stddev(i, j) > Real(0))
            g_var(i, j) = grad_out(i, j) * noise.activation_noise(i, j) / (Real(2) * lrt_stddev(i, j));
      const Matrix x2 = x.cwiseAbs2();
      const Matrix g_weight_var = matmul(x2.transpose(), g_var);
      out.d_input = matmul(grad_out, dist.mean.transpose());
      out.d_input += Real(2) * x.cwiseProduct(matmul(g_var, var.transpose()));
      out.d_mean = matmul(x.transpose(), grad_out);
      if (dist.mode == Mode::additive_gaussian) {
        out.d_scale = Real(2) * g_weight_var.cwiseProduct(dist.scale);
      } else {
        out.d_mean += Real(2) * g_weight_var.cwiseProduct(dist.scale.cwiseAbs2()).cwiseProduct(dist.mean);
        out.d_scale = Real(2) * g_weight_var.cwiseProduct(dist.scale).cwiseProduct(dist.mean.cwiseAbs2());
      }
      break;
    }
  }
  return out;
}

}  // namespace flipout
