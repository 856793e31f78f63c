#pragma once

// Gradient-variance measurements.
//
// estimate_variance: for each run, `repeats` independent mini-batch
// gradients are drawn; the per-weight variance over repeats (divided by
// `repeats`) is averaged over the weights of a matrix, and the run values
// are summarised by a Student-t interval. By default every repeat draws a
// fresh mini-batch and fresh perturbation noise, so the result is the total
// (data + perturbation) variance of the mini-batch gradient; with
// freeze_batch the mini-batch is drawn once per run and only the
// perturbation term remains.
//
// estimate_decomposition: nested Monte Carlo for the per-example variance
// alpha and the cross-example covariances beta (shared sign randomness
// given the base perturbation) and gamma (base perturbation only), so that
// a mini-batch of N i.i.d. examples has gradient variance
//   independent  alpha/N
//   shared       alpha/N + (N-1)/N (beta + gamma)
//   flipout      alpha/N + (N-1)/N gamma

#include "flipout/data.hpp"
#include "flipout/net.hpp"
#include "flipout/parallel.hpp"
#include "flipout/stats.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace flipout {

struct VarianceOptions {
  int repeats = 200;
  int runs = 50;
  bool freeze_batch = false;
  bool with_replacement = false;
  int threads = 1;
  double level = 0.90;
};

struct GradStats {
  std::string layer;
  Strategy strategy = Strategy::none;
  Index batch = 0;
  double mean_variance = 0;
  double ci_low = 0;
  double ci_high = 0;
  double se = 0;
  int repeats = 0;
  int runs = 0;
  // Same protocol restricted to the first entry of the matrix.
  double entry_variance = 0;
};

namespace detail {

inline std::vector<Vector> view_gradients(const Network& net, const Matrix& x, const Targets& t, Strategy strategy,
                                          const RngKey& key, const std::vector<WeightView>& views) {
  const ForwardResult fr = net_forward(net, x, strategy, key);
  const BackwardResult br = net_backward(net, fr.cache, t);
  std::vector<Vector> out;
  out.reserve(views.size());
  for (const WeightView& v : views) {
    const Matrix block = view_block(br.grads, v);
    out.emplace_back(Eigen::Map<const Vector>(block.data(), block.size()));
  }
  return out;
}

inline std::vector<WeightView> select_views(const Network& net, const std::vector<std::string>& names) {
  const auto all = weight_views(net);
  if (names.empty()) return all;
  std::vector<WeightView> out;
  for (const auto& n : names) out.push_back(find_view(all, n));
  return out;
}

}  // namespace detail

/// One GradStats per selected weight matrix (all matrices when `layers` is
/// empty).
inline std::vector<GradStats> estimate_variance(const Network& net, const Dataset& data, Strategy strategy, Index batch,
                                                const VarianceOptions& opt, const RngKey& key,
                                                const std::vector<std::string>& layers = {}) {
  if (opt.repeats < 2 || opt.runs < 2) throw ConfigError("estimate_variance: repeats and runs must be >= 2");
  if (batch < 1) throw ConfigError("estimate_variance: batch size must be >= 1");
  if (!opt.with_replacement && batch > data.size())
    throw ConfigError("mini-batch of " + std::to_string(batch) + " exceeds dataset size " +
                      std::to_string(data.size()) + " (enable sampling with replacement)");
  const std::vector<WeightView> views = detail::select_views(net, layers);
  std::vector<std::vector<double>> run_values(views.size()), entry_values(views.size());
  std::vector<std::vector<Vector>> slots(static_cast<std::size_t>(opt.repeats));
  for (int r = 0; r < opt.runs; ++r) {
    const RngKey rk = key.split(static_cast<std::uint64_t>(r));
    std::vector<Index> frozen;
    if (opt.freeze_batch) frozen = sample_indices(rk.split(0), data.size(), batch, opt.with_replacement);
    parallel_for(static_cast<std::size_t>(opt.repeats), opt.threads, [&](std::size_t i) {
      const RngKey ik = rk.split(1).split(i);
      const std::vector<Index> idx =
          opt.freeze_batch ? frozen : sample_indices(ik.split(0), data.size(), batch, opt.with_replacement);
      slots[i] = detail::view_gradients(net, data.rows(idx), data.targets_for(idx), strategy, ik.split(1), views);
    });
    for (std::size_t v = 0; v < views.size(); ++v) {
      RunningMoments m;
      for (const auto& s : slots) m.add(s[v]);
      const Vector var = m.population_variance();
      run_values[v].push_back(var.mean());
      entry_values[v].push_back(var(0));
    }
  }
  std::vector<GradStats> out;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const Interval ci = t_interval(run_values[v], opt.level);
    GradStats g;
    g.layer = views[v].name;
    g.strategy = strategy;
    g.batch = batch;
    g.mean_variance = ci.mean;
    g.ci_low = ci.low;
    g.ci_high = ci.high;
    g.se = ci.se;
    g.repeats = opt.repeats;
    g.runs = opt.runs;
    g.entry_variance = mean_of(entry_values[v]);
    out.push_back(std::move(g));
  }
  return out;
}

inline GradStats estimate_variance(const Network& net, const Dataset& data, const std::string& layer, Strategy strategy,
                                   Index batch, const VarianceOptions& opt, const RngKey& key) {
  return estimate_variance(net, data, strategy, batch, opt, key, {layer}).front();
}

/// Rows sorted by (layer, strategy name, N), the order the CSV is written in.
inline void sort_stats(std::vector<GradStats>& rows) {
  std::sort(rows.begin(), rows.end(), [](const GradStats& a, const GradStats& b) {
    if (a.layer != b.layer) return a.layer < b.layer;
    if (a.strategy != b.strategy) return to_string(a.strategy) < to_string(b.strategy);
    return a.batch < b.batch;
  });
}

/// One estimate_variance call per (strategy, N). The mini-batch stream for a
/// given N is the same for every strategy.
inline std::vector<GradStats> variance_sweep(const Network& net, const Dataset& data,
                                             const std::vector<Strategy>& strategies, const std::vector<Index>& grid,
                                             const VarianceOptions& opt, const RngKey& key,
                                             const std::vector<std::string>& layers = {}) {
  std::vector<GradStats> rows;
  for (Strategy s : strategies)
    for (Index n : grid) {
      auto r = estimate_variance(net, data, s, n, opt, key.split(static_cast<std::uint64_t>(n)), layers);
      rows.insert(rows.end(), r.begin(), r.end());
    }
  sort_stats(rows);
  return rows;
}

// ---------------------------------------------------------------------------
// Decomposition.

struct DecompositionOptions {
  int n_outer = 200;
  int n_inner = 100;
  int n_pairs = 500;
  // Replace the inner Monte-Carlo loop by exhaustive enumeration of every
  // sign assignment (only for tiny layers).
  bool exact_inner = false;
  int threads = 1;
};

struct Decomposition {
  std::string source_layer;
  double alpha = 0, beta = 0, gamma = 0;
  double alpha_se = 0, beta_se = 0, gamma_se = 0;
  int n_outer = 0, n_inner = 0, n_pairs = 0;
  bool exact_inner = false;
};

namespace detail {

struct PairStats {
  double within = 0;    // mean over outer draws of the inner variance (both examples)
  double between = 0;   // variance over outer draws of the inner means (both examples)
  double cross = 0;     // mean over outer draws of the inner covariance
  double cross_means = 0;  // covariance over outer draws of the inner means
  Vector m1, m2;        // outer-averaged gradients of the two examples
};

inline Index sign_bits(const Network& net) {
  Index bits = 0;
  for (const auto& l : net.layers) {
    const WeightDist& d = layer_dist(l);
    bits += d.rows() + d.cols();
  }
  return bits;
}

// Fills row pair (2k, 2k+1) of every layer's signs with assignment k.
inline void enumerate_signs(const Network& net, Index combos, std::vector<LayerNoise>& layers) {
  Index bit = 0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const WeightDist& d = layer_dist(net.layers[l]);
    SignPair& sp = layers[l].signs;
    sp.r.resize(2 * combos, d.cols());
    sp.s.resize(2 * combos, d.rows());
    for (Index k = 0; k < combos; ++k) {
      Index b = bit;
      for (Index j = 0; j < d.cols(); ++j, ++b) sp.r(2 * k, j) = sp.r(2 * k + 1, j) = ((k >> b) & 1) ? 1 : -1;
      for (Index i = 0; i < d.rows(); ++i, ++b) sp.s(2 * k, i) = sp.s(2 * k + 1, i) = ((k >> b) & 1) ? 1 : -1;
    }
    bit += d.rows() + d.cols();
  }
}

inline Matrix duplicate_rows(const Matrix& m) {
  Matrix out(2 * m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) out.row(2 * i) = out.row(2 * i + 1) = m.row(i);
  return out;
}

}  // namespace detail

inline Decomposition estimate_decomposition(const Network& net, const Dataset& data, const std::string& layer,
                                            const DecompositionOptions& opt, const RngKey& key) {
  if (opt.n_outer < 2 || opt.n_pairs < 2 || (!opt.exact_inner && opt.n_inner < 2))
    throw ConfigError("estimate_decomposition: budgets must be >= 2");
  if (data.size() < 1) throw ConfigError("estimate_decomposition: empty dataset");
  const WeightView view = find_view(weight_views(net), layer);
  Index combos = opt.n_inner;
  if (opt.exact_inner) {
    const Index bits = detail::sign_bits(net);
    if (bits > 16)
      throw ConfigError("exact inner enumeration needs <= 16 sign bits, network has " + std::to_string(bits));
    combos = Index{1} << bits;
  }
  const double inner_div = opt.exact_inner ? static_cast<double>(combos) : static_cast<double>(combos - 1);
  const double outer_n = opt.n_outer;

  std::vector<detail::PairStats> pairs(static_cast<std::size_t>(opt.n_pairs));
  parallel_for(pairs.size(), opt.threads, [&](std::size_t p) {
    const RngKey pk = key.split(p);
    // Two i.i.d. examples (with replacement, as in an i.i.d. mini-batch).
    const std::vector<Index> idx = sample_indices(pk.split(0), data.size(), 2, true);
    Matrix xb(2 * combos, data.dim());
    std::vector<Index> rows_idx;
    for (Index k = 0; k < combos; ++k) {
      xb.row(2 * k) = data.inputs.row(idx[0]);
      xb.row(2 * k + 1) = data.inputs.row(idx[1]);
      rows_idx.push_back(idx[0]);
      rows_idx.push_back(idx[1]);
    }
    const Targets tb = data.targets_for(rows_idx);

    const Index dim = view.size();
    Matrix means1(opt.n_outer, dim), means2(opt.n_outer, dim);
    double within = 0, cross = 0;
    NetNoise noise;
    noise.strategy = Strategy::flipout;
    noise.layers.resize(net.layers.size());
    if (opt.exact_inner) detail::enumerate_signs(net, combos, noise.layers);
    for (int o = 0; o < opt.n_outer; ++o) {
      const RngKey ok = pk.split(1).split(static_cast<std::uint64_t>(o));
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const WeightDist& d = layer_dist(net.layers[l]);
        noise.layers[l].base = sample_base(d, ok.split(l));
        if (!opt.exact_inner) {
          const SignPair sp = sample_sign_pair(pk.split(2).split(static_cast<std::uint64_t>(o)).split(l), combos,
                                               d.rows(), d.cols());
          noise.layers[l].signs = {detail::duplicate_rows(sp.r), detail::duplicate_rows(sp.s)};
        }
      }
      const Matrix g = per_example_gradients(net, xb, tb, noise, view);
      RowVector m1 = RowVector::Zero(dim), m2 = RowVector::Zero(dim);
      for (Index k = 0; k < combos; ++k) {
        m1 += g.row(2 * k);
        m2 += g.row(2 * k + 1);
      }
      m1 /= static_cast<Real>(combos);
      m2 /= static_cast<Real>(combos);
      double w = 0, c = 0;
      for (Index k = 0; k < combos; ++k) {
        const RowVector a = g.row(2 * k) - m1, b = g.row(2 * k + 1) - m2;
        w += a.squaredNorm() + b.squaredNorm();
        c += a.dot(b);
      }
      within += w / (2 * inner_div * static_cast<double>(dim));
      cross += c / (inner_div * static_cast<double>(dim));
      means1.row(o) = m1;
      means2.row(o) = m2;
    }
    detail::PairStats& ps = pairs[p];
    ps.within = within / outer_n;
    ps.cross = cross / outer_n;
    ps.m1 = means1.colwise().mean().transpose();
    ps.m2 = means2.colwise().mean().transpose();
    const Matrix c1 = means1.rowwise() - ps.m1.transpose();
    const Matrix c2 = means2.rowwise() - ps.m2.transpose();
    const double denom = (outer_n - 1) * static_cast<double>(dim);
    ps.between = (c1.squaredNorm() + c2.squaredNorm()) / (2 * denom);
    ps.cross_means = c1.cwiseProduct(c2).sum() / denom;
  });

  // Estimates from per-block sums so the jackknife can drop whole blocks.
  const std::size_t blocks = std::min<std::size_t>(50, pairs.size());
  const Index dim = view.size();
  struct Block {
    double n = 0, within = 0, between = 0, cross = 0, cross_means = 0;
    Vector sum_m, sum_m2;
  };
  std::vector<Block> bs(blocks);
  for (auto& b : bs) {
    b.sum_m = Vector::Zero(dim);
    b.sum_m2 = Vector::Zero(dim);
  }
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    Block& b = bs[p % blocks];
    const auto& ps = pairs[p];
    b.n += 1;
    b.within += ps.within;
    b.between += ps.between;
    b.cross += ps.cross;
    b.cross_means += ps.cross_means;
    b.sum_m += ps.m1 + ps.m2;
    b.sum_m2 += ps.m1.cwiseAbs2() + ps.m2.cwiseAbs2();
  }
  const double c = opt.exact_inner ? 0.0 : 1.0 / static_cast<double>(combos);
  auto estimate = [&](std::ptrdiff_t skip) {
    Block t;
    t.sum_m = Vector::Zero(dim);
    t.sum_m2 = Vector::Zero(dim);
    for (std::size_t k = 0; k < blocks; ++k) {
      if (static_cast<std::ptrdiff_t>(k) == skip) continue;
      t.n += bs[k].n;
      t.within += bs[k].within;
      t.between += bs[k].between;
      t.cross += bs[k].cross;
      t.cross_means += bs[k].cross_means;
      t.sum_m += bs[k].sum_m;
      t.sum_m2 += bs[k].sum_m2;
    }
    const double items = 2 * t.n;
    const double s2m = ((t.sum_m2 - t.sum_m.cwiseAbs2() / items) / (items - 1)).mean();
    const double w = t.within / t.n, b = t.between / t.n, cr = t.cross / t.n, cm = t.cross_means / t.n;
    return std::array<double, 3>{s2m - b / outer_n + b + (1 - c) * w, cr, cm - c * cr};
  };
  const auto full = estimate(-1);
  Decomposition d;
  d.source_layer = layer;
  d.alpha = full[0];
  d.beta = full[1];
  d.gamma = full[2];
  d.alpha_se = jackknife_se(blocks, [&](std::ptrdiff_t s) { return estimate(s)[0]; });
  d.beta_se = jackknife_se(blocks, [&](std::ptrdiff_t s) { return estimate(s)[1]; });
  d.gamma_se = jackknife_se(blocks, [&](std::ptrdiff_t s) { return estimate(s)[2]; });
  d.n_outer = opt.n_outer;
  d.n_inner = static_cast<int>(combos);
  d.n_pairs = opt.n_pairs;
  d.exact_inner = opt.exact_inner;
  return d;
}

inline double predict_variance(const Decomposition& d, Index n, Strategy strategy) {
  if (n < 1) throw ConfigError("predict_variance: N must be >= 1");
  const double nn = static_cast<double>(n);
  const double w = (nn - 1) / nn;
  switch (strategy) {
    case Strategy::none:
    case Strategy::independent: return d.alpha / nn;
    case Strategy::shared: return d.alpha / nn + w * (d.beta + d.gamma);
    case Strategy::flipout: return d.alpha / nn + w * d.gamma;
    case Strategy::lrt: break;
  }
  throw ConfigError("predict_variance: no closed form for the lrt strategy");
}

/// Standard error of predict_variance from the decomposition SEs, treating
/// the three estimates as independent.
inline double predict_variance_se(const Decomposition& d, Index n, Strategy strategy) {
  const double nn = static_cast<double>(n);
  const double w = (nn - 1) / nn;
  const double a = d.alpha_se / nn;
  switch (strategy) {
    case Strategy::shared: return std::sqrt(a * a + w * w * (d.beta_se * d.beta_se + d.gamma_se * d.gamma_se));
    case Strategy::flipout: return std::sqrt(a * a + w * w * d.gamma_se * d.gamma_se);
    default: return a;
  }
}

struct VariancePoint {
  double n = 0;
  double variance = 0;
};

inline double fit_loglog_slope(const std::vector<VariancePoint>& points) {
  if (points.size() < 3) throw ConfigError("fit_loglog_slope: need at least 3 points");
  std::vector<double> lx, ly;
  for (const auto& p : points) {
    if (!(p.n > 0) || !(p.variance > 0)) throw ConfigError("fit_loglog_slope: values must be positive");
    lx.push_back(std::log(p.n));
    ly.push_back(std::log(p.variance));
  }
  return ls_slope(lx, ly);
}

/// Points of one (layer, strategy) curve, ordered by N.
inline std::vector<VariancePoint> curve(const std::vector<GradStats>& rows, const std::string& layer, Strategy s) {
  std::vector<VariancePoint> out;
  for (const auto& r : rows)
    if (r.layer == layer && r.strategy == s) out.push_back({static_cast<double>(r.batch), r.mean_variance});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.n < b.n; });
  return out;
}

}  // namespace flipout
