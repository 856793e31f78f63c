#pragma once

#include "flipout/core.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <span>
#include <vector>

namespace flipout {

/// Welford accumulator over vectors, entrywise.
class RunningMoments {
 public:
  explicit RunningMoments(Index dim = 0) : mean_(Vector::Zero(dim)), m2_(Vector::Zero(dim)) {}

  template <class V>
  void add(const V& x) {
    if (mean_.size() == 0 && count_ == 0) {
      mean_ = Vector::Zero(x.size());
      m2_ = Vector::Zero(x.size());
    }
    require_shape(x.size() == mean_.size(), "RunningMoments: dimension changed");
    ++count_;
    for (Index i = 0; i < mean_.size(); ++i) {
      const double v = static_cast<double>(x(i));
      const double delta = v - mean_(i);
      mean_(i) += static_cast<Real>(delta / static_cast<double>(count_));
      m2_(i) += static_cast<Real>(delta * (v - mean_(i)));
    }
  }

  Index count() const { return count_; }
  const Vector& mean() const { return mean_; }
  /// Divides by count (population variance), as the gradient-variance
  /// protocol prescribes.
  Vector population_variance() const { return count_ > 0 ? Vector(m2_ / static_cast<Real>(count_)) : m2_; }
  Vector sample_variance() const { return count_ > 1 ? Vector(m2_ / static_cast<Real>(count_ - 1)) : m2_ * 0; }

 private:
  Index count_ = 0;
  Vector mean_, m2_;
};

inline double student_t_quantile(double p, double dof) {
  boost::math::students_t dist(dof);
  return boost::math::quantile(dist, p);
}

struct Interval {
  double mean = 0;
  double se = 0;
  double low = 0;
  double high = 0;
};

/// Two-sided Student-t interval for the mean of `values` (dof = n - 1).
inline Interval t_interval(std::span<const double> values, double level = 0.90) {
  const std::size_t n = values.size();
  if (n < 2) throw ConfigError("t_interval: need at least 2 values");
  double m = 0;
  for (double v : values) m += v;
  m /= static_cast<double>(n);
  double ss = 0;
  for (double v : values) ss += (v - m) * (v - m);
  const double se = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
  const double q = student_t_quantile(0.5 + level / 2, static_cast<double>(n - 1));
  return {m, se, m - q * se, m + q * se};
}

inline double mean_of(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Least-squares slope of y on x.
inline double ls_slope(std::span<const double> x, std::span<const double> y) {
  require_shape(x.size() == y.size() && x.size() >= 2, "ls_slope: need matching inputs with >= 2 points");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0) throw ConfigError("ls_slope: x values are all equal");
  return sxy / sxx;
}

/// Delete-one-block jackknife standard error of `estimator` over blocks.
/// `estimator(skip)` must return the estimate with block `skip` removed, and
/// `estimator(-1)` the full estimate.
template <class F>
double jackknife_se(std::size_t blocks, F&& estimator) {
  if (blocks < 2) return 0.0;
  std::vector<double> loo(blocks);
  for (std::size_t b = 0; b < blocks; ++b) loo[b] = estimator(static_cast<std::ptrdiff_t>(b));
  const double m = mean_of(loo);
  double ss = 0;
  for (double v : loo) ss += (v - m) * (v - m);
  const double g = static_cast<double>(blocks);
  return std::sqrt((g - 1) / g * ss);
}

}  // namespace flipout
