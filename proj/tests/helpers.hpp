#pragma once

#include "flipout/prng.hpp"

#include <cmath>
#include <vector>

namespace testing_helpers {

using flipout::Index;
using flipout::Matrix;
using flipout::RngKey;

inline Matrix random_matrix(std::uint64_t seed, Index rows, Index cols, double scale = 1.0) {
  return flipout::sample_gaussian(RngKey(seed), rows, cols) * scale;
}

// Small integers in [-3, 3]; products and sums stay exact in floating point.
inline Matrix integer_matrix(std::uint64_t seed, Index rows, Index cols) {
  flipout::RngStream rng{RngKey(seed)};
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(rng.below(7)) - 3.0;
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

struct MeanSe {
  double mean = 0;
  double se = 0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double m = 0;
  for (double x : v) m += x;
  m /= n;
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1) / n)};
}

}  // namespace testing_helpers
