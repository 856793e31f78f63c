// One perturbed dense layer under shared and flipout noise, then the
// gradient variance of a small network for a few batch sizes.
//
//   $ ./sample_flipout_layer

#include "flipout/flipout.hpp"

#include <cstdio>

using namespace flipout;

int main() {
  // A 3 -> 2 layer with multiplicative Gaussian noise, sigma = 1.
  const WeightDist dist = make_dist(sample_gaussian(RngKey(1), 3, 2), 1.0, Mode::multiplicative_gaussian);
  const Matrix x = Matrix::Ones(4, 3);  // four identical examples

  NetNoise shared, flip;
  {
    Network one;
    one.layers.emplace_back(DenseLayer{dist, Vector::Zero(2), Activation::identity});
    shared = sample_noise(one, 4, Strategy::shared, RngKey(2));
    flip = sample_noise(one, 4, Strategy::flipout, RngKey(2));
  }
  // Same base draw, so shared gives four equal rows and flipout four
  // different ones: each example sees the base flipped by its own signs.
  MatmulCounter::reset();
  const Matrix ys = perturbed_linear_forward(x, dist, Strategy::shared, shared.layers[0]);
  const auto shared_mm = MatmulCounter::count();
  MatmulCounter::reset();
  const Matrix yf = perturbed_linear_forward(x, dist, Strategy::flipout, flip.layers[0]);
  const auto flip_mm = MatmulCounter::count();
  std::printf("shared  (%llu matmul)   flipout (%llu matmuls)\n", static_cast<unsigned long long>(shared_mm),
              static_cast<unsigned long long>(flip_mm));
  for (Index n = 0; n < 4; ++n)
    std::printf("% .4f % .4f      % .4f % .4f\n", ys(n, 0), ys(n, 1), yf(n, 0), yf(n, 1));

  // Gradient variance of the first layer of a 10-32-3 net on blobs.
  SyntheticOptions opt;
  opt.classes = 3;
  opt.offset = 1.0;
  const Dataset data = make_synthetic(SyntheticKind::blobs, 2000, 10, 3, opt);
  const Network net =
      make_mlp({10, 32, 3}, Activation::relu, Loss::softmax_cross_entropy, Mode::multiplicative_gaussian, 1.0, RngKey(4));
  VarianceOptions vopt;
  vopt.repeats = 50;
  vopt.runs = 10;
  std::printf("\n%6s %12s %12s %12s\n", "N", "shared", "flipout", "independent");
  for (Index n : {1, 4, 16, 64, 256}) {
    std::printf("%6lld", static_cast<long long>(n));
    for (Strategy s : {Strategy::shared, Strategy::flipout, Strategy::independent})
      std::printf(" %12.4e", estimate_variance(net, data, "fc1", s, n, vopt, RngKey(5).split(static_cast<std::uint64_t>(n))).mean_variance);
    std::printf("\n");
  }
}
