#pragma once

// Finite-difference audit of net_backward. The noise record is held fixed,
// so the loss is a deterministic function of the parameters and every
// strategy can be checked, including the sampled ones.

#include "flipout/net.hpp"
#include "flipout/params.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace flipout {

struct GradcheckOptions {
  double step = 1e-5;
  // Denominator floor for the relative error, so entries whose true
  // gradient is ~0 are judged on absolute error instead.
  double floor = 1e-6;
  // Check at most this many entries per parameter array (0 = all), spread
  // evenly over the array.
  Index max_entries = 0;
  // Skip entries whose stencil moves any ReLU pre-activation across zero;
  // the loss is not differentiable there and the difference quotient is
  // meaningless.
  bool skip_kinks = false;
};

struct GradcheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  Index worst_index = -1;
  double worst_analytic = 0;
  double worst_numeric = 0;
  Index checked = 0;
  Index skipped_kinks = 0;
};

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Five-point central difference of f at the current value of *p.
inline double central_difference(Real* p, double h, const std::function<double()>& f) {
  const Real saved = *p;
  auto at = [&](double offset) {
    *p = static_cast<Real>(saved + offset);
    return f();
  };
  const double fp2 = at(2 * h), fp1 = at(h), fm1 = at(-h), fm2 = at(-2 * h);
  *p = saved;
  return (-fp2 + 8 * fp1 - 8 * fm1 + fm2) / (12 * h);
}

inline GradcheckReport gradcheck(Network net, const Matrix& x, const Targets& targets, const NetNoise& noise,
                                 const GradcheckOptions& opt = {}) {
  const ForwardResult fr = net_forward_sampled(net, x, noise);
  const BackwardResult br = net_backward(net, fr.cache, targets);
  const std::vector<Matrix> analytic = gradient_blocks(net, br.grads);
  // Sign pattern of every ReLU pre-activation.
  auto pattern = [&](const ForwardResult& f) {
    std::vector<bool> out;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const auto* d = std::get_if<DenseLayer>(&net.layers[l]);
      if (!d || d->activation != Activation::relu) continue;
      const Matrix& pre = std::get<DenseCache>(f.cache.layers[l]).pre;
      for (Index i = 0; i < pre.size(); ++i) out.push_back(pre.data()[i] > 0);
    }
    return out;
  };
  const std::vector<bool> base_pattern = opt.skip_kinks ? pattern(fr) : std::vector<bool>{};
  bool crossed = false;
  auto loss = [&]() {
    const ForwardResult f = net_forward_sampled(net, x, noise);
    if (opt.skip_kinks && pattern(f) != base_pattern) crossed = true;
    return static_cast<double>(example_losses(net.loss, f.output, targets).mean());
  };

  GradcheckReport report;
  report.max_rel_error = -1;
  std::vector<ParamRef> refs = param_refs(net);
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const ParamRef& r = refs[k];
    const Index n = r.size();
    const Index stride = (opt.max_entries > 0 && n > opt.max_entries) ? n / opt.max_entries : 1;
    for (Index i = 0; i < n; i += stride) {
      crossed = false;
      const double num = central_difference(r.data + i, opt.step, loss);
      if (crossed) {
        ++report.skipped_kinks;
        continue;
      }
      const double ana = analytic[k].data()[i];
      const double err = relative_error(ana, num, opt.floor);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = r.name;
        report.worst_index = i;
        report.worst_analytic = ana;
        report.worst_numeric = num;
      }
    }
  }
  if (report.max_rel_error < 0) report.max_rel_error = 0;
  return report;
}

}  // namespace flipout
