#pragma once

// Central finite-difference oracle for input gradients. Independent of autograd:
// it only ever evaluates the function forward under no_grad.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>

namespace vertseg::testing {

struct GradCheckResult {
  int64_t coordinates = 0;
  int64_t passed = 0;
  double worst_relative = 0.0;

  double pass_fraction() const {
    return coordinates == 0 ? 0.0 : static_cast<double>(passed) / static_cast<double>(coordinates);
  }
};

// Compares d(sum f(x))/dx from autograd against central differences.
// A coordinate passes when |analytic - numeric| <= rtol * max(|analytic|, |numeric|, floor).
inline GradCheckResult check_input_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                            const torch::Tensor& x0, double step, double rtol,
                                            double floor = 1e-6) {
  auto x = x0.detach().clone().set_requires_grad(true);
  f(x).sum().backward();
  auto analytic = x.grad().detach().flatten();

  GradCheckResult result;
  auto probe = x0.detach().clone();
  auto flat = probe.view({-1});
  torch::NoGradGuard no_grad;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double original = flat[i].item<double>();
    flat[i] = original + step;
    const double plus = f(probe).sum().item<double>();
    flat[i] = original - step;
    const double minus = f(probe).sum().item<double>();
    flat[i] = original;
    const double numeric = (plus - minus) / (2.0 * step);
    const double a = analytic[i].item<double>();
    const double scale = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / scale;
    result.worst_relative = std::max(result.worst_relative, rel);
    ++result.coordinates;
    if (rel <= rtol) ++result.passed;
  }
  return result;
}

}  // namespace vertseg::testing
