#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "rllm/autograd.hpp"

namespace rllm::nn {

// Central finite differences against reverse-mode gradients.
//
// `loss_forward` must rebuild the graph from the current parameter values
// and return the scalar loss node. The analytic gradient is taken from one
// backward pass, then every coordinate of every listed parameter is
// perturbed by +/-h. Returns the max relative error with denominator
// max(|g_fd|, |g_ad|, 1e-8).
template <class T, class F>
double finite_difference_check(F&& loss_forward, const std::vector<Var<T>>& params, double h) {
  for (auto& p : params) p->zero_grad();
  auto loss = loss_forward();
  if (!std::isfinite(static_cast<double>(loss->value.data[0])))
    throw NumericError("finite_difference_check: non-finite loss");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    p->ensure_grad();
    analytic.emplace_back(p->grad.begin(), p->grad.end());
  }

  auto eval_at = [&](Var<T>& p, std::size_t j, T saved, double offset) {
    p->value.data[j] = saved + static_cast<T>(offset);
    const double f = static_cast<double>(loss_forward()->value.data[0]);
    p->value.data[j] = saved;
    if (!std::isfinite(f))
      throw NumericError("finite_difference_check: non-finite perturbed loss");
    return f;
  };

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto p = params[pi];
    for (std::size_t j = 0; j < p->value.data.size(); ++j) {
      const T saved = p->value.data[j];
      const double fp = eval_at(p, j, saved, h);
      const double fm = eval_at(p, j, saved, -h);
      const double g_fd = (fp - fm) / (2.0 * h);
      const double g_ad = analytic[pi][j];
      const double denom = std::max({std::abs(g_fd), std::abs(g_ad), 1e-8});
      max_rel = std::max(max_rel, std::abs(g_fd - g_ad) / denom);
    }
  }
  return max_rel;
}

// Five-point-stencil variant for whole-model losses. Composite models with
// normalization layers have directions whose true gradient is exactly zero
// (e.g. a bias shift that batch norm removes); at |f| ~ O(1) the two-point
// rule's cancellation noise eps*|f|/2h sits above the 1e-8 denominator
// floor no matter how correct the backward pass is. The O(h^4) stencil
// admits a larger h, pushing that noise floor well below the tolerance
// while remaining a plain derivative estimate.
template <class T, class F>
double finite_difference_check_5pt(F&& loss_forward, const std::vector<Var<T>>& params,
                                   double h = 3e-4) {
  for (auto& p : params) p->zero_grad();
  auto loss = loss_forward();
  if (!std::isfinite(static_cast<double>(loss->value.data[0])))
    throw NumericError("finite_difference_check_5pt: non-finite loss");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    p->ensure_grad();
    analytic.emplace_back(p->grad.begin(), p->grad.end());
  }

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto p = params[pi];
    for (std::size_t j = 0; j < p->value.data.size(); ++j) {
      const T saved = p->value.data[j];
      double f[4];
      const double offs[4] = {2.0 * h, h, -h, -2.0 * h};
      for (int t = 0; t < 4; ++t) {
        p->value.data[j] = saved + static_cast<T>(offs[t]);
        f[t] = static_cast<double>(loss_forward()->value.data[0]);
        if (!std::isfinite(f[t]))
          throw NumericError("finite_difference_check_5pt: non-finite perturbed loss");
      }
      p->value.data[j] = saved;
      const double g_fd = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h);
      const double g_ad = analytic[pi][j];
      const double denom = std::max({std::abs(g_fd), std::abs(g_ad), 1e-8});
      max_rel = std::max(max_rel, std::abs(g_fd - g_ad) / denom);
    }
  }
  return max_rel;
}

}  // namespace rllm::nn
