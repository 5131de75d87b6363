#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmdense/autodiff.hpp"

namespace mmdense {

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  bool nan = false;  // f produced NaN; worst_tensor/worst_index name the coordinate
  std::size_t kinks_skipped = 0;
  bool ok(double tol) const {
    return !nan && max_rel_error < tol && kinks_skipped * 20 <= coords_checked + kinks_skipped;
  }
};

struct GradCheckOptions {
  std::size_t max_coords_per_tensor = std::numeric_limits<std::size_t>::max();
  // Also difference at h / 2 and accept the step h only if both agree to
  // 1e-5 relative; otherwise retry at h = eps / 10 and eps / 100. A
  // coordinate with a ReLU kink inside every stencil is dropped; more than
  // 5% dropped fails the check.
  bool skip_kinks = false;
};

struct NamedTensor {
  std::string name;
  Tensor<double> value;
};

/// Central-difference check of d f / d leaf for every leaf in `leaves`.
/// `f(graph, leaf_vars)` must return a scalar node. At most
/// `max_coords_per_tensor` coordinates per leaf are probed (chosen with a fixed
/// seed) so large parameter sets stay affordable.
template <class F>
GradCheckResult grad_check_leaves(F&& f, std::vector<NamedTensor> leaves, double eps, GradCheckOptions opt) {
  const std::size_t max_coords_per_tensor = opt.max_coords_per_tensor;
  auto evaluate = [&](bool want_grads, GradMap<double>* grads) {
    Graph<double> g;
    std::vector<Var> vars;
    for (const auto& l : leaves) vars.push_back(g.parameter(l.value, l.name));
    Var root = f(g, std::as_const(vars));
    const double v = g.value(root)[0];
    if (want_grads) *grads = g.backward(root);
    return v;
  };

  GradCheckResult r;
  GradMap<double> analytic;
  const double f0 = evaluate(true, &analytic);
  if (!std::isfinite(f0)) {
    r.nan = true;
    r.worst_tensor = "<unperturbed>";
    return r;
  }

  std::mt19937_64 pick(0x9e3779b97f4a7c15ull);
  for (auto& leaf : leaves) {
    const auto& ga = analytic.at(leaf.name);
    std::vector<std::size_t> coords(leaf.value.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), pick);
      coords.resize(max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      const double saved = leaf.value[i];
      auto central = [&](double h) {
        leaf.value[i] = saved + h;
        const double fp = evaluate(false, nullptr);
        leaf.value[i] = saved - h;
        const double fm = evaluate(false, nullptr);
        leaf.value[i] = saved;
        return (fp - fm) / (2 * h);
      };
      double numeric = central(eps);
      if (!std::isfinite(numeric)) {
        ++r.coords_checked;
        r.nan = true;
        r.worst_tensor = leaf.name;
        r.worst_index = i;
        return r;
      }
      if (opt.skip_kinks) {
        bool smooth = false;
        for (double h = eps; h > eps * 5e-3; h /= 10) {
          const double full = h == eps ? numeric : central(h), half = central(h / 2);
          if (std::abs(full - half) <= 1e-5 * std::max({std::abs(full), std::abs(half), 1e-12})) {
            numeric = full;
            smooth = true;
            break;
          }
        }
        if (!smooth) {
          ++r.kinks_skipped;
          continue;
        }
      }
      ++r.coords_checked;
      const double a = ga[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      const double err = std::abs(a - numeric) / denom;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_tensor = leaf.name;
        r.worst_index = i;
      }
    }
  }
  return r;
}

template <class F>
GradCheckResult grad_check_leaves(F&& f, std::vector<NamedTensor> leaves, double eps,
                                  std::size_t max_coords_per_tensor = std::numeric_limits<std::size_t>::max()) {
  return grad_check_leaves(std::forward<F>(f), std::move(leaves), eps, GradCheckOptions{max_coords_per_tensor, false});
}

/// Single-input form: max relative error of d f / d input.
template <class F>
GradCheckResult grad_check(F&& f, const Tensor<double>& input, double eps) {
  return grad_check_leaves(
      [&](Graph<double>& g, const std::vector<Var>& v) { return f(g, v[0]); }, {NamedTensor{"input", input}}, eps);
}

}  // namespace mmdense
