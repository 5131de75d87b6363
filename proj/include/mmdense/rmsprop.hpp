#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mmdense/model.hpp"

namespace mmdense {

struct RmspropState {
  double rho = 0.9;
  double epsilon = 1e-8;
  double lr = 1e-3;
  std::map<std::string, Tensor<float>> mean_square;  // created on first step
};

/// acc <- rho acc + (1 - rho) g^2;  theta <- theta - lr g / (sqrt(acc) + eps).
/// Every gradient is checked before any parameter moves; a non-finite one
/// refuses the whole step.
template <class T>
void rmsprop_step(ParamStore<T>& params, const GradMap<T>& grads, RmspropState& state) {
  for (const auto& e : params.entries()) {
    MMDENSE_REQUIRE(grads.contains(e.name), Errc::invalid_argument, "no gradient for parameter '" + e.name + "'");
    const auto& g = grads.at(e.name);
    MMDENSE_REQUIRE(g.shape() == e.value.shape(), Errc::shape_mismatch,
                    "gradient for '" + e.name + "' is " + to_string(g.shape()) + ", parameter is " +
                        to_string(e.value.shape()));
    MMDENSE_REQUIRE(g.all_finite(), Errc::nan_detected, "non-finite gradient for parameter '" + e.name + "'");
  }
  const T rho = T(state.rho), one_minus = T(1.0 - state.rho), lr = T(state.lr), eps = T(state.epsilon);
  for (auto& e : params.entries()) {
    const auto& g = grads.at(e.name);
    auto it = state.mean_square.find(e.name);
    if (it == state.mean_square.end()) it = state.mean_square.emplace(e.name, Tensor<float>(e.value.shape())).first;
    MMDENSE_REQUIRE(it->second.shape() == e.value.shape(), Errc::shape_mismatch,
                    "optimizer state for '" + e.name + "' does not match the parameter");
    float* acc = it->second.data();
    T* w = e.value.data();
    const T* gd = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      acc[i] = float(rho * T(acc[i]) + one_minus * gd[i] * gd[i]);
      w[i] -= lr * gd[i] / (std::sqrt(T(acc[i])) + eps);
    }
  }
}

}  // namespace mmdense
