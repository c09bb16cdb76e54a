#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "sadnet/error.hpp"
#include "sadnet/params.hpp"

namespace sadnet {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments mirror the parameter store entry for entry.
template <typename T>
struct AdamState {
  AdamHyper hyper{};
  std::uint64_t t = 0;
  ParamStore<T> m;
  ParamStore<T> v;

  static AdamState for_params(const ParamStore<T>& params, AdamHyper hyper = {}) {
    AdamState s;
    s.hyper = hyper;
    for (const auto& e : params.entries()) {
      s.m.add(e.name, Tensor4<T>(e.value.shape()));
      s.v.add(e.name, Tensor4<T>(e.value.shape()));
    }
    return s;
  }
};

// Bias-corrected ADAM update with the given learning rate. Returns the number
// of scalar parameters visited.
template <typename T>
std::size_t adam_step(ParamStore<T>& params, const GradMap<T>& grads, AdamState<T>& state, double lr) {
  for (const auto& e : params.entries()) {
    auto it = grads.find(e.name);
    if (it == grads.end()) throw UsageError("adam_step: missing gradient for parameter '" + e.name + "'");
    require_same_shape(e.value.shape(), it->second.shape(), "adam_step");
  }
  if (state.m.size() == 0) {
    const AdamHyper hyper = state.hyper;
    state = AdamState<T>::for_params(params, hyper);
  }

  state.t += 1;
  const double b1 = state.hyper.beta1;
  const double b2 = state.hyper.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  std::size_t visited = 0;
  for (auto& e : params.entries()) {
    const auto& g = grads.at(e.name);
    auto& m = state.m.at(e.name);
    auto& v = state.v.at(e.name);
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double step = lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.hyper.eps);
      e.value[i] = static_cast<T>(static_cast<double>(e.value[i]) - step);
    }
    visited += e.value.size();
  }
  return visited;
}

}  // namespace sadnet
