#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "srisk/errors.hpp"
#include "srisk/tensor.hpp"

namespace srisk {

// Bias-corrected Adam. Moment accumulators are laid out parallel to the
// parameter list handed to init().
struct AdamState {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::vector<Tensor> m, v;

  void init(std::span<Tensor* const> params) {
    m.clear();
    v.clear();
    for (const Tensor* p : params) {
      m.push_back(Tensor::zeros(p->dims));
      v.push_back(Tensor::zeros(p->dims));
    }
    t = 0;
  }
};

inline void adam_step(std::span<Tensor* const> params,
                      std::span<const Tensor* const> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ContractError("adam_step: parameter/gradient/state count mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    if (!p.same_dims(g) || !p.same_dims(state.m[k]))
      throw ContractError("adam_step: dims mismatch for parameter " +
                          std::to_string(k));
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      double& mi = state.m[k].data[i];
      double& vi = state.v[k].data[i];
      const double gi = g.data[i];
      mi = state.beta1 * mi + (1.0 - state.beta1) * gi;
      vi = state.beta2 * vi + (1.0 - state.beta2) * gi * gi;
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace srisk
