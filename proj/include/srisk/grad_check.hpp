#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "srisk/errors.hpp"
#include "srisk/tensor.hpp"

namespace srisk {

// Central-difference verification of analytic gradients.
//
// `eval` recomputes the scalar objective from the current parameter
// values; `analytic` holds one gradient tensor per parameter, in the
// same order. Every coordinate is perturbed by +/- eps and the relative
// error |a - n| / max(1e-8, |a| + |n|) is maximized over coordinates.
inline double grad_check(std::span<Tensor* const> params,
                         const std::function<double()>& eval,
                         std::span<const Tensor> analytic, double eps) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");
  if (params.size() != analytic.size())
    throw ContractError("grad_check: gradient count mismatch");
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& a = analytic[k];
    if (!p.same_dims(a))
      throw ContractError("grad_check: gradient dims mismatch at parameter " +
                          std::to_string(k));
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double saved = p.data[i];
      p.data[i] = saved + eps;
      const double fp = eval();
      p.data[i] = saved - eps;
      const double fm = eval();
      p.data[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: objective is non-finite");
      const double numeric = (fp - fm) / (2.0 * eps);
      const double an = a.data[i];
      const double err =
          std::abs(an - numeric) / std::max(1e-8, std::abs(an) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace srisk
