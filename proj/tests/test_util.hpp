#pragma once

#include <functional>

#include "confit/rng.hpp"
#include "confit/tensor.hpp"

namespace confit::testutil {

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Central finite difference of a scalar function with respect to one tensor
// entry, leaving the tensor unchanged afterwards.
inline double central_diff(Tensor& param, std::size_t idx,
                           const std::function<double()>& f,
                           double step = 1e-5) {
  const double saved = param[idx];
  param[idx] = saved + step;
  const double fp = f();
  param[idx] = saved - step;
  const double fm = f();
  param[idx] = saved;
  return (fp - fm) / (2.0 * step);
}

// Relative error with an absolute floor for near-zero references.
inline double rel_err(double got, double want, double floor = 1e-8) {
  const double denom = std::max(std::abs(want), floor);
  return std::abs(got - want) / denom;
}

}  // namespace confit::testutil
