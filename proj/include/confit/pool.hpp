#pragma once

#include "confit/tensor.hpp"

namespace confit {

// Per-channel mean over batch and spatial axes: (B,C,H,W) -> (C).
Tensor avg_pool(const Tensor& a);

// Broadcasts the per-channel mean back to the input's shape, so every
// (b,:,h,w) slice equals avg_pool(a).
Tensor avg_pool_dp(const Tensor& a);

}  // namespace confit
