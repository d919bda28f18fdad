#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <vector>

#include "confit/conv.hpp"
#include "confit/tensor.hpp"

namespace confit {

/// Classic batch-normalization state for one layer (or one task's bank entry).
struct BatchNormState {
  Tensor gamma;         // [C]
  Tensor beta;          // [C]
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.1;
  double stab_eps = 1e-5;

  static BatchNormState init(std::size_t channels, Dtype dtype = Dtype::f64,
                             double momentum = 0.1, double stab_eps = 1e-5);
};

/// Saved intermediates from a train-mode forward, consumed by bn_backward.
struct BnCache {
  Tensor input;
  Tensor x_hat;       // normalized, pre-affine
  Tensor batch_mean;  // [C]
  Tensor batch_var;   // [C] biased (mean of squared deviations)
  Tensor gamma;
  double stab_eps = 0.0;
  bool valid = false;
};

struct BnGrads {
  Tensor grad_input;
  Tensor grad_gamma;
  Tensor grad_beta;
};

// Batch statistics over (B,H,W) per channel. Biased variance, matching the
// normalizer used in training; the running variance stores the same quantity.
void batch_moments(const Tensor& a, Tensor& mean, Tensor& var);

// Train-mode forward: normalizes with batch moments, applies affine, updates
// running_mean/running_var by EMA. B*H*W must be >= 2.
Tensor bn_forward_train(const Tensor& a, BatchNormState& state, BnCache& cache);

// Eval-mode forward with the state's running moments; pure.
Tensor bn_forward_eval(const Tensor& a, const BatchNormState& state);

// Eval-mode forward with explicit moments (transductive modes, recovery).
Tensor bn_forward_eval_with(const Tensor& a, const Tensor& mean,
                            const Tensor& var, const Tensor& gamma,
                            const Tensor& beta, double stab_eps);

// Gradient of the train-mode forward; running-stat updates are treated as
// non-differentiable. The cache is single-use.
BnGrads bn_backward(BnCache& cache, const Tensor& grad_out);

/// One task's cross-convolution BN record: affine parameters, the m*m
/// pre-convolution phase means, post-convolution running variance, and the
/// cached recovered mean (invalidated whenever conv weights change).
struct XconvTaskRecord {
  Tensor gamma;                   // [C']
  Tensor beta;                    // [C']
  std::vector<Tensor> pre_means;  // m*m tensors of shape [C]
  Tensor running_var;             // [C']
  std::size_t stride = 1;
  std::size_t in_h = 0, in_w = 0;
  bool has_spatial = false;
  std::optional<Tensor> recovered_mean;  // [C']
  bool frozen = false;

  static XconvTaskRecord init(std::size_t out_channels,
                              std::size_t in_channels, std::size_t stride,
                              Dtype dtype = Dtype::f64);
};

// EMA-updates the record's m*m phase means from the convolution *input*,
// captured during a train-mode forward; records the input spatial size.
void xconv_update_pre_means(const Tensor& conv_input, XconvTaskRecord& rec,
                            double momentum);

enum class RecoveryPath { broadcast, closed_form };

// Recomputes the post-convolution mean from the stored pre-convolution phase
// means through the current weights, and caches it in rec.recovered_mean.
//   broadcast: builds the phase-interleaved constant tensor at the stored
//     input spatial size, convolves it, average-pools. Works for any geometry.
//   closed_form: mu[o] = (H*W / (H'*W')) * sum_c (sum_ij w[o,c,i,j]) * mu'_c,
//     valid only for stride 1, padding K-1.
Tensor xconv_recover_mean(XconvTaskRecord& rec, const ConvSpec& spec,
                          const Tensor& weight, const Tensor* bias = nullptr,
                          RecoveryPath path = RecoveryPath::broadcast);

// Train-mode forward over the post-convolution activation: identical
// arithmetic to bn_forward_train, but running_var lives in the task record
// and no post-convolution running mean exists.
Tensor xconv_forward_train(const Tensor& a, XconvTaskRecord& rec,
                           double momentum, double stab_eps, BnCache& cache);

// Eval-mode forward: requires a recovery pass since the last weight change.
Tensor xconv_forward_eval(const Tensor& a, const XconvTaskRecord& rec,
                          double stab_eps);

}  // namespace confit
