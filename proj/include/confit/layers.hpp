#pragma once

#include <vector>

#include "confit/tensor.hpp"

namespace confit {

// ReLU; the cache holds the 0/1 activation mask.
Tensor relu_forward(const Tensor& a, Tensor* mask_cache = nullptr);
Tensor relu_backward(const Tensor& mask_cache, const Tensor& grad_out);

// Fully connected layer. x: (B, in), weight: (out, in), bias: (out).
Tensor linear_forward(const Tensor& x, const Tensor& weight,
                      const Tensor& bias);

struct LinearGrads {
  Tensor grad_input;
  Tensor grad_weight;
  Tensor grad_bias;
};

LinearGrads linear_backward(const Tensor& x, const Tensor& weight,
                            const Tensor& grad_out);

// Labels are a rank-1 tensor of integral values in [0, num_classes).
std::vector<std::size_t> labels_from_tensor(const Tensor& labels,
                                            std::size_t num_classes);

struct SoftmaxCeResult {
  double loss = 0.0;  // mean over the batch
  Tensor probs;       // (B, K), rows sum to 1
};

SoftmaxCeResult softmax_cross_entropy(const Tensor& logits,
                                      const std::vector<std::size_t>& labels);

// Gradient of the mean loss with respect to the logits.
Tensor softmax_cross_entropy_backward(const Tensor& probs,
                                      const std::vector<std::size_t>& labels);

// (B,C,H,W) -> (B, C*H*W) and back.
Tensor flatten(const Tensor& a);
Tensor unflatten(const Tensor& x, const std::vector<std::size_t>& shape4);

}  // namespace confit
