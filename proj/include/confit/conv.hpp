#pragma once

#include <vector>

#include "confit/tensor.hpp"

namespace confit {

/// Geometry of a 2D convolution. Weight layout is (out_channels, in_channels,
/// kernel, kernel), output-major; the convolution is cross-correlation over a
/// zero-padded input (deep-learning convention, no kernel flip).
struct ConvSpec {
  std::size_t out_channels = 1;
  std::size_t in_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool has_bias = false;

  // Stride 1 with padding K-1 is the regime where post-convolution means are
  // an exact linear image of pre-convolution means.
  bool exact_recovery() const {
    return stride == 1 && padding + 1 == kernel;
  }

  // Output spatial size for an input of extent n; throws on inconsistency.
  std::size_t out_extent(std::size_t n) const;
};

struct ConvGrads {
  Tensor grad_input;
  Tensor grad_weight;
  Tensor grad_bias;  // shape (C'); zero-size tensor when spec has no bias
  bool has_bias = false;
};

Tensor conv2d_forward(const Tensor& a, const ConvSpec& spec,
                      const Tensor& weight, const Tensor* bias = nullptr);

ConvGrads conv2d_backward(const Tensor& a, const ConvSpec& spec,
                          const Tensor& weight, const Tensor& grad_out);

/// Splits (B,C,H,W) into the m*m interleaved sub-grids; part (i,j) holds the
/// samples at rows == i (mod m), cols == j (mod m) and sits at index i*m+j.
/// H and W must be divisible by m.
std::vector<Tensor> polyphase_split(const Tensor& a, std::size_t m);

/// Splits a (C',C,K,K) kernel into the m*m sub-kernels tapping positions
/// == (i,j) (mod m); sub-kernel (i,j) has extent ceil((K-i)/m) x ceil((K-j)/m).
std::vector<Tensor> polyphase_split_kernel(const Tensor& weight, std::size_t m);

/// Inverse of polyphase_split: interleaves the m*m parts back together.
Tensor polyphase_merge(const std::vector<Tensor>& parts, std::size_t m);

/// Stride-m convolution (padding 0) computed as the sum over phases of
/// stride-1 sub-convolutions. Requires K divisible by m so every phase
/// produces the same output extent; equals conv2d_forward exactly.
Tensor polyphase_conv_sum(const Tensor& a, const ConvSpec& spec,
                          const Tensor& weight, const Tensor* bias = nullptr);

}  // namespace confit
