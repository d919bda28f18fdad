#include "confit/conv.hpp"

#include <string>

#include "confit/error.hpp"

namespace confit {

namespace {

void check_conv_shapes(const Tensor& a, const ConvSpec& spec,
                       const Tensor& weight) {
  check_rank(a, 4, "conv input");
  check_rank(weight, 4, "conv weight");
  if (weight.dim(0) != spec.out_channels || weight.dim(1) != spec.in_channels ||
      weight.dim(2) != spec.kernel || weight.dim(3) != spec.kernel) {
    throw ShapeError("conv weight shape " + shape_to_string(weight.shape()) +
                     " does not match spec (" +
                     std::to_string(spec.out_channels) + "," +
                     std::to_string(spec.in_channels) + "," +
                     std::to_string(spec.kernel) + "," +
                     std::to_string(spec.kernel) + ")");
  }
  if (a.dim(1) != spec.in_channels) {
    throw ShapeError("conv input has " + std::to_string(a.dim(1)) +
                     " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (spec.stride == 0) throw ShapeError("conv stride must be >= 1");
}

void check_conv_args(const Tensor& a, const ConvSpec& spec,
                     const Tensor& weight, const Tensor* bias) {
  check_conv_shapes(a, spec, weight);
  if (bias != nullptr) {
    if (!spec.has_bias) throw ShapeError("bias passed to a bias-free conv");
    if (bias->rank() != 1 || bias->dim(0) != spec.out_channels) {
      throw ShapeError("conv bias shape " + shape_to_string(bias->shape()) +
                       " does not match out_channels " +
                       std::to_string(spec.out_channels));
    }
  } else if (spec.has_bias) {
    throw ShapeError("spec declares bias but none was passed");
  }
}

}  // namespace

std::size_t ConvSpec::out_extent(std::size_t n) const {
  const std::size_t padded = n + 2 * padding;
  if (padded < kernel) {
    throw ShapeError("conv input extent " + std::to_string(n) +
                     " smaller than kernel " + std::to_string(kernel) +
                     " after padding " + std::to_string(padding));
  }
  if ((padded - kernel) % stride != 0) {
    throw ShapeError("conv output extent not integral: (" + std::to_string(n) +
                     " + 2*" + std::to_string(padding) + " - " +
                     std::to_string(kernel) + ") not divisible by stride " +
                     std::to_string(stride));
  }
  return (padded - kernel) / stride + 1;
}

Tensor conv2d_forward(const Tensor& a, const ConvSpec& spec,
                      const Tensor& weight, const Tensor* bias) {
  check_conv_args(a, spec, weight, bias);
  const std::size_t B = a.dim(0), C = spec.in_channels, H = a.dim(2),
                    W = a.dim(3);
  const std::size_t Co = spec.out_channels, K = spec.kernel, m = spec.stride,
                    p = spec.padding;
  const std::size_t Ho = spec.out_extent(H), Wo = spec.out_extent(W);

  Tensor out({B, Co, Ho, Wo}, a.dtype());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      const double bias_v = bias ? (*bias)[o] : 0.0;
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          double s = bias_v;
          // Signed input base; out-of-range taps read the zero padding.
          const long ih0 = static_cast<long>(oh * m) - static_cast<long>(p);
          const long iw0 = static_cast<long>(ow * m) - static_cast<long>(p);
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t kh = 0; kh < K; ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              for (std::size_t kw = 0; kw < K; ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                s += a.at4(b, c, static_cast<std::size_t>(ih),
                           static_cast<std::size_t>(iw)) *
                     weight.at4(o, c, kh, kw);
              }
            }
          }
          out.at4(b, o, oh, ow) = s;
        }
      }
    }
  }
  out.quantize();
  return out;
}

ConvGrads conv2d_backward(const Tensor& a, const ConvSpec& spec,
                          const Tensor& weight, const Tensor& grad_out) {
  check_conv_shapes(a, spec, weight);
  check_rank(grad_out, 4, "conv grad_out");
  const std::size_t B = a.dim(0), C = spec.in_channels, H = a.dim(2),
                    W = a.dim(3);
  const std::size_t Co = spec.out_channels, K = spec.kernel, m = spec.stride,
                    p = spec.padding;
  const std::size_t Ho = spec.out_extent(H), Wo = spec.out_extent(W);
  if (grad_out.dim(0) != B || grad_out.dim(1) != Co || grad_out.dim(2) != Ho ||
      grad_out.dim(3) != Wo) {
    throw ShapeError("conv grad_out shape " +
                     shape_to_string(grad_out.shape()) +
                     " does not match forward output");
  }

  ConvGrads g;
  g.grad_input = Tensor(a.shape(), a.dtype());
  g.grad_weight = Tensor(weight.shape(), a.dtype());
  g.has_bias = spec.has_bias;
  if (spec.has_bias) g.grad_bias = Tensor({Co}, a.dtype());

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const double go = grad_out.at4(b, o, oh, ow);
          if (spec.has_bias) g.grad_bias[o] += go;
          const long ih0 = static_cast<long>(oh * m) - static_cast<long>(p);
          const long iw0 = static_cast<long>(ow * m) - static_cast<long>(p);
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t kh = 0; kh < K; ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              for (std::size_t kw = 0; kw < K; ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                const std::size_t ihs = static_cast<std::size_t>(ih);
                const std::size_t iws = static_cast<std::size_t>(iw);
                g.grad_input.at4(b, c, ihs, iws) += go * weight.at4(o, c, kh, kw);
                g.grad_weight.at4(o, c, kh, kw) += go * a.at4(b, c, ihs, iws);
              }
            }
          }
        }
      }
    }
  }
  g.grad_input.quantize();
  g.grad_weight.quantize();
  if (spec.has_bias) g.grad_bias.quantize();
  return g;
}

std::vector<Tensor> polyphase_split(const Tensor& a, std::size_t m) {
  check_rank(a, 4, "polyphase input");
  if (m == 0) throw DecompositionError("polyphase stride must be >= 1");
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (H % m != 0 || W % m != 0) {
    throw DecompositionError("spatial size " + std::to_string(H) + "x" +
                             std::to_string(W) + " not divisible by stride " +
                             std::to_string(m));
  }
  const std::size_t Hp = H / m, Wp = W / m;
  std::vector<Tensor> parts;
  parts.reserve(m * m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      Tensor part({B, C, Hp, Wp}, a.dtype());
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t h = 0; h < Hp; ++h) {
            for (std::size_t w = 0; w < Wp; ++w) {
              part.at4(b, c, h, w) = a.at4(b, c, h * m + i, w * m + j);
            }
          }
        }
      }
      parts.push_back(std::move(part));
    }
  }
  return parts;
}

std::vector<Tensor> polyphase_split_kernel(const Tensor& weight,
                                           std::size_t m) {
  check_rank(weight, 4, "polyphase kernel");
  if (m == 0) throw DecompositionError("polyphase stride must be >= 1");
  const std::size_t Co = weight.dim(0), C = weight.dim(1), K = weight.dim(2);
  if (weight.dim(3) != K) {
    throw ShapeError("polyphase kernel must be square, got " +
                     shape_to_string(weight.shape()));
  }
  std::vector<Tensor> kernels;
  kernels.reserve(m * m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      // Taps at rows == i, cols == j (mod m), inside [0, K).
      const std::size_t kh = i < K ? (K - i + m - 1) / m : 0;
      const std::size_t kw = j < K ? (K - j + m - 1) / m : 0;
      if (kh == 0 || kw == 0) {
        throw DecompositionError("phase (" + std::to_string(i) + "," +
                                 std::to_string(j) + ") has no taps in a " +
                                 std::to_string(K) + "x" + std::to_string(K) +
                                 " kernel");
      }
      Tensor sub({Co, C, kh, kw}, weight.dtype());
      for (std::size_t o = 0; o < Co; ++o) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t q = 0; q < kh; ++q) {
            for (std::size_t r = 0; r < kw; ++r) {
              sub.at4(o, c, q, r) = weight.at4(o, c, q * m + i, r * m + j);
            }
          }
        }
      }
      kernels.push_back(std::move(sub));
    }
  }
  return kernels;
}

Tensor polyphase_merge(const std::vector<Tensor>& parts, std::size_t m) {
  if (m == 0 || parts.size() != m * m) {
    throw DecompositionError("polyphase merge expects m*m parts, got " +
                             std::to_string(parts.size()));
  }
  const Tensor& first = parts[0];
  check_rank(first, 4, "polyphase part");
  const std::size_t B = first.dim(0), C = first.dim(1), Hp = first.dim(2),
                    Wp = first.dim(3);
  for (const Tensor& p : parts) {
    if (!p.same_shape(first)) {
      throw ShapeError("polyphase parts have mismatched shapes");
    }
  }
  Tensor out({B, C, Hp * m, Wp * m}, first.dtype());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const Tensor& part = parts[i * m + j];
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t h = 0; h < Hp; ++h) {
            for (std::size_t w = 0; w < Wp; ++w) {
              out.at4(b, c, h * m + i, w * m + j) = part.at4(b, c, h, w);
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor polyphase_conv_sum(const Tensor& a, const ConvSpec& spec,
                          const Tensor& weight, const Tensor* bias) {
  if (spec.padding != 0) {
    throw DecompositionError("polyphase path requires padding 0");
  }
  const std::size_t m = spec.stride;
  if (spec.kernel % m != 0) {
    throw DecompositionError("polyphase path requires kernel divisible by "
                             "stride; got K=" + std::to_string(spec.kernel) +
                             ", m=" + std::to_string(m));
  }
  const std::vector<Tensor> parts = polyphase_split(a, m);
  const std::vector<Tensor> kernels = polyphase_split_kernel(weight, m);

  ConvSpec sub_spec;
  sub_spec.out_channels = spec.out_channels;
  sub_spec.in_channels = spec.in_channels;
  sub_spec.kernel = spec.kernel / m;
  sub_spec.stride = 1;
  sub_spec.padding = 0;
  sub_spec.has_bias = false;

  Tensor sum;
  for (std::size_t idx = 0; idx < m * m; ++idx) {
    Tensor part_out = conv2d_forward(parts[idx], sub_spec, kernels[idx]);
    sum = idx == 0 ? std::move(part_out) : add(sum, part_out);
  }
  if (bias != nullptr) {
    if (!spec.has_bias) throw ShapeError("bias passed to a bias-free conv");
    const std::size_t B = sum.dim(0), Co = sum.dim(1), Ho = sum.dim(2),
                      Wo = sum.dim(3);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t o = 0; o < Co; ++o) {
        for (std::size_t h = 0; h < Ho; ++h) {
          for (std::size_t w = 0; w < Wo; ++w) {
            sum.at4(b, o, h, w) += (*bias)[o];
          }
        }
      }
    }
  }
  sum.quantize();
  return sum;
}

}  // namespace confit
