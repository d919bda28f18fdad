#include "confit/layers.hpp"

#include <cmath>
#include <string>

#include "confit/error.hpp"

namespace confit {

Tensor relu_forward(const Tensor& a, Tensor* mask_cache) {
  Tensor out(a.shape(), a.dtype());
  Tensor mask(a.shape(), a.dtype());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pos = a[i] > 0.0;
    out[i] = pos ? a[i] : 0.0;
    mask[i] = pos ? 1.0 : 0.0;
  }
  out.quantize();
  if (mask_cache) *mask_cache = std::move(mask);
  return out;
}

Tensor relu_backward(const Tensor& mask_cache, const Tensor& grad_out) {
  if (!mask_cache.same_shape(grad_out)) {
    throw ShapeError("relu grad_out shape " +
                     shape_to_string(grad_out.shape()) +
                     " does not match cached mask " +
                     shape_to_string(mask_cache.shape()));
  }
  Tensor g(grad_out.shape(), grad_out.dtype());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * mask_cache[i];
  g.quantize();
  return g;
}

Tensor linear_forward(const Tensor& x, const Tensor& weight,
                      const Tensor& bias) {
  check_rank(x, 2, "linear input");
  check_rank(weight, 2, "linear weight");
  check_rank(bias, 1, "linear bias");
  const std::size_t B = x.dim(0), in = x.dim(1);
  const std::size_t out = weight.dim(0);
  if (weight.dim(1) != in || bias.dim(0) != out) {
    throw ShapeError("linear shapes inconsistent: x " +
                     shape_to_string(x.shape()) + ", weight " +
                     shape_to_string(weight.shape()) + ", bias " +
                     shape_to_string(bias.shape()));
  }
  Tensor y({B, out}, x.dtype());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = bias[o];
      for (std::size_t i = 0; i < in; ++i) s += weight.at2(o, i) * x.at2(b, i);
      y.at2(b, o) = s;
    }
  }
  y.quantize();
  return y;
}

LinearGrads linear_backward(const Tensor& x, const Tensor& weight,
                            const Tensor& grad_out) {
  check_rank(x, 2, "linear input");
  check_rank(weight, 2, "linear weight");
  check_rank(grad_out, 2, "linear grad_out");
  const std::size_t B = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (grad_out.dim(0) != B || grad_out.dim(1) != out || weight.dim(1) != in) {
    throw ShapeError("linear backward shapes inconsistent");
  }
  LinearGrads g;
  g.grad_input = Tensor({B, in}, x.dtype());
  g.grad_weight = Tensor({out, in}, x.dtype());
  g.grad_bias = Tensor({out}, x.dtype());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      const double go = grad_out.at2(b, o);
      g.grad_bias[o] += go;
      for (std::size_t i = 0; i < in; ++i) {
        g.grad_input.at2(b, i) += go * weight.at2(o, i);
        g.grad_weight.at2(o, i) += go * x.at2(b, i);
      }
    }
  }
  g.grad_input.quantize();
  g.grad_weight.quantize();
  g.grad_bias.quantize();
  return g;
}

std::vector<std::size_t> labels_from_tensor(const Tensor& labels,
                                            std::size_t num_classes) {
  check_rank(labels, 1, "labels");
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = labels[i];
    if (v != std::floor(v) || v < 0.0 ||
        v >= static_cast<double>(num_classes)) {
      throw DataError("label " + std::to_string(v) + " at index " +
                      std::to_string(i) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
    out[i] = static_cast<std::size_t>(v);
  }
  return out;
}

SoftmaxCeResult softmax_cross_entropy(const Tensor& logits,
                                      const std::vector<std::size_t>& labels) {
  check_rank(logits, 2, "logits");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) {
    throw DataError("label count " + std::to_string(labels.size()) +
                    " does not match batch size " + std::to_string(B));
  }
  SoftmaxCeResult res;
  res.probs = Tensor({B, K}, logits.dtype());
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) {
      throw DataError("label " + std::to_string(labels[b]) +
                      " outside [0, " + std::to_string(K) + ")");
    }
    double mx = logits.at2(b, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at2(b, k));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at2(b, k) - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t k = 0; k < K; ++k) {
      res.probs.at2(b, k) = std::exp(logits.at2(b, k) - log_z);
    }
    loss -= logits.at2(b, labels[b]) - log_z;
  }
  res.probs.quantize();
  res.loss = loss / static_cast<double>(B);
  return res;
}

Tensor softmax_cross_entropy_backward(const Tensor& probs,
                                      const std::vector<std::size_t>& labels) {
  check_rank(probs, 2, "probs");
  const std::size_t B = probs.dim(0), K = probs.dim(1);
  if (labels.size() != B) {
    throw DataError("label count does not match batch size");
  }
  Tensor g({B, K}, probs.dtype());
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      g.at2(b, k) = (probs.at2(b, k) - (labels[b] == k ? 1.0 : 0.0)) * inv_b;
    }
  }
  g.quantize();
  return g;
}

Tensor flatten(const Tensor& a) {
  check_rank(a, 4, "flatten input");
  return a.reshaped({a.dim(0), a.dim(1) * a.dim(2) * a.dim(3)});
}

Tensor unflatten(const Tensor& x, const std::vector<std::size_t>& shape4) {
  if (shape4.size() != 4) throw ShapeError("unflatten target must be rank 4");
  return x.reshaped(shape4);
}

}  // namespace confit
