#include "confit/bn.hpp"

#include <cmath>
#include <string>

#include "confit/error.hpp"
#include "confit/pool.hpp"

namespace confit {

BatchNormState BatchNormState::init(std::size_t channels, Dtype dtype,
                                    double momentum, double stab_eps) {
  BatchNormState s;
  s.gamma = Tensor::full({channels}, 1.0, dtype);
  s.beta = Tensor::zeros({channels}, dtype);
  s.running_mean = Tensor::zeros({channels}, dtype);
  s.running_var = Tensor::full({channels}, 1.0, dtype);
  s.momentum = momentum;
  s.stab_eps = stab_eps;
  return s;
}

void batch_moments(const Tensor& a, Tensor& mean, Tensor& var) {
  check_rank(a, 4, "batch_moments input");
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const double inv = 1.0 / static_cast<double>(B * H * W);
  mean = Tensor({C}, a.dtype());
  var = Tensor({C}, a.dtype());
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) s += a.at4(b, c, h, w);
    const double mu = s * inv;
    double sq = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double d = a.at4(b, c, h, w) - mu;
          sq += d * d;
        }
    mean[c] = mu;
    var[c] = sq * inv;
  }
  mean.quantize();
  var.quantize();
}

namespace {

void check_channels(const Tensor& a, const Tensor& per_channel,
                    const char* what) {
  if (per_channel.rank() != 1 || per_channel.dim(0) != a.dim(1)) {
    throw ShapeError(std::string(what) + ": per-channel shape " +
                     shape_to_string(per_channel.shape()) +
                     " does not match input channels " +
                     std::to_string(a.dim(1)));
  }
}

// Shared train-mode core: normalize with batch moments, apply affine.
Tensor bn_train_core(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                     double stab_eps, BnCache& cache) {
  check_rank(a, 4, "bn input");
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (B * H * W < 2) {
    throw StateError("degenerate batch: B*H*W = " + std::to_string(B * H * W) +
                     " < 2, variance undefined");
  }
  check_channels(a, gamma, "bn gamma");
  check_channels(a, beta, "bn beta");

  Tensor mean, var;
  batch_moments(a, mean, var);

  Tensor x_hat(a.shape(), a.dtype());
  Tensor out(a.shape(), a.dtype());
  for (std::size_t c = 0; c < C; ++c) {
    const double inv_std = 1.0 / std::sqrt(var[c] + stab_eps);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double xh = (a.at4(b, c, h, w) - mean[c]) * inv_std;
          x_hat.at4(b, c, h, w) = xh;
          out.at4(b, c, h, w) = gamma[c] * xh + beta[c];
        }
  }
  x_hat.quantize();
  out.quantize();

  cache.input = a;
  cache.x_hat = x_hat;
  cache.batch_mean = mean;
  cache.batch_var = var;
  cache.gamma = gamma;
  cache.stab_eps = stab_eps;
  cache.valid = true;
  return out;
}

void ema_update(Tensor& running, const Tensor& batch, double momentum) {
  for (std::size_t i = 0; i < running.size(); ++i) {
    running[i] += momentum * (batch[i] - running[i]);
  }
  running.quantize();
}

}  // namespace

Tensor bn_forward_train(const Tensor& a, BatchNormState& state,
                        BnCache& cache) {
  Tensor out = bn_train_core(a, state.gamma, state.beta, state.stab_eps, cache);
  ema_update(state.running_mean, cache.batch_mean, state.momentum);
  ema_update(state.running_var, cache.batch_var, state.momentum);
  return out;
}

Tensor bn_forward_eval(const Tensor& a, const BatchNormState& state) {
  return bn_forward_eval_with(a, state.running_mean, state.running_var,
                              state.gamma, state.beta, state.stab_eps);
}

Tensor bn_forward_eval_with(const Tensor& a, const Tensor& mean,
                            const Tensor& var, const Tensor& gamma,
                            const Tensor& beta, double stab_eps) {
  check_rank(a, 4, "bn input");
  check_channels(a, mean, "bn mean");
  check_channels(a, var, "bn var");
  check_channels(a, gamma, "bn gamma");
  check_channels(a, beta, "bn beta");
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor out(a.shape(), a.dtype());
  for (std::size_t c = 0; c < C; ++c) {
    const double inv_std = 1.0 / std::sqrt(var[c] + stab_eps);
    const double g = gamma[c], m = mean[c], bt = beta[c];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          out.at4(b, c, h, w) = g * (a.at4(b, c, h, w) - m) * inv_std + bt;
        }
  }
  out.quantize();
  return out;
}

BnGrads bn_backward(BnCache& cache, const Tensor& grad_out) {
  if (!cache.valid) throw StateError("bn_backward on a stale or unused cache");
  if (!grad_out.same_shape(cache.input)) {
    throw ShapeError("bn grad_out shape " + shape_to_string(grad_out.shape()) +
                     " does not match forward input " +
                     shape_to_string(cache.input.shape()));
  }
  const Tensor& x_hat = cache.x_hat;
  const std::size_t B = x_hat.dim(0), C = x_hat.dim(1), H = x_hat.dim(2),
                    W = x_hat.dim(3);
  const double n = static_cast<double>(B * H * W);

  BnGrads g;
  g.grad_input = Tensor(x_hat.shape(), x_hat.dtype());
  g.grad_gamma = Tensor({C}, x_hat.dtype());
  g.grad_beta = Tensor({C}, x_hat.dtype());

  for (std::size_t c = 0; c < C; ++c) {
    const double inv_std = 1.0 / std::sqrt(cache.batch_var[c] + cache.stab_eps);
    double sum_go = 0.0, sum_go_xh = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double go = grad_out.at4(b, c, h, w);
          sum_go += go;
          sum_go_xh += go * x_hat.at4(b, c, h, w);
        }
    g.grad_beta[c] = sum_go;
    g.grad_gamma[c] = sum_go_xh;
    const double gam = cache.gamma[c];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double go = grad_out.at4(b, c, h, w);
          const double xh = x_hat.at4(b, c, h, w);
          g.grad_input.at4(b, c, h, w) =
              gam * inv_std / n * (n * go - sum_go - xh * sum_go_xh);
        }
  }
  g.grad_input.quantize();
  g.grad_gamma.quantize();
  g.grad_beta.quantize();
  cache.valid = false;
  return g;
}

XconvTaskRecord XconvTaskRecord::init(std::size_t out_channels,
                                      std::size_t in_channels,
                                      std::size_t stride, Dtype dtype) {
  XconvTaskRecord r;
  r.gamma = Tensor::full({out_channels}, 1.0, dtype);
  r.beta = Tensor::zeros({out_channels}, dtype);
  r.running_var = Tensor::full({out_channels}, 1.0, dtype);
  r.stride = stride;
  r.pre_means.assign(stride * stride, Tensor::zeros({in_channels}, dtype));
  return r;
}

void xconv_update_pre_means(const Tensor& conv_input, XconvTaskRecord& rec,
                            double momentum) {
  if (rec.frozen) {
    throw StateError("attempt to update a frozen task's pre-convolution means");
  }
  check_rank(conv_input, 4, "xconv conv input");
  const std::size_t H = conv_input.dim(2), W = conv_input.dim(3);
  if (rec.has_spatial && (rec.in_h != H || rec.in_w != W)) {
    throw StateError("heterogeneous input spatial size within one task: " +
                     std::to_string(rec.in_h) + "x" + std::to_string(rec.in_w) +
                     " then " + std::to_string(H) + "x" + std::to_string(W));
  }
  const std::size_t m = rec.stride;
  if (rec.pre_means.size() != m * m) {
    throw StateError("pre-mean bank size does not match stride");
  }
  const std::vector<Tensor> parts = polyphase_split(conv_input, m);
  for (std::size_t idx = 0; idx < m * m; ++idx) {
    const Tensor phase_mean = avg_pool(parts[idx]);
    if (!phase_mean.same_shape(rec.pre_means[idx])) {
      throw ShapeError("pre-mean channel count mismatch");
    }
    for (std::size_t c = 0; c < phase_mean.size(); ++c) {
      rec.pre_means[idx][c] += momentum * (phase_mean[c] - rec.pre_means[idx][c]);
    }
    rec.pre_means[idx].quantize();
  }
  rec.in_h = H;
  rec.in_w = W;
  rec.has_spatial = true;
  rec.recovered_mean.reset();
}

Tensor xconv_recover_mean(XconvTaskRecord& rec, const ConvSpec& spec,
                          const Tensor& weight, const Tensor* bias,
                          RecoveryPath path) {
  if (!rec.has_spatial) {
    throw StateError("cannot recover mean: no input spatial size recorded");
  }
  if (spec.stride != rec.stride) {
    throw StateError("conv stride " + std::to_string(spec.stride) +
                     " does not match bank stride " +
                     std::to_string(rec.stride));
  }
  const std::size_t m = rec.stride;
  const std::size_t C = spec.in_channels, Co = spec.out_channels;

  Tensor recovered({Co}, weight.dtype());
  if (path == RecoveryPath::closed_form) {
    if (!spec.exact_recovery()) {
      throw StateError("closed-form recovery requires stride 1, padding K-1");
    }
    const std::size_t H = rec.in_h, W = rec.in_w;
    const std::size_t Ho = spec.out_extent(H), Wo = spec.out_extent(W);
    const double ratio = static_cast<double>(H * W) /
                         static_cast<double>(Ho * Wo);
    const Tensor& mu = rec.pre_means[0];
    for (std::size_t o = 0; o < Co; ++o) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        double wsum = 0.0;
        for (std::size_t i = 0; i < spec.kernel; ++i)
          for (std::size_t j = 0; j < spec.kernel; ++j)
            wsum += weight.at4(o, c, i, j);
        s += wsum * mu[c];
      }
      recovered[o] = ratio * s + (bias ? (*bias)[o] : 0.0);
    }
  } else {
    // Interleaved constant tensor: position (m*q+i, m*r+j) carries phase
    // (i,j)'s stored mean. For m=1 this is the plain broadcast of mu'.
    Tensor broad({1, C, rec.in_h, rec.in_w}, weight.dtype());
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t h = 0; h < rec.in_h; ++h) {
        for (std::size_t w = 0; w < rec.in_w; ++w) {
          const std::size_t phase = (h % m) * m + (w % m);
          broad.at4(0, c, h, w) = rec.pre_means[phase][c];
        }
      }
    }
    recovered = avg_pool(conv2d_forward(broad, spec, weight, bias));
  }
  recovered.quantize();
  rec.recovered_mean = recovered;
  return recovered;
}

Tensor xconv_forward_train(const Tensor& a, XconvTaskRecord& rec,
                           double momentum, double stab_eps, BnCache& cache) {
  if (rec.frozen) {
    throw StateError("attempt to train through a frozen task's bank");
  }
  Tensor out = bn_train_core(a, rec.gamma, rec.beta, stab_eps, cache);
  ema_update(rec.running_var, cache.batch_var, momentum);
  return out;
}

Tensor xconv_forward_eval(const Tensor& a, const XconvTaskRecord& rec,
                          double stab_eps) {
  if (!rec.recovered_mean.has_value()) {
    throw StateError("eval without a recovery pass since the last weight "
                     "change (stale recovery cache)");
  }
  return bn_forward_eval_with(a, *rec.recovered_mean, rec.running_var,
                              rec.gamma, rec.beta, stab_eps);
}

}  // namespace confit
