#include "confit/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "confit/bn.hpp"
#include "confit/conv.hpp"
#include "confit/layers.hpp"
#include "confit/metrics.hpp"
#include "confit/pool.hpp"
#include "confit/rng.hpp"
#include "confit/tensor.hpp"

namespace confit::verify {

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo,
                     double hi) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double max_abs(const Tensor& a) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i]));
  }
  return worst;
}

double central_diff(Tensor& param, std::size_t idx,
                    const std::function<double()>& f, double step = 1e-5) {
  const double saved = param[idx];
  param[idx] = saved + step;
  const double fp = f();
  param[idx] = saved - step;
  const double fm = f();
  param[idx] = saved;
  return (fp - fm) / (2.0 * step);
}

double rel_err(double got, double want, double floor = 1e-8) {
  return std::abs(got - want) / std::max(std::abs(want), floor);
}

void record(PropertyResult& res, double err) {
  ++res.cases;
  res.worst = std::max(res.worst, err);
  if (!(err < res.limit)) ++res.failures;
}

}  // namespace

PropertyResult check_mean_commutation(std::size_t cases, std::uint64_t seed) {
  PropertyResult res;
  res.name = "mean-commutation";
  res.limit = 1e-9;
  Rng rng(seed);

  // Worked case: 2x2 input with mean 2.5, kernel summing to 2, padding 1;
  // the 3x3 output mean is (4/9) * 2 * 2.5 = 20/9.
  {
    Tensor a({1, 1, 2, 2});
    a[0] = 1.0;
    a[1] = 2.0;
    a[2] = 3.0;
    a[3] = 4.0;
    Tensor w({1, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) w[i] = 0.5;
    const ConvSpec spec{1, 1, 2, 1, 1};
    const Tensor mean = avg_pool(conv2d_forward(a, spec, w));
    record(res, std::abs(mean[0] - 20.0 / 9.0));
  }

  const std::size_t kernels[] = {1, 2, 3, 5};
  const std::size_t channels[] = {1, 2, 4};
  while (res.cases < cases) {
    const std::size_t K = kernels[rng.index(4)];
    const std::size_t C = channels[rng.index(3)];
    const std::size_t Cp = channels[rng.index(3)];
    const std::size_t B = 1 + rng.index(3);
    const std::size_t H = 2 + rng.index(5);
    const std::size_t W = 2 + rng.index(5);
    const ConvSpec spec{Cp, C, K, 1, K - 1};

    const Tensor a = random_tensor(rng, {B, C, H, W}, -1.0, 1.0);
    const Tensor weight = random_tensor(rng, {Cp, C, K, K}, -1.0, 1.0);

    const Tensor direct = avg_pool(conv2d_forward(a, spec, weight));
    const Tensor via_means =
        avg_pool(conv2d_forward(avg_pool_dp(a), spec, weight));

    // Closed form: scale * sum_c (kernel sum) * channel mean.
    const Tensor mean_in = avg_pool(a);
    const std::size_t Ho = spec.out_extent(H), Wo = spec.out_extent(W);
    const double scale = static_cast<double>(H * W) /
                         static_cast<double>(Ho * Wo);
    Tensor closed({Cp});
    for (std::size_t o = 0; o < Cp; ++o) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        double wsum = 0.0;
        for (std::size_t i = 0; i < K * K; ++i) {
          wsum += weight[(o * C + c) * K * K + i];
        }
        acc += wsum * mean_in[c];
      }
      closed[o] = scale * acc;
    }

    const double err = std::max(max_abs_diff(direct, via_means),
                                max_abs_diff(direct, closed));
    record(res, err);
  }
  return res;
}

PropertyResult check_recovery_paths(std::size_t cases, std::uint64_t seed) {
  PropertyResult res;
  res.name = "recovery-paths-agree";
  res.limit = 1e-9;
  Rng rng(seed);

  while (res.cases < cases) {
    const std::size_t K = 1 + rng.index(5);
    const std::size_t C = 1 + rng.index(3);
    const std::size_t Cp = 1 + rng.index(3);
    const std::size_t H = 3 + rng.index(6);
    const std::size_t W = 3 + rng.index(6);
    const bool with_bias = rng.index(2) == 1;
    ConvSpec spec{Cp, C, K, 1, K - 1};
    spec.has_bias = with_bias;

    const Tensor weight = random_tensor(rng, {Cp, C, K, K}, -1.0, 1.0);
    const Tensor bias = random_tensor(rng, {Cp}, -1.0, 1.0);
    XconvTaskRecord rec = XconvTaskRecord::init(Cp, C, 1);
    rec.pre_means[0] = random_tensor(rng, {C}, -2.0, 2.0);
    rec.in_h = H;
    rec.in_w = W;
    rec.has_spatial = true;

    const Tensor broad = xconv_recover_mean(
        rec, spec, weight, with_bias ? &bias : nullptr,
        RecoveryPath::broadcast);
    const Tensor closed = xconv_recover_mean(
        rec, spec, weight, with_bias ? &bias : nullptr,
        RecoveryPath::closed_form);
    record(res, max_abs_diff(broad, closed));
  }
  return res;
}

PropertyResult check_polyphase(std::size_t cases, std::uint64_t seed) {
  PropertyResult res;
  res.name = "polyphase-decomposition";
  res.limit = 1e-12;
  Rng rng(seed);

  while (res.cases < cases) {
    const std::size_t m = 2 + rng.index(2);
    const std::size_t K = m * (1 + rng.index(2));
    const std::size_t C = 1 + rng.index(3);
    const std::size_t Cp = 1 + rng.index(3);
    const std::size_t B = 1 + rng.index(2);
    const std::size_t H = K + m * rng.index(3);
    const std::size_t W = K + m * rng.index(3);
    const ConvSpec spec{Cp, C, K, m, 0};

    const Tensor a = random_tensor(rng, {B, C, H, W}, -1.0, 1.0);
    const Tensor weight = random_tensor(rng, {Cp, C, K, K}, -1.0, 1.0);

    const Tensor direct = conv2d_forward(a, spec, weight);
    const Tensor summed = polyphase_conv_sum(a, spec, weight);
    const double rel =
        max_abs_diff(direct, summed) / std::max(1.0, max_abs(direct));

    // A freshly captured bank must equal per-phase pooling bit for bit.
    XconvTaskRecord rec = XconvTaskRecord::init(Cp, C, m);
    xconv_update_pre_means(a, rec, 1.0);
    const std::vector<Tensor> parts = polyphase_split(a, m);
    double phase_err = 0.0;
    for (std::size_t idx = 0; idx < m * m; ++idx) {
      phase_err = std::max(
          phase_err, max_abs_diff(avg_pool(parts[idx]), rec.pre_means[idx]));
    }
    record(res, std::max(rel, phase_err));
  }
  return res;
}

PropertyResult check_recovery_under_drift(std::size_t cases,
                                          std::uint64_t seed) {
  PropertyResult res;
  res.name = "recovery-under-drift";
  res.limit = 1e-8;
  Rng rng(seed);

  while (res.cases < cases) {
    const std::size_t K = 2 + rng.index(2);
    const std::size_t C = 1 + rng.index(2);
    const std::size_t Cp = 1 + rng.index(2);
    const std::size_t H = 4 + rng.index(3);
    const std::size_t W = 4 + rng.index(3);
    const ConvSpec spec{Cp, C, K, 1, K - 1};

    // Inputs with nonzero channel means, so drift visibly moves the stats.
    const Tensor x = random_tensor(rng, {8, C, H, W}, 0.0, 1.0);
    Tensor w0({Cp, C, K, K});
    for (std::size_t i = 0; i < w0.size(); ++i) w0[i] = rng.normal(0.0, 0.5);

    // Converge running statistics on the fixed batch through the real
    // update paths (residual decays as 0.9^steps).
    XconvTaskRecord rec = XconvTaskRecord::init(Cp, C, 1);
    BatchNormState bn = BatchNormState::init(Cp);
    const Tensor post0 = conv2d_forward(x, spec, w0);
    for (int step = 0; step < 250; ++step) {
      xconv_update_pre_means(x, rec, 0.1);
      BnCache cache;
      bn_forward_train(post0, bn, cache);
    }

    Tensor w1 = w0;
    for (std::size_t i = 0; i < w1.size(); ++i) {
      w1[i] += rng.normal(0.0, 0.5);
    }

    const Tensor true_mean = avg_pool(conv2d_forward(x, spec, w1));
    const Tensor recovered = xconv_recover_mean(rec, spec, w1);
    const double err_recovered = max_abs_diff(recovered, true_mean);
    const double err_stale = max_abs_diff(bn.running_mean, true_mean);

    ++res.cases;
    res.worst = std::max(res.worst, err_recovered);
    if (!(err_recovered < res.limit) || err_stale < 10.0 * err_recovered) {
      ++res.failures;
    }
  }
  return res;
}

PropertyResult check_gradients(std::size_t cases, std::uint64_t seed) {
  PropertyResult res;
  res.name = "layer-gradients";
  res.limit = 1e-6;
  Rng rng(seed);

  // Probes a few coordinates of one tensor against central differences of
  // the projected output; returns the worst relative error.
  const auto probe = [&rng](Tensor& param, const Tensor& analytic,
                            const std::function<double()>& f) {
    double worst = 0.0;
    const std::size_t probes = std::min<std::size_t>(3, param.size());
    for (std::size_t p = 0; p < probes; ++p) {
      const std::size_t idx = rng.index(param.size());
      worst = std::max(worst, rel_err(analytic[idx],
                                      central_diff(param, idx, f)));
    }
    return worst;
  };

  for (std::size_t inst = 0; inst < cases; ++inst) {
    // Convolution, alternating exact-recovery and strided geometry.
    {
      const bool strided = inst % 2 == 1;
      const std::size_t K = strided ? 2 : 1 + rng.index(3);
      const std::size_t C = 1 + rng.index(2);
      const std::size_t Cp = 1 + rng.index(2);
      const std::size_t H = strided ? 2 + 2 * rng.index(3) : 3 + rng.index(3);
      ConvSpec spec{Cp, C, K, strided ? std::size_t{2} : std::size_t{1},
                    strided ? std::size_t{0} : K - 1};
      spec.has_bias = rng.index(2) == 1;

      Tensor a = random_tensor(rng, {2, C, H, H}, -1.0, 1.0);
      Tensor weight = random_tensor(rng, {Cp, C, K, K}, -1.0, 1.0);
      Tensor bias = random_tensor(rng, {Cp}, -0.5, 0.5);
      const Tensor* bptr = spec.has_bias ? &bias : nullptr;
      const Tensor proj = random_tensor(
          rng, conv2d_forward(a, spec, weight, bptr).shape(), -1.0, 1.0);
      const auto f = [&] {
        return dot(proj, conv2d_forward(a, spec, weight, bptr));
      };
      const ConvGrads g = conv2d_backward(a, spec, weight, proj);
      double err = std::max(probe(a, g.grad_input, f),
                            probe(weight, g.grad_weight, f));
      if (spec.has_bias) err = std::max(err, probe(bias, g.grad_bias, f));
      record(res, err);
    }

    // Train-mode normalization, classic and task-record flavors; both
    // normalize with batch moments, so running statistics do not enter
    // the differentiated path.
    for (int flavor = 0; flavor < 2; ++flavor) {
      const bool task_record = flavor == 1;
      const std::size_t C = 1 + rng.index(3);
      Tensor a = random_tensor(rng, {3, C, 3, 3}, -1.0, 1.0);
      Tensor gamma = random_tensor(rng, {C}, 0.5, 1.5);
      Tensor beta = random_tensor(rng, {C}, -0.5, 0.5);
      const Tensor proj = random_tensor(rng, a.shape(), -1.0, 1.0);
      const auto forward = [&] {
        BnCache cache;
        if (task_record) {
          XconvTaskRecord rec = XconvTaskRecord::init(C, 1, 1);
          rec.gamma = gamma;
          rec.beta = beta;
          return xconv_forward_train(a, rec, 0.1, 1e-5, cache);
        }
        BatchNormState st = BatchNormState::init(C);
        st.gamma = gamma;
        st.beta = beta;
        return bn_forward_train(a, st, cache);
      };
      const auto f = [&] { return dot(proj, forward()); };
      BnCache cache;
      if (task_record) {
        XconvTaskRecord rec = XconvTaskRecord::init(C, 1, 1);
        rec.gamma = gamma;
        rec.beta = beta;
        xconv_forward_train(a, rec, 0.1, 1e-5, cache);
      } else {
        BatchNormState st = BatchNormState::init(C);
        st.gamma = gamma;
        st.beta = beta;
        bn_forward_train(a, st, cache);
      }
      const BnGrads g = bn_backward(cache, proj);
      const double err = std::max({probe(a, g.grad_input, f),
                                   probe(gamma, g.grad_gamma, f),
                                   probe(beta, g.grad_beta, f)});
      record(res, err);
    }

    // ReLU, probed away from the kink.
    {
      Tensor a = random_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0);
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::abs(a[i]) < 1e-3) a[i] = 0.5;
      }
      const Tensor proj = random_tensor(rng, a.shape(), -1.0, 1.0);
      Tensor mask;
      relu_forward(a, &mask);
      const Tensor analytic = relu_backward(mask, proj);
      const auto f = [&] { return dot(proj, relu_forward(a)); };
      record(res, probe(a, analytic, f));
    }

    // Fully connected layer.
    {
      const std::size_t in = 2 + rng.index(4), out_dim = 1 + rng.index(3);
      Tensor x = random_tensor(rng, {2, in}, -1.0, 1.0);
      Tensor weight = random_tensor(rng, {out_dim, in}, -1.0, 1.0);
      Tensor bias = random_tensor(rng, {out_dim}, -0.5, 0.5);
      const Tensor proj = random_tensor(rng, {2, out_dim}, -1.0, 1.0);
      const auto f = [&] {
        return dot(proj, linear_forward(x, weight, bias));
      };
      const LinearGrads g = linear_backward(x, weight, proj);
      const double err = std::max({probe(x, g.grad_input, f),
                                   probe(weight, g.grad_weight, f),
                                   probe(bias, g.grad_bias, f)});
      record(res, err);
    }

    // Softmax cross-entropy against its loss value.
    {
      const std::size_t classes = 2 + rng.index(4);
      Tensor logits = random_tensor(rng, {3, classes}, -2.0, 2.0);
      std::vector<std::size_t> labels;
      for (int b = 0; b < 3; ++b) labels.push_back(rng.index(classes));
      const auto f = [&] {
        return softmax_cross_entropy(logits, labels).loss;
      };
      const SoftmaxCeResult ce = softmax_cross_entropy(logits, labels);
      const Tensor analytic =
          softmax_cross_entropy_backward(ce.probs, labels);
      record(res, probe(logits, analytic, f));
    }
  }
  return res;
}

PropertyResult check_metrics(std::size_t cases, std::uint64_t seed) {
  PropertyResult res;
  res.name = "metrics-oracle";
  res.limit = 1e-15;
  Rng rng(seed);

  // Dense brute-force recomputation, independent of the triangular storage.
  const auto acc_oracle = [](const std::vector<std::vector<double>>& m) {
    const std::size_t T = m.size();
    double s = 0.0;
    for (std::size_t i = 0; i < T; ++i) s += m[i][T - 1];
    return s / static_cast<double>(T);
  };
  const auto fgt_oracle = [](const std::vector<std::vector<double>>& m) {
    const std::size_t T = m.size();
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < T; ++i) {
      double best = -1e300;
      for (std::size_t j = i; j < T; ++j) {
        best = std::max(best, m[i][j] - m[i][T - 1]);
      }
      s += best;
    }
    return s / static_cast<double>(T - 1);
  };

  {
    AccuracyMatrix m(3);
    m.set(0, 0, 0.9);
    m.set(0, 1, 0.8);
    m.set(0, 2, 0.7);
    m.set(1, 1, 0.9);
    m.set(1, 2, 0.85);
    m.set(2, 2, 0.95);
    const double err = std::max(std::abs(acc(m) - 5.0 / 6.0),
                                std::abs(fgt(m).value - 0.125));
    record(res, err);
  }

  while (res.cases < cases) {
    const std::size_t T = 2 + rng.index(6);
    AccuracyMatrix m(T);
    std::vector<std::vector<double>> dense(T, std::vector<double>(T, 0.0));
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = i; j < T; ++j) {
        dense[i][j] = rng.uniform();
        m.set(i, j, dense[i][j]);
      }
    }
    const double err = std::max(std::abs(acc(m) - acc_oracle(dense)),
                                std::abs(fgt(m).value - fgt_oracle(dense)));
    record(res, err);
  }
  return res;
}

std::vector<PropertyResult> run_property_suite(std::size_t cases,
                                               std::uint64_t seed) {
  return {check_mean_commutation(cases, seed),
          check_recovery_paths(cases, seed + 1),
          check_polyphase(cases, seed + 2),
          check_recovery_under_drift(std::max<std::size_t>(cases / 4, 10),
                                     seed + 3),
          check_gradients(std::max<std::size_t>(cases / 4, 10), seed + 4),
          check_metrics(cases, seed + 5)};
}

std::string format_report(const std::vector<PropertyResult>& results) {
  std::ostringstream out;
  out.precision(3);
  for (const PropertyResult& r : results) {
    out << (r.passed() ? "PASS" : "FAIL") << "  " << r.name << "  cases="
        << r.cases << " failures=" << r.failures << " worst=" << r.worst
        << " limit=" << r.limit << "\n";
  }
  return out.str();
}

bool all_passed(const std::vector<PropertyResult>& results) {
  for (const PropertyResult& r : results) {
    if (!r.passed()) return false;
  }
  return !results.empty();
}

}  // namespace confit::verify
