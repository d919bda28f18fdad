#include <cmath>

#include "confit/bn.hpp"
#include "confit/error.hpp"
#include "confit/layers.hpp"
#include "confit/pool.hpp"
#include "confit/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace confit;
using testutil::central_diff;
using testutil::random_tensor;
using testutil::rel_err;

namespace {

// Brute-force normalization oracle: per-channel mean/var loops, then the
// normalize-and-affine formula, written independently of bn.cpp.
Tensor bn_train_oracle(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                       double eps) {
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor out(a.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mu = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) mu += a.at4(b, c, h, w);
    mu /= double(B * H * W);
    double var = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double d = a.at4(b, c, h, w) - mu;
          var += d * d;
        }
    var /= double(B * H * W);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          out.at4(b, c, h, w) =
              gamma[c] * (a.at4(b, c, h, w) - mu) / std::sqrt(var + eps) +
              beta[c];
  }
  return out;
}

void channel_stats(const Tensor& a, std::size_t c, double& mean, double& var) {
  const std::size_t B = a.dim(0), H = a.dim(2), W = a.dim(3);
  mean = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) mean += a.at4(b, c, h, w);
  mean /= double(B * H * W);
  var = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const double d = a.at4(b, c, h, w) - mean;
        var += d * d;
      }
  var /= double(B * H * W);
}

}  // namespace

TEST_CASE("bn train standardizes and updates running stats") {
  // Channel with mean 5, variance 4.
  Tensor a = Tensor::from_data({1, 1, 2, 2}, {3, 7, 3, 7});
  BatchNormState st = BatchNormState::init(1);
  st.stab_eps = 1e-12;
  BnCache cache;
  Tensor out = bn_forward_train(a, st, cache);

  double m, v;
  channel_stats(out, 0, m, v);
  CHECK(std::abs(m) < 1e-9);
  CHECK(v == doctest::Approx(1.0).epsilon(1e-6));

  // EMA step from (0, 1) toward (5, 4) with momentum 0.1.
  CHECK(st.running_mean[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(st.running_var[0] == doctest::Approx(1.0 + 0.1 * 3.0).epsilon(1e-12));

  // Direct EMA substitution: mu_r = 0, eta = 0.1, batch mean 1 -> 0.1.
  BatchNormState st2 = BatchNormState::init(1);
  Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0);
  BnCache c2;
  bn_forward_train(ones, st2, c2);  // batch mean 1, batch var 0
  CHECK(st2.running_mean[0] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("bn train matches brute-force oracle") {
  Rng rng(57);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor a = random_tensor(rng, {2, 3, 4, 4}, -2.0, 2.0);
    BatchNormState st = BatchNormState::init(3);
    for (std::size_t c = 0; c < 3; ++c) {
      st.gamma[c] = rng.uniform(0.5, 1.5);
      st.beta[c] = rng.uniform(-1.0, 1.0);
    }
    Tensor want = bn_train_oracle(a, st.gamma, st.beta, st.stab_eps);
    BnCache cache;
    Tensor got = bn_forward_train(a, st, cache);
    CHECK(max_abs_diff(got, want) < 1e-10);
  }
}

TEST_CASE("bn degenerate batch is rejected") {
  BatchNormState st = BatchNormState::init(1);
  BnCache cache;
  CHECK_THROWS_AS(bn_forward_train(Tensor({1, 1, 1, 1}), st, cache),
                  StateError);
}

TEST_CASE("bn eval") {
  BatchNormState st = BatchNormState::init(2);
  Rng rng(61);
  Tensor a = random_tensor(rng, {2, 2, 3, 3});

  // mu_r = 0, var_r = 1, gamma = 1, beta = 0, eps = 0: identity.
  st.stab_eps = 0.0;
  Tensor out = bn_forward_eval(a, st);
  CHECK(max_abs_diff(out, a) < 1e-15);

  // gamma = 0: constant beta.
  BatchNormState st0 = BatchNormState::init(2);
  st0.gamma = Tensor::zeros({2});
  st0.beta = Tensor::from_data({2}, {0.3, -0.7});
  Tensor outb = bn_forward_eval(a, st0);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 3; ++w) {
        CHECK(outb.at4(b, 0, h, w) == 0.3);
        CHECK(outb.at4(b, 1, h, w) == -0.7);
      }

  // Plugging the batch moments into the running slots reproduces train-mode
  // normalization.
  BatchNormState st1 = BatchNormState::init(2);
  BnCache cache;
  Tensor train_out = bn_forward_train(a, st1, cache);
  BatchNormState st2 = BatchNormState::init(2);
  st2.running_mean = cache.batch_mean;
  st2.running_var = cache.batch_var;
  Tensor eval_out = bn_forward_eval(a, st2);
  CHECK(max_abs_diff(train_out, eval_out) < 1e-12);
}

TEST_CASE("bn backward matches finite differences") {
  Rng rng(67);
  for (int rep = 0; rep < 6; ++rep) {
    Tensor a = random_tensor(rng, {2, 2, 3, 3});
    Tensor gamma = random_tensor(rng, {2}, 0.5, 1.5);
    Tensor beta = random_tensor(rng, {2}, -0.5, 0.5);
    Tensor R = random_tensor(rng, a.shape());
    const double eps = 1e-5;

    auto loss = [&]() {
      BatchNormState st = BatchNormState::init(2);
      st.gamma = gamma;
      st.beta = beta;
      st.stab_eps = eps;
      BnCache c;
      return dot(bn_forward_train(a, st, c), R);
    };

    BatchNormState st = BatchNormState::init(2);
    st.gamma = gamma;
    st.beta = beta;
    st.stab_eps = eps;
    BnCache cache;
    bn_forward_train(a, st, cache);
    BnGrads g = bn_backward(cache, R);

    for (int k = 0; k < 6; ++k) {
      const std::size_t ia = rng.index(a.size());
      CHECK(rel_err(g.grad_input[ia], central_diff(a, ia, loss)) < 1e-6);
    }
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(rel_err(g.grad_gamma[c], central_diff(gamma, c, loss)) < 1e-6);
      CHECK(rel_err(g.grad_beta[c], central_diff(beta, c, loss)) < 1e-6);
    }

    CHECK_THROWS_AS(bn_backward(cache, R), StateError);  // single-use cache
  }
}

TEST_CASE("bn backward zero grad") {
  Rng rng(71);
  Tensor a = random_tensor(rng, {1, 2, 2, 2});
  BatchNormState st = BatchNormState::init(2);
  BnCache cache;
  bn_forward_train(a, st, cache);
  BnGrads g = bn_backward(cache, Tensor::zeros(a.shape()));
  CHECK(l2_norm(g.grad_input) == 0.0);
  CHECK(l2_norm(g.grad_gamma) == 0.0);
  CHECK(l2_norm(g.grad_beta) == 0.0);
}

TEST_CASE("xconv pre-mean updates") {
  // m = 1: EMA from 0 toward batch mean 1 with momentum 0.1.
  XconvTaskRecord rec = XconvTaskRecord::init(1, 1, 1);
  Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0);
  xconv_update_pre_means(ones, rec, 0.1);
  CHECK(rec.pre_means[0][0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(rec.in_h == 2);
  CHECK(rec.has_spatial);

  // Constant input: monotone convergence to the constant.
  double prev = rec.pre_means[0][0];
  for (int i = 0; i < 50; ++i) {
    xconv_update_pre_means(ones, rec, 0.1);
    const double cur = rec.pre_means[0][0];
    CHECK(cur >= prev);
    CHECK(cur <= 1.0);
    prev = cur;
  }
  CHECK(prev == doctest::Approx(1.0).epsilon(1e-2));

  // Frozen records reject updates.
  rec.frozen = true;
  CHECK_THROWS_AS(xconv_update_pre_means(ones, rec, 0.1), StateError);

  // Heterogeneous spatial sizes within a task are rejected.
  XconvTaskRecord rec2 = XconvTaskRecord::init(1, 1, 1);
  xconv_update_pre_means(ones, rec2, 0.1);
  CHECK_THROWS_AS(xconv_update_pre_means(Tensor::full({1, 1, 4, 4}, 1.0), rec2, 0.1),
                  StateError);
}

TEST_CASE("xconv pre-means per phase match the phase oracle") {
  Rng rng(73);
  Tensor a = random_tensor(rng, {2, 3, 4, 4});
  XconvTaskRecord rec = XconvTaskRecord::init(5, 3, 2);
  xconv_update_pre_means(a, rec, 1.0);  // full replacement
  CHECK(rec.pre_means.size() == 4);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t b = 0; b < 2; ++b)
          for (std::size_t h = i; h < 4; h += 2)
            for (std::size_t w = j; w < 4; w += 2) {
              s += a.at4(b, c, h, w);
              ++n;
            }
        CHECK(rec.pre_means[i * 2 + j][c] ==
              doctest::Approx(s / double(n)).epsilon(1e-13));
      }
    }
}

TEST_CASE("xconv recovery trivial cases") {
  // 1x1 conv, weight 2, stored mean 3: recovered mean 6 on both paths.
  XconvTaskRecord rec = XconvTaskRecord::init(1, 1, 1);
  rec.pre_means[0] = Tensor::from_data({1}, {3.0});
  rec.in_h = rec.in_w = 4;
  rec.has_spatial = true;
  ConvSpec sp;
  sp.kernel = 1;
  Tensor w = Tensor::from_data({1, 1, 1, 1}, {2.0});
  CHECK(xconv_recover_mean(rec, sp, w, nullptr,
                           RecoveryPath::broadcast)[0] ==
        doctest::Approx(6.0).epsilon(1e-12));
  CHECK(xconv_recover_mean(rec, sp, w, nullptr,
                           RecoveryPath::closed_form)[0] ==
        doctest::Approx(6.0).epsilon(1e-12));
  CHECK(rec.recovered_mean.has_value());

  // Zero weight: bias or zero.
  Tensor zw = Tensor::zeros({1, 1, 1, 1});
  CHECK(xconv_recover_mean(rec, sp, zw)[0] == 0.0);
  ConvSpec spb = sp;
  spb.has_bias = true;
  Tensor bias = Tensor::from_data({1}, {-1.25});
  CHECK(xconv_recover_mean(rec, spb, zw, &bias)[0] == -1.25);

  // Missing spatial size.
  XconvTaskRecord fresh = XconvTaskRecord::init(1, 1, 1);
  CHECK_THROWS_AS(xconv_recover_mean(fresh, sp, w), StateError);
}

TEST_CASE("xconv recovery worked case 20/9") {
  XconvTaskRecord rec = XconvTaskRecord::init(1, 1, 1);
  rec.pre_means[0] = Tensor::from_data({1}, {2.5});
  rec.in_h = rec.in_w = 2;
  rec.has_spatial = true;
  ConvSpec sp;
  sp.kernel = 2;
  sp.padding = 1;
  Tensor w = Tensor::from_data({1, 1, 2, 2}, {0.5, 0.5, 0.5, 0.5});  // sum 2
  Tensor got_b = xconv_recover_mean(rec, sp, w, nullptr, RecoveryPath::broadcast);
  Tensor got_c = xconv_recover_mean(rec, sp, w, nullptr, RecoveryPath::closed_form);
  CHECK(got_b[0] == doctest::Approx(20.0 / 9.0).epsilon(1e-12));
  CHECK(got_c[0] == doctest::Approx(20.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("xconv recovery: closed form agrees with broadcast") {
  Rng rng(79);
  const std::size_t kernels[] = {1, 2, 3, 5};
  for (int rep = 0; rep < 20; ++rep) {
    ConvSpec sp;
    sp.kernel = kernels[rng.index(4)];
    sp.in_channels = 1 + rng.index(3);
    sp.out_channels = 1 + rng.index(3);
    sp.padding = sp.kernel - 1;
    XconvTaskRecord rec =
        XconvTaskRecord::init(sp.out_channels, sp.in_channels, 1);
    rec.pre_means[0] = random_tensor(rng, {sp.in_channels});
    rec.in_h = sp.kernel + rng.index(5);
    rec.in_w = sp.kernel + rng.index(5);
    rec.has_spatial = true;
    Tensor w = random_tensor(
        rng, {sp.out_channels, sp.in_channels, sp.kernel, sp.kernel});
    Tensor a_path = xconv_recover_mean(rec, sp, w, nullptr,
                                       RecoveryPath::broadcast);
    Tensor b_path = xconv_recover_mean(rec, sp, w, nullptr,
                                       RecoveryPath::closed_form);
    CHECK(max_abs_diff(a_path, b_path) < 1e-9);
  }

  // Closed form is restricted to the exact-recovery geometry.
  ConvSpec bad;
  bad.kernel = 3;
  bad.padding = 0;
  XconvTaskRecord rec = XconvTaskRecord::init(1, 1, 1);
  rec.pre_means[0] = Tensor::from_data({1}, {1.0});
  rec.in_h = rec.in_w = 4;
  rec.has_spatial = true;
  Tensor w = Tensor::zeros({1, 1, 3, 3});
  CHECK_THROWS_AS(xconv_recover_mean(rec, bad, w, nullptr,
                                     RecoveryPath::closed_form),
                  StateError);
}

TEST_CASE("xconv recovery under weight drift beats stored statistics") {
  // Stat convergence on fixed data, then weight perturbation: the recovered
  // mean tracks the new weights exactly; a stored post-conv mean cannot.
  Rng rng(83);
  ConvSpec sp;
  sp.kernel = 3;
  sp.in_channels = 2;
  sp.out_channels = 3;
  sp.padding = 2;
  Tensor w = random_tensor(rng, {3, 2, 3, 3});
  Tensor data = random_tensor(rng, {4, 2, 6, 6});

  XconvTaskRecord rec = XconvTaskRecord::init(3, 2, 1);
  xconv_update_pre_means(data, rec, 1.0);  // full-batch: exact pre-mean
  Tensor post = conv2d_forward(data, sp, w);
  Tensor stored_mean = avg_pool(post);  // classic BN's converged mu_r

  // Perturb the weights.
  Tensor w2 = w;
  for (std::size_t i = 0; i < w2.size(); ++i) w2[i] += rng.normal(0.0, 0.5);

  Tensor true_mean = avg_pool(conv2d_forward(data, sp, w2));
  Tensor recovered = xconv_recover_mean(rec, sp, w2);

  const double err_xconv = max_abs_diff(recovered, true_mean);
  double err_classic = max_abs_diff(stored_mean, true_mean);
  CHECK(err_xconv < 1e-8);
  CHECK(err_classic > 10.0 * err_xconv);
}

TEST_CASE("xconv strided recovery through phase means") {
  // K = m = 2, padding 0: each output tap sees exactly one sample per phase,
  // so the recovered mean is exact for any weights.
  Rng rng(89);
  ConvSpec sp;
  sp.kernel = 2;
  sp.stride = 2;
  sp.in_channels = 2;
  sp.out_channels = 3;
  Tensor data = random_tensor(rng, {3, 2, 6, 6});
  XconvTaskRecord rec = XconvTaskRecord::init(3, 2, 2);
  xconv_update_pre_means(data, rec, 1.0);

  Tensor w = random_tensor(rng, {3, 2, 2, 2});
  Tensor recovered = xconv_recover_mean(rec, sp, w);
  Tensor true_mean = avg_pool(conv2d_forward(data, sp, w));
  CHECK(max_abs_diff(recovered, true_mean) < 1e-10);
}

TEST_CASE("xconv train mode is bit-identical to classic bn train") {
  Rng rng(97);
  Tensor a = random_tensor(rng, {2, 3, 4, 4});

  BatchNormState st = BatchNormState::init(3);
  st.gamma = random_tensor(rng, {3}, 0.5, 1.5);
  st.beta = random_tensor(rng, {3}, -0.5, 0.5);
  BnCache c1;
  Tensor classic = bn_forward_train(a, st, c1);

  XconvTaskRecord rec = XconvTaskRecord::init(3, 3, 1);
  rec.gamma = st.gamma;
  rec.beta = st.beta;
  BnCache c2;
  Tensor xc = xconv_forward_train(a, rec, 0.1, 1e-5, c2);

  CHECK(max_abs_diff(classic, xc) == 0.0);
  // Both track the same running variance.
  CHECK(max_abs_diff(st.running_var, rec.running_var) == 0.0);
}

TEST_CASE("xconv eval requires recovery and matches task bn when static") {
  Rng rng(101);
  ConvSpec sp;
  sp.kernel = 3;
  sp.in_channels = 2;
  sp.out_channels = 4;
  sp.padding = 2;
  Tensor w = random_tensor(rng, {4, 2, 3, 3});
  Tensor data = random_tensor(rng, {4, 2, 5, 5});
  Tensor post = conv2d_forward(data, sp, w);

  // Full-batch statistics into both a classic state and an xconv record.
  BatchNormState st = BatchNormState::init(4);
  st.momentum = 1.0;
  BnCache c1;
  bn_forward_train(post, st, c1);

  XconvTaskRecord rec = XconvTaskRecord::init(4, 2, 1);
  xconv_update_pre_means(data, rec, 1.0);
  BnCache c2;
  xconv_forward_train(post, rec, 1.0, 1e-5, c2);

  // Stale cache: eval before recovery is an error.
  Tensor probe = random_tensor(rng, {1, 4, 7, 7});
  CHECK_THROWS_AS(xconv_forward_eval(probe, rec, 1e-5), StateError);

  xconv_recover_mean(rec, sp, w);
  Tensor ev_x = xconv_forward_eval(probe, rec, 1e-5);
  Tensor ev_c = bn_forward_eval(probe, st);
  CHECK(max_abs_diff(ev_x, ev_c) < 1e-9);
}

TEST_CASE("relu") {
  Tensor a = Tensor::from_data({1, 1, 1, 4}, {-1.0, 0.0, 2.0, -0.5});
  Tensor mask;
  Tensor out = relu_forward(a, &mask);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 2.0);
  CHECK(out[3] == 0.0);

  Tensor go = Tensor::full(a.shape(), 1.0);
  Tensor gi = relu_backward(mask, go);
  CHECK(gi[0] == 0.0);
  CHECK(gi[2] == 1.0);
}

TEST_CASE("linear forward and backward") {
  Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0});
  Tensor w = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor b = Tensor::from_data({2}, {0.5, -0.5});
  Tensor y = linear_forward(x, w, b);
  CHECK(y.at2(0, 0) == 1.5);
  CHECK(y.at2(0, 1) == 1.5);

  Rng rng(103);
  Tensor xr = random_tensor(rng, {3, 4});
  Tensor wr = random_tensor(rng, {2, 4});
  Tensor br = random_tensor(rng, {2});
  Tensor R = random_tensor(rng, {3, 2});
  auto loss = [&]() { return dot(linear_forward(xr, wr, br), R); };
  LinearGrads g = linear_backward(xr, wr, R);
  for (int k = 0; k < 5; ++k) {
    const std::size_t ix = rng.index(xr.size());
    CHECK(rel_err(g.grad_input[ix], central_diff(xr, ix, loss)) < 1e-6);
    const std::size_t iw = rng.index(wr.size());
    CHECK(rel_err(g.grad_weight[iw], central_diff(wr, iw, loss)) < 1e-6);
  }
  CHECK(rel_err(g.grad_bias[0], central_diff(br, 0, loss)) < 1e-6);
}

TEST_CASE("softmax cross entropy") {
  // Uniform logits: loss = ln(K).
  Tensor logits = Tensor::zeros({2, 4});
  auto res = softmax_cross_entropy(logits, {0, 3});
  CHECK(res.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  for (std::size_t b = 0; b < 2; ++b) {
    double row = 0.0;
    for (std::size_t k = 0; k < 4; ++k) row += res.probs.at2(b, k);
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 4}), DataError);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {0}), DataError);

  // Loss is nonnegative and the gradient matches finite differences.
  Rng rng(107);
  Tensor lg = random_tensor(rng, {3, 5});
  std::vector<std::size_t> labels = {1, 4, 0};
  auto r2 = softmax_cross_entropy(lg, labels);
  CHECK(r2.loss >= 0.0);
  Tensor g = softmax_cross_entropy_backward(r2.probs, labels);
  auto loss = [&]() { return softmax_cross_entropy(lg, labels).loss; };
  for (std::size_t i = 0; i < lg.size(); ++i) {
    CHECK(rel_err(g[i], central_diff(lg, i, loss), 1e-6) < 1e-5);
  }
}

TEST_CASE("labels_from_tensor validates") {
  Tensor good = Tensor::from_data({3}, {0.0, 2.0, 1.0});
  auto v = labels_from_tensor(good, 3);
  CHECK(v[1] == 2);
  CHECK_THROWS_AS(labels_from_tensor(Tensor::from_data({1}, {3.0}), 3),
                  DataError);
  CHECK_THROWS_AS(labels_from_tensor(Tensor::from_data({1}, {-1.0}), 3),
                  DataError);
  CHECK_THROWS_AS(labels_from_tensor(Tensor::from_data({1}, {0.5}), 3),
                  DataError);
}

TEST_CASE("flatten round trip") {
  Rng rng(109);
  Tensor a = random_tensor(rng, {2, 3, 4, 5});
  Tensor f = flatten(a);
  CHECK(f.dim(0) == 2);
  CHECK(f.dim(1) == 60);
  Tensor back = unflatten(f, {2, 3, 4, 5});
  CHECK(back == a);
}
