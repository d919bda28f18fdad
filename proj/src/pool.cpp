#include "confit/pool.hpp"

namespace confit {

Tensor avg_pool(const Tensor& a) {
  check_rank(a, 4, "avg_pool input");
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor out({C}, a.dtype());
  const double inv = 1.0 / static_cast<double>(B * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
          s += a.at4(b, c, h, w);
        }
      }
    }
    out[c] = s * inv;
  }
  out.quantize();
  return out;
}

Tensor avg_pool_dp(const Tensor& a) {
  check_rank(a, 4, "avg_pool_dp input");
  const Tensor mean = avg_pool(a);
  const std::size_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor out(a.shape(), a.dtype());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
          out.at4(b, c, h, w) = mean[c];
        }
      }
    }
  }
  out.quantize();
  return out;
}

}  // namespace confit
