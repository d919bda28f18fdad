#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "confit/error.hpp"

namespace confit {

/// Storage precision tag. Values are always held as double; f32 means every
/// public operation rounds its result through IEEE float before returning
/// ("storage rounding"), so accumulation happens at full precision but the
/// representable set matches 32-bit storage.
enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

Dtype dtype_from_string(const std::string& s);
std::string dtype_to_string(Dtype d);

/// Dense row-major N-dimensional array; the universal value type.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, Dtype dtype = Dtype::f64);

  static Tensor zeros(std::vector<std::size_t> shape, Dtype dtype = Dtype::f64);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     Dtype dtype = Dtype::f64);
  static Tensor from_data(std::vector<std::size_t> shape,
                          std::vector<double> data, Dtype dtype = Dtype::f64);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const;
  Dtype dtype() const { return dtype_; }

  // Re-tags the precision; switching to f32 rounds the stored values.
  void set_dtype(Dtype d);

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Row-major offset helpers for the common ranks.
  std::size_t index2(std::size_t i, std::size_t j) const {
    return i * shape_[1] + j;
  }
  std::size_t index4(std::size_t b, std::size_t c, std::size_t h,
                     std::size_t w) const {
    return ((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  double& at2(std::size_t i, std::size_t j) { return data_[index2(i, j)]; }
  double at2(std::size_t i, std::size_t j) const { return data_[index2(i, j)]; }
  double& at4(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index4(b, c, h, w)];
  }
  double at4(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index4(b, c, h, w)];
  }

  // Rounds storage through float when dtype is f32; no-op at f64. Every
  // public operation producing a Tensor calls this on its result.
  void quantize();

  bool all_finite() const;

  Tensor reshaped(std::vector<std::size_t> new_shape) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && dtype_ == other.dtype_ &&
           data_ == other.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  Dtype dtype_ = Dtype::f64;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_to_string(const std::vector<std::size_t>& shape);

void check_rank(const Tensor& t, std::size_t rank, const char* what);

// Elementwise helpers; result keeps a's dtype.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace confit
