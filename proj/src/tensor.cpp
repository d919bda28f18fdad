#include "confit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace confit {

Dtype dtype_from_string(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

std::string dtype_to_string(Dtype d) {
  return d == Dtype::f32 ? "f32" : "f64";
}

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape, Dtype dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("zero dimension in shape " + shape_to_string(shape_));
  }
  data_.assign(shape_product(shape_), 0.0);
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, Dtype dtype) {
  return Tensor(std::move(shape), dtype);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, Dtype dtype) {
  Tensor t(std::move(shape), dtype);
  for (double& v : t.data_) v = value;
  t.quantize();
  return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> data, Dtype dtype) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = dtype;
  if (shape_product(t.shape_) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_to_string(t.shape_));
  }
  t.data_ = std::move(data);
  t.quantize();
  return t;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) {
    throw ShapeError("dim index " + std::to_string(i) + " out of rank " +
                     std::to_string(shape_.size()));
  }
  return shape_[i];
}

void Tensor::set_dtype(Dtype d) {
  dtype_ = d;
  quantize();
}

void Tensor::quantize() {
  if (dtype_ != Dtype::f32) return;
  for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
  if (shape_product(new_shape) != data_.size()) {
    throw ShapeError("reshape " + shape_to_string(shape_) + " -> " +
                     shape_to_string(new_shape) + " changes element count");
  }
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.data_ = data_;
  t.dtype_ = dtype_;
  return t;
}

void check_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " +
                     std::to_string(rank) + ", got shape " +
                     shape_to_string(t.shape()));
  }
}

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape(), a.dtype());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  out.quantize();
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.dtype());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  out.quantize();
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.dtype());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  out.quantize();
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape(), a.dtype());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  out.quantize();
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = std::fabs(a[i] - b[i]);
    if (d > m) m = d;
  }
  return m;
}

}  // namespace confit
