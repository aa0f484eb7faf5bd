// Dense row-major tensor of 64-bit floats and the library's error types.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bdu {

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    for (auto e : shape_)
      if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape_));
    data_.assign(shape_numel(shape_), fill);
  }
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessor (N, C, H, W).
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double a) {
    for (auto& v : data_) v *= a;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  bool operator==(const Tensor& o) const = default;

  void check_same(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_)
      throw DimensionError(std::string(what) + ": shape " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

  // Slice along the leading axis.
  Tensor slice0(std::size_t i) const {
    Shape s(shape_.begin() + 1, shape_.end());
    if (s.empty()) s = {1};
    const std::size_t n = shape_numel(s);
    return Tensor(s, std::vector<double>(data_.begin() + i * n, data_.begin() + (i + 1) * n));
  }
  void set_slice0(std::size_t i, const Tensor& t) {
    const std::size_t n = data_.size() / shape_[0];
    if (t.size() != n) throw DimensionError("set_slice0: slice size mismatch");
    std::copy(t.data_.begin(), t.data_.end(), data_.begin() + i * n);
  }

  // Stack equally shaped tensors along a new leading axis.
  static Tensor stack(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("stack: no tensors");
    Shape s{parts.size()};
    s.insert(s.end(), parts[0].shape().begin(), parts[0].shape().end());
    Tensor out(s);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      parts[i].check_same(parts[0], "stack");
      out.set_slice0(i, parts[i]);
    }
    return out;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double dot(const Tensor& a, const Tensor& b) {
  a.check_same(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double sum(const Tensor& a) { return std::accumulate(a.vec().begin(), a.vec().end(), 0.0); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.check_same(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace bdu
