#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace divid {

// Dense float tensor with shared storage. Copies are shallow; use clone()
// for an independent buffer. reshaped() aliases the same storage.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<float>>(count(shape_), 0.0f)) {}

  Tensor(std::vector<int64_t> shape, float fill)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<float>>(count(shape_), fill)) {}

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, float v) { return Tensor(std::move(shape), v); }

  static Tensor scalar(float v) { return Tensor({1}, v); }

  static Tensor from_vector(std::vector<int64_t> shape, const std::vector<float>& v) {
    Tensor t(std::move(shape));
    if (v.size() != t.size()) throw std::invalid_argument("from_vector: size mismatch");
    std::copy(v.begin(), v.end(), t.data());
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  size_t size() const { return data_ ? data_->size() : 0; }

  float* data() { return data_->data(); }
  const float* data() const { return data_->data(); }

  float& operator[](size_t i) { return (*data_)[i]; }
  float operator[](size_t i) const { return (*data_)[i]; }

  float item() const {
    if (size() != 1) throw std::logic_error("item(): tensor is not scalar");
    return (*data_)[0];
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<float>>(*data_);
    return t;
  }

  // Aliasing reshape; element count must match.
  Tensor reshaped(std::vector<int64_t> shape) const {
    if (count(shape) != static_cast<int64_t>(size()))
      throw std::invalid_argument("reshaped: element count mismatch " + shape_str() );
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(float v) { std::fill(data_->begin(), data_->end(), v); }

  void add_(const Tensor& o) {
    assert(size() == o.size());
    float* a = data();
    const float* b = o.data();
    for (size_t i = 0; i < size(); ++i) a[i] += b[i];
  }

  void scale_(float s) {
    float* a = data();
    for (size_t i = 0; i < size(); ++i) a[i] *= s;
  }

  bool shares_storage(const Tensor& o) const { return data_ == o.data_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

  static int64_t count(const std::vector<int64_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<int64_t>());
  }

 private:
  std::vector<int64_t> shape_;
  std::shared_ptr<std::vector<float>> data_;
};

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: size mismatch");
  float m = 0.0f;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(const Tensor& t) {
  for (size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

}  // namespace divid
