#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace icseg {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// All tensor storage is 64-byte aligned so vectorized kernels take identical
// code paths on every allocation; bit-determinism depends on this.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename Scalar>
using MatrixMap =
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Scalar>
using ConstMatrixMap =
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Scalar>
using VectorMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using ConstVectorMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

// Dense row-major tensor. Values are treated as immutable once an op has
// produced them; mutation is reserved for construction and the optimizer.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(shape_numel(shape_)), Scalar(0));
  }

  Tensor(Shape shape, AlignedVector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check(static_cast<int64_t>(data_.size()) == shape_numel(shape_),
          "tensor data length does not match shape " + shape_str(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> vals)
      : Tensor(std::move(shape), AlignedVector<Scalar>(vals.begin(), vals.end())) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(Scalar v) { return full({1}, v); }

  static Tensor identity(int64_t n) {
    Tensor t({n, n});
    for (int64_t i = 0; i < n; ++i) t.data_[static_cast<size_t>(i * n + i)] = Scalar(1);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  AlignedVector<Scalar>& storage() { return data_; }
  const AlignedVector<Scalar>& storage() const { return data_; }

  Scalar& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  Scalar operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  Scalar& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  Scalar at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  Scalar& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  Scalar at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  Scalar& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[static_cast<size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
  }
  Scalar at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[static_cast<size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
  }

  // Flat Eigen views.
  VectorMap<Scalar> vec() { return VectorMap<Scalar>(data(), size()); }
  ConstVectorMap<Scalar> vec() const { return ConstVectorMap<Scalar>(data(), size()); }

  MatrixMap<Scalar> mat(int64_t rows, int64_t cols) {
    check(rows * cols == size(), "matrix view size mismatch");
    return MatrixMap<Scalar>(data(), rows, cols);
  }
  ConstMatrixMap<Scalar> mat(int64_t rows, int64_t cols) const {
    check(rows * cols == size(), "matrix view size mismatch");
    return ConstMatrixMap<Scalar>(data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    check(shape_numel(shape) == size(),
          "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool all_finite() const {
    for (const Scalar& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool bit_equal(const Tensor& o) const {
    return shape_ == o.shape_ &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(Scalar)) == 0;
  }

  Scalar norm2() const {
    double acc = 0;
    for (const Scalar& v : data_) acc += double(v) * double(v);
    return Scalar(std::sqrt(acc));
  }

  static constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<Scalar, float>) return "f32";
    else if constexpr (std::is_same_v<Scalar, double>) return "f64";
    else return "other";
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<T>(data_[static_cast<size_t>(i)]);
    return out;
  }

  // Plain (non-differentiated) elementwise helpers, used outside the tape.
  Tensor& operator+=(const Tensor& o) {
    check(same_shape(o), "`+=` shape mismatch");
    vec() += o.vec();
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check(same_shape(o), "`-=` shape mismatch");
    vec() -= o.vec();
    return *this;
  }
  Tensor& operator*=(Scalar c) {
    vec() *= c;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, Scalar c) { return a *= c; }
  friend Tensor operator*(Scalar c, Tensor a) { return a *= c; }

 private:
  Shape shape_;
  AlignedVector<Scalar> data_;
};

// Trainable (or frozen) model parameter. Gradient always matches the value
// shape; frozen parameters are skipped by backward and keep a zero gradient.
template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor<Scalar> v, bool train = true)
      : value(std::move(v)), grad(value.shape()), trainable(train) {}

  void zero_grad() { std::fill(grad.storage().begin(), grad.storage().end(), Scalar(0)); }
  int64_t size() const { return value.size(); }
};

}  // namespace icseg
