#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <memory>
#include <new>
#include <span>
#include <vector>

#include "mmdense/error.hpp"

namespace mmdense {

inline constexpr std::size_t kTensorAlignment = 64;

// 64-byte aligned storage whose value-initialisation is
// default-initialisation, so tensors about to be overwritten skip the zero
// fill. Vectorised reductions peel up to the first aligned element, so a
// fixed alignment also fixes their summation order.
template <class T>
struct DefaultInitAllocator {
  using value_type = T;
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() noexcept = default;
  template <class U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kTensorAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kTensorAlignment}); }
  template <class U>
  friend bool operator==(const DefaultInitAllocator&, const DefaultInitAllocator<U>&) noexcept {
    return true;
  }
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major n-d array. `T` is float for training and inference,
/// double for gradient checking.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_dims();
    MMDENSE_REQUIRE(data_.size() == shape_size(shape_), Errc::shape_mismatch,
            "element count " + std::to_string(data_.size()) + " does not match shape " + to_string(shape_));
  }

  /// Contents unspecified; for outputs every element of which is written.
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.check_dims();
    t.data_.resize(shape_size(t.shape_));
#ifdef MMDENSE_POISON_UNINITIALIZED
    std::fill(t.data_.begin(), t.data_.end(), std::numeric_limits<T>::quiet_NaN());
#endif
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_); }

  /// Uniform in [lo, hi) from a caller-owned engine.
  template <class Rng>
  static Tensor uniform(Shape shape, T lo, T hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data_) v = static_cast<T>(d(rng));
    return t;
  }

  template <class Rng>
  static Tensor normal(Shape shape, T mean, T stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> d(mean, stddev);
    for (auto& v : t.data_) v = static_cast<T>(d(rng));
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  const T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    MMDENSE_REQUIRE(shape_size(s) == size(), Errc::shape_mismatch,
            "cannot reshape " + to_string(shape_) + " to " + to_string(s));
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_dims() const {
    for (auto d : shape_)
      MMDENSE_REQUIRE(d > 0, Errc::invalid_argument, "tensor dimensions must be positive, got " + to_string(shape_));
  }

  Shape shape_;
  std::vector<T, DefaultInitAllocator<T>> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  MMDENSE_REQUIRE(a.shape() == b.shape(), Errc::shape_mismatch, to_string(a.shape()) + " vs " + to_string(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
double l2_norm(const Tensor<T>& a) {
  double s = 0;
  for (auto v : a.values()) s += double(v) * double(v);
  return std::sqrt(s);
}

}  // namespace mmdense
