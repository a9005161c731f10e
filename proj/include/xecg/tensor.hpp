#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace xecg {

/// Errors raised by the numeric core. Each class maps to one failure family
/// so callers can react (e.g. add jitter on a definiteness failure).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DefinitenessError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
/// Non-finite values appeared during a forward pass.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Live/peak byte counter shared by every tensor buffer.
class Arena {
 public:
  static void on_alloc(std::size_t bytes) noexcept;
  static void on_free(std::size_t bytes) noexcept;
  static std::size_t live_bytes() noexcept;
  static std::size_t peak_bytes() noexcept;
  /// Resets the peak to the current live count.
  static void reset_peak() noexcept;

 private:
  static std::atomic<std::size_t> live_;
  static std::atomic<std::size_t> peak_;
};

template <typename T>
struct CountingAllocator {
  using value_type = T;
  CountingAllocator() noexcept = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    Arena::on_alloc(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    Arena::on_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <typename U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, CountingAllocator<double>>;
using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float64 array. Plain value type; autodiff lives in Tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::span<const double> values);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return {data_.data(), data_.size()}; }
  std::span<const double> values() const { return {data_.data(), data_.size()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  double item() const;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

 private:
  Shape shape_{1};
  Buffer data_ = Buffer(1, 0.0);
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace xecg
