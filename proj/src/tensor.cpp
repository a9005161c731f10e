#include "xecg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace xecg {

std::atomic<std::size_t> Arena::live_{0};
std::atomic<std::size_t> Arena::peak_{0};

void Arena::on_alloc(std::size_t bytes) noexcept {
  const std::size_t now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  std::size_t prev = peak_.load(std::memory_order_relaxed);
  while (now > prev && !peak_.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
  }
}

void Arena::on_free(std::size_t bytes) noexcept { live_.fetch_sub(bytes, std::memory_order_relaxed); }
std::size_t Arena::live_bytes() noexcept { return live_.load(std::memory_order_relaxed); }
std::size_t Arena::peak_bytes() noexcept { return peak_.load(std::memory_order_relaxed); }
void Arena::reset_peak() noexcept { peak_.store(live_.load(std::memory_order_relaxed), std::memory_order_relaxed); }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

static void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dims must be >= 1, got " + shape_str(shape));
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::span<const double> values) : shape_(std::move(shape)) {
  check_shape(shape_);
  if (values.size() != numel(shape_))
    throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape_));
  data_.assign(values.begin(), values.end());
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size())) {}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  Tensor out = *this;
  out.shape_ = std::move(shape);
  check_shape(out.shape_);
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace xecg
