#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "amimv/errors.hpp"

namespace amimv {

enum class DType { float32, float64 };

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);
std::string dtype_name(DType dtype);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::float32 : DType::float64;
}

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::float32;
  Buffer data;
  std::optional<Buffer> grad;
  bool requires_grad = false;
  // Set on outputs of detach() and of ops evaluated under NoGradGuard.
  bool detached = false;

  template <class T>
  std::vector<T>& values() {
    return std::get<std::vector<T>>(data);
  }
  template <class T>
  const std::vector<T>& values() const {
    return std::get<std::vector<T>>(data);
  }
  // Gradient buffer, zero-allocated on first use.
  template <class T>
  std::vector<T>& grad_values() {
    if (!grad) grad = Buffer{std::vector<T>(shape_numel(shape), T(0))};
    return std::get<std::vector<T>>(*grad);
  }
};

}  // namespace detail

/// Shared handle to a dense row-major array. Copies of a Tensor alias the
/// same storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::float32);
  static Tensor full(Shape shape, double value, DType dtype = DType::float32);
  static Tensor scalar(double value, DType dtype = DType::float32);
  static Tensor from_values(const std::vector<double>& values, Shape shape,
                            DType dtype = DType::float32);
  static Tensor from_buffer(std::vector<float> values, Shape shape);
  static Tensor from_buffer(std::vector<double> values, Shape shape);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    check_dtype(dtype_of<T>());
    return impl_->values<T>();
  }
  /// Writable view of the values. Writes are invisible to the tape, so this
  /// is reserved for optimizer updates and similar out-of-graph edits.
  template <class T>
  std::span<T> mutable_data() {
    check_dtype(dtype_of<T>());
    return impl_->values<T>();
  }

  std::vector<double> values() const;
  double item() const;
  double at(std::size_t flat_index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_detached() const;
  /// Copy carrying the no-gradient marker.
  Tensor detach() const;

  bool has_grad() const;
  /// Gradient as a fresh tensor; zeros when no gradient has been accumulated.
  Tensor grad() const;
  void zero_grad();

  Tensor to(DType dtype) const;
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

 private:
  void check_defined() const;
  void check_dtype(DType expected) const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Calls `fn(T{})` with T = float or double matching `dtype`.
template <class Fn>
decltype(auto) dispatch_dtype(DType dtype, Fn&& fn) {
  if (dtype == DType::float32) return fn(float{});
  return fn(double{});
}

}  // namespace amimv
