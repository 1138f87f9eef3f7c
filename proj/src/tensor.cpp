#include "amimv/tensor.hpp"

#include <sstream>

namespace amimv {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string dtype_name(DType dtype) {
  return dtype == DType::float32 ? "float32" : "float64";
}

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, DType dtype) {
  auto impl = std::make_shared<detail::TensorImpl>();
  const auto n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  if (dtype == DType::float32)
    impl->data = std::vector<float>(n, 0.0f);
  else
    impl->data = std::vector<double>(n, 0.0);
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype) {
  return Tensor(make_impl(std::move(shape), dtype));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  dispatch_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) {
  return full(Shape{}, value, dtype);
}

Tensor Tensor::from_values(const std::vector<double>& values, Shape shape,
                           DType dtype) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_string(shape));
  Tensor t = zeros(std::move(shape), dtype);
  dispatch_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto out = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i)
      out[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_buffer(std::vector<float> values, Shape shape) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("from_buffer: size mismatch for shape " +
                         shape_string(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::float32;
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_buffer(std::vector<double> values, Shape shape) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("from_buffer: size mismatch for shape " +
                         shape_string(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::float64;
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

void Tensor::check_defined() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
}

void Tensor::check_dtype(DType expected) const {
  check_defined();
  if (impl_->dtype != expected)
    throw ContractError("tensor holds " + dtype_name(impl_->dtype) +
                        ", accessed as " + dtype_name(expected));
}

const Shape& Tensor::shape() const {
  check_defined();
  return impl_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  check_defined();
  return impl_->dtype;
}

std::vector<double> Tensor::values() const {
  check_defined();
  return std::visit(
      [](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
      impl_->data);
}

double Tensor::item() const {
  if (numel() != 1)
    throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return at(0);
}

double Tensor::at(std::size_t flat_index) const {
  check_defined();
  return std::visit(
      [&](const auto& v) { return static_cast<double>(v.at(flat_index)); },
      impl_->data);
}

bool Tensor::requires_grad() const {
  check_defined();
  return impl_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool value) {
  check_defined();
  impl_->requires_grad = value;
  if (value) impl_->detached = false;
  return *this;
}

bool Tensor::is_detached() const {
  check_defined();
  return impl_->detached;
}

Tensor Tensor::detach() const {
  Tensor out = clone();
  out.impl_->detached = true;
  return out;
}

bool Tensor::has_grad() const {
  check_defined();
  return impl_->grad.has_value();
}

Tensor Tensor::grad() const {
  check_defined();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  if (impl_->grad)
    impl->data = *impl_->grad;
  else
    return zeros(impl_->shape, impl_->dtype);
  return Tensor(std::move(impl));
}

void Tensor::zero_grad() {
  check_defined();
  impl_->grad.reset();
}

Tensor Tensor::to(DType dtype) const {
  check_defined();
  if (dtype == impl_->dtype) return clone();
  Tensor out = from_values(values(), impl_->shape, dtype);
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

Tensor Tensor::clone() const {
  check_defined();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

}  // namespace amimv
