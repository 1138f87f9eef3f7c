#include "amimv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace amimv::ops {

namespace {

using ImplPtr = Tape::ImplPtr;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    throw ContractError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) +
                        " vs " + dtype_name(b.dtype()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

Tensor new_output(Shape shape, DType dtype) {
  Tensor out = Tensor::zeros(std::move(shape), dtype);
  if (!grad_enabled()) out.impl()->detached = true;
  return out;
}

// Records `out` on the active tape if any input requires a gradient. An
// output computed purely from constants inherits the detach marker of its
// inputs, so slices and reshapes of key-branch tensors stay marked.
void record_many(const char* op, std::span<const Tensor> inputs, Tensor& out,
                 std::function<void()> backward_fn) {
  bool any = false, any_detached = false;
  for (const auto& t : inputs) {
    any = any || t.requires_grad();
    any_detached = any_detached || t.is_detached();
  }
  if (!any) {
    if (any_detached) out.impl()->detached = true;
    return;
  }
  Tape* tape = Tape::active();
  if (!tape || !grad_enabled()) return;
  std::vector<ImplPtr> impls;
  for (const auto& t : inputs) impls.push_back(t.impl());
  out.impl()->requires_grad = true;
  tape->record(op, std::move(impls), out.impl(), std::move(backward_fn));
}

void record(const char* op, std::initializer_list<Tensor> inputs, Tensor& out,
            std::function<void()> backward_fn) {
  record_many(op, std::span<const Tensor>(inputs.begin(), inputs.size()), out, std::move(backward_fn));
}

template <class T>
const std::vector<T>& grad_of(const ImplPtr& impl) {
  return std::get<std::vector<T>>(*impl->grad);
}

// Accumulation target for an input, or null when it needs no gradient.
template <class T>
std::vector<T>* grad_target(const ImplPtr& impl) {
  return impl->requires_grad ? &impl->grad_values<T>() : nullptr;
}

// Elementwise unary op with derivative computed from (x, y).
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = new_output(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = fwd(in[i]);
  });
  record(name, {x}, out, [xi = x.impl(), oi = out.impl(), deriv] {
    dispatch_dtype(xi->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto* g = grad_target<T>(xi);
      if (!g) return;
      const auto& go = grad_of<T>(oi);
      const auto& xv = xi->values<T>();
      const auto& yv = oi->values<T>();
      for (std::size_t i = 0; i < xv.size(); ++i) (*g)[i] += go[i] * deriv(xv[i], yv[i]);
    });
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype("add", a, b);
  require_same_shape("add", a, b);
  Tensor out = new_output(a.shape(), a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>(), y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  });
  record("add", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      const auto& go = grad_of<T>(oi);
      for (const auto& in : {ai, bi})
        if (auto* g = grad_target<T>(in))
          for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
    });
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_dtype("sub", a, b);
  require_same_shape("sub", a, b);
  Tensor out = new_output(a.shape(), a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>(), y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  });
  record("sub", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      const auto& go = grad_of<T>(oi);
      if (auto* g = grad_target<T>(ai))
        for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
      if (auto* g = grad_target<T>(bi))
        for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] -= go[i];
    });
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype("mul", a, b);
  require_same_shape("mul", a, b);
  Tensor out = new_output(a.shape(), a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>(), y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  });
  record("mul", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      const auto& go = grad_of<T>(oi);
      const auto& x = ai->values<T>();
      const auto& y = bi->values<T>();
      if (auto* g = grad_target<T>(ai))
        for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * y[i];
      if (auto* g = grad_target<T>(bi))
        for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * x[i];
    });
  });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](auto v) { return static_cast<decltype(v)>(v * factor); },
      [factor](auto v, auto) { return static_cast<decltype(v)>(factor); });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      "add_scalar", x, [value](auto v) { return static_cast<decltype(v)>(v + value); },
      [](auto v, auto) { return static_cast<decltype(v)>(1); });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto v, auto) { return v > 0 ? decltype(v)(1) : decltype(v)(0); });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](auto v) { return std::exp(v); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](auto v) { return std::log(v); },
      [](auto v, auto) { return decltype(v)(1) / v; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_same_dtype("add_bias", x, bias);
  if (x.dim() < 2 || bias.dim() != 1 || bias.size(0) != x.size(1))
    throw DimensionError("add_bias: cannot broadcast " + shape_string(bias.shape()) +
                         " over axis 1 of " + shape_string(x.shape()));
  const std::size_t n = x.size(0), f = x.size(1), inner = x.numel() / (n * f);
  Tensor out = new_output(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto b = bias.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < f; ++c)
        for (std::size_t k = 0; k < inner; ++k) {
          const auto idx = (i * f + c) * inner + k;
          o[idx] = in[idx] + b[c];
        }
  });
  record("add_bias", {x, bias}, out, [xi = x.impl(), bi = bias.impl(), oi = out.impl(), n, f, inner] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      const auto& go = grad_of<T>(oi);
      if (auto* g = grad_target<T>(xi))
        for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
      if (auto* g = grad_target<T>(bi))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < f; ++c)
            for (std::size_t k = 0; k < inner; ++k) (*g)[c] += go[(i * f + c) * inner + k];
    });
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = new_output(Shape{}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T acc = 0;
    for (auto v : x.data<T>()) acc += v;
    out.mutable_data<T>()[0] = acc;
  });
  record("sum", {x}, out, [xi = x.impl(), oi = out.impl()] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      if (auto* g = grad_target<T>(xi)) {
        const T go = grad_of<T>(oi)[0];
        for (auto& v : *g) v += go;
      }
    });
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  if (x.dim() == 0) throw DimensionError("sum_last: scalar input");
  const std::size_t n = x.shape().back();
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  const std::size_t rows = shape_numel(shape);
  Tensor out = new_output(shape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += in[r * n + j];
      o[r] = acc;
    }
  });
  record("sum_last", {x}, out, [xi = x.impl(), oi = out.impl(), rows, n] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto* g = grad_target<T>(xi);
      if (!g) return;
      const auto& go = grad_of<T>(oi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += go[r];
    });
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype("matmul", a, b);
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0))
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  Tensor out = new_output({m, n}, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    ConstMap<T> A(a.data<T>().data(), m, k);
    ConstMap<T> B(b.data<T>().data(), k, n);
    MutMap<T> C(out.mutable_data<T>().data(), m, n);
    C.noalias() = A * B;
  });
  record("matmul", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      ConstMap<T> G(grad_of<T>(oi).data(), m, n);
      if (auto* g = grad_target<T>(ai)) {
        ConstMap<T> B(bi->values<T>().data(), k, n);
        MutMap<T> dA(g->data(), m, k);
        dA.noalias() += G * B.transpose();
      }
      if (auto* g = grad_target<T>(bi)) {
        ConstMap<T> A(ai->values<T>().data(), m, k);
        MutMap<T> dB(g->data(), k, n);
        dB.noalias() += A.transpose() * G;
      }
    });
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.dim() != 2)
    throw DimensionError("transpose: expected 2-D, got " + shape_string(a.shape()));
  const std::size_t m = a.size(0), n = a.size(1);
  Tensor out = new_output({n, m}, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = a.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) o[j * m + i] = in[i * n + j];
  });
  record("transpose", {a}, out, [ai = a.impl(), oi = out.impl(), m, n] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto* g = grad_target<T>(ai);
      if (!g) return;
      const auto& go = grad_of<T>(oi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += go[j * m + i];
    });
  });
  return out;
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t columns() const { return n * ho * wo; }
};

// cols[(ch, ki, kj), (img, oy, ox)]
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t ncols = g.columns();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((ch * g.kh + ki) * g.kw + kj) * ncols;
        for (std::size_t img = 0; img < g.n; ++img) {
          const T* plane = x + (img * g.c + ch) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            T* dst = row + (img * g.ho + oy) * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(dst, dst + g.wo, T(0));
              continue;
            }
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : plane[iy * g.w + ix];
            }
          }
        }
      }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t ncols = g.columns();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((ch * g.kh + ki) * g.kw + kj) * ncols;
        for (std::size_t img = 0; img < g.n; ++img) {
          T* plane = dx + (img * g.c + ch) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            const T* src = row + (img * g.ho + oy) * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) plane[iy * g.w + ix] += src[ox];
            }
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding) {
  require_same_dtype("conv2d", input, kernel);
  if (input.dim() != 4 || kernel.dim() != 4 || input.size(1) != kernel.size(1))
    throw DimensionError("conv2d: incompatible input " + shape_string(input.shape()) +
                         " and kernel " + shape_string(kernel.shape()));
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{input.size(0), input.size(1), input.size(2), input.size(3),
                 kernel.size(0), kernel.size(2), kernel.size(3), stride, padding, 0, 0};
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding)
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " larger than padded input " + shape_string(input.shape()));
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  Tensor out = new_output({g.n, g.f, g.ho, g.wo}, input.dtype());
  auto saved = std::make_shared<detail::Buffer>();
  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> cols(g.patch() * g.columns());
    im2col(g, input.data<T>().data(), cols.data());
    RowMat<T> result(g.f, g.columns());
    result.noalias() =
        ConstMap<T>(kernel.data<T>().data(), g.f, g.patch()) *
        ConstMap<T>(cols.data(), g.patch(), g.columns());
    auto o = out.mutable_data<T>();
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t img = 0; img < g.n; ++img)
      for (std::size_t f = 0; f < g.f; ++f)
        std::copy_n(result.data() + f * g.columns() + img * plane, plane,
                    o.data() + (img * g.f + f) * plane);
    *saved = std::move(cols);
  });

  record("conv2d", {input, kernel}, out,
         [xi = input.impl(), wi = kernel.impl(), oi = out.impl(), g, saved] {
           dispatch_dtype(oi->dtype, [&](auto tag) {
             using T = decltype(tag);
             const auto& go = grad_of<T>(oi);
             const std::size_t plane = g.ho * g.wo;
             RowMat<T> dout(g.f, g.columns());
             for (std::size_t img = 0; img < g.n; ++img)
               for (std::size_t f = 0; f < g.f; ++f)
                 std::copy_n(go.data() + (img * g.f + f) * plane, plane,
                             dout.data() + f * g.columns() + img * plane);
             const auto& cols = std::get<std::vector<T>>(*saved);
             if (auto* gw = grad_target<T>(wi)) {
               MutMap<T> dW(gw->data(), g.f, g.patch());
               dW.noalias() += dout * ConstMap<T>(cols.data(), g.patch(), g.columns()).transpose();
             }
             if (auto* gx = grad_target<T>(xi)) {
               RowMat<T> dcols(g.patch(), g.columns());
               dcols.noalias() =
                   ConstMap<T>(wi->values<T>().data(), g.f, g.patch()).transpose() * dout;
               col2im_add(g, dcols.data(), gx->data());
             }
           });
         });
  return out;
}

Tensor avg_pool2d(const Tensor& input, std::size_t kernel_h, std::size_t kernel_w) {
  if (input.dim() != 4) throw DimensionError("avg_pool2d: expected [N,C,H,W], got " +
                                             shape_string(input.shape()));
  const std::size_t n = input.size(0), c = input.size(1), h = input.size(2), w = input.size(3);
  if (kernel_h == 0 || kernel_w == 0 || kernel_h > h || kernel_w > w)
    throw DimensionError("avg_pool2d: window " + std::to_string(kernel_h) + "x" +
                         std::to_string(kernel_w) + " does not fit " +
                         shape_string(input.shape()));
  const std::size_t ho = h / kernel_h, wo = w / kernel_w;
  const double inv = 1.0 / static_cast<double>(kernel_h * kernel_w);
  Tensor out = new_output({n, c, ho, wo}, input.dtype());
  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = input.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          T acc = 0;
          for (std::size_t i = 0; i < kernel_h; ++i)
            for (std::size_t j = 0; j < kernel_w; ++j)
              acc += in[p * h * w + (oy * kernel_h + i) * w + ox * kernel_w + j];
          o[(p * ho + oy) * wo + ox] = static_cast<T>(acc * inv);
        }
  });
  record("avg_pool2d", {input}, out,
         [xi = input.impl(), oi = out.impl(), n, c, h, w, ho, wo, kernel_h, kernel_w, inv] {
           dispatch_dtype(oi->dtype, [&](auto tag) {
             using T = decltype(tag);
             auto* g = grad_target<T>(xi);
             if (!g) return;
             const auto& go = grad_of<T>(oi);
             for (std::size_t p = 0; p < n * c; ++p)
               for (std::size_t oy = 0; oy < ho; ++oy)
                 for (std::size_t ox = 0; ox < wo; ++ox) {
                   const T share = static_cast<T>(go[(p * ho + oy) * wo + ox] * inv);
                   for (std::size_t i = 0; i < kernel_h; ++i)
                     for (std::size_t j = 0; j < kernel_w; ++j)
                       (*g)[p * h * w + (oy * kernel_h + i) * w + ox * kernel_w + j] += share;
                 }
           });
         });
  return out;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::size_t groups, double eps) {
  require_same_dtype("group_norm", x, gamma);
  require_same_dtype("group_norm", x, beta);
  if (x.dim() < 2) throw DimensionError("group_norm: expected [N,C,...], got " +
                                        shape_string(x.shape()));
  const std::size_t n = x.size(0), c = x.size(1), spatial = x.numel() / (n * c);
  if (groups == 0 || c % groups != 0)
    throw DimensionError("group_norm: " + std::to_string(c) +
                         " channels not divisible into " + std::to_string(groups) + " groups");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw DimensionError("group_norm: affine parameters must have shape [" +
                         std::to_string(c) + "]");
  const std::size_t per_group = c / groups, count = per_group * spatial;

  Tensor out = new_output(x.shape(), x.dtype());
  auto xhat = std::make_shared<detail::Buffer>();
  auto inv_std = std::make_shared<std::vector<double>>(n * groups);
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto gm = gamma.data<T>();
    auto bt = beta.data<T>();
    auto o = out.mutable_data<T>();
    std::vector<T> xh(in.size());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = (i * c + gi * per_group) * spatial;
        double mu = 0;
        for (std::size_t k = 0; k < count; ++k) mu += in[base + k];
        mu /= static_cast<double>(count);
        double var = 0;
        for (std::size_t k = 0; k < count; ++k) {
          const double d = in[base + k] - mu;
          var += d * d;
        }
        var /= static_cast<double>(count);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i * groups + gi] = is;
        for (std::size_t cc = 0; cc < per_group; ++cc) {
          const std::size_t ch = gi * per_group + cc, off = base + cc * spatial;
          for (std::size_t k = 0; k < spatial; ++k) {
            xh[off + k] = static_cast<T>((in[off + k] - mu) * is);
            o[off + k] = gm[ch] * xh[off + k] + bt[ch];
          }
        }
      }
    *xhat = std::move(xh);
  });

  record("group_norm", {x, gamma, beta}, out,
         [xi = x.impl(), gi_ = gamma.impl(), bi = beta.impl(), oi = out.impl(), xhat, inv_std,
          n, c, groups, per_group, spatial, count] {
           dispatch_dtype(oi->dtype, [&](auto tag) {
             using T = decltype(tag);
             const auto& go = grad_of<T>(oi);
             const auto& xh = std::get<std::vector<T>>(*xhat);
             const auto& gm = gi_->values<T>();
             if (auto* g = grad_target<T>(gi_))
               for (std::size_t i = 0; i < n; ++i)
                 for (std::size_t ch = 0; ch < c; ++ch)
                   for (std::size_t k = 0; k < spatial; ++k) {
                     const auto idx = (i * c + ch) * spatial + k;
                     (*g)[ch] += go[idx] * xh[idx];
                   }
             if (auto* g = grad_target<T>(bi))
               for (std::size_t i = 0; i < n; ++i)
                 for (std::size_t ch = 0; ch < c; ++ch)
                   for (std::size_t k = 0; k < spatial; ++k) (*g)[ch] += go[(i * c + ch) * spatial + k];
             auto* gx = grad_target<T>(xi);
             if (!gx) return;
             for (std::size_t i = 0; i < n; ++i)
               for (std::size_t grp = 0; grp < groups; ++grp) {
                 const std::size_t base = (i * c + grp * per_group) * spatial;
                 double sum_d = 0, sum_dx = 0;
                 for (std::size_t cc = 0; cc < per_group; ++cc) {
                   const double gain = gm[grp * per_group + cc];
                   const std::size_t off = base + cc * spatial;
                   for (std::size_t k = 0; k < spatial; ++k) {
                     const double d = go[off + k] * gain;
                     sum_d += d;
                     sum_dx += d * xh[off + k];
                   }
                 }
                 const double is = (*inv_std)[i * groups + grp];
                 const double m = static_cast<double>(count);
                 for (std::size_t cc = 0; cc < per_group; ++cc) {
                   const double gain = gm[grp * per_group + cc];
                   const std::size_t off = base + cc * spatial;
                   for (std::size_t k = 0; k < spatial; ++k) {
                     const double d = go[off + k] * gain;
                     (*gx)[off + k] += static_cast<T>(is * (d - sum_d / m - xh[off + k] * sum_dx / m));
                   }
                 }
               }
           });
         });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  Tensor out = new_output(std::move(shape), x.dtype());
  out.impl()->data = x.impl()->data;
  record("reshape", {x}, out, [xi = x.impl(), oi = out.impl()] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto* g = grad_target<T>(xi);
      if (!g) return;
      const auto& go = grad_of<T>(oi);
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
    });
  });
  return out;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size())
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    require_same_dtype("concat", parts[0], p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) ok = false;
    if (!ok)
      throw DimensionError("concat: shape " + shape_string(s) + " incompatible with " +
                           shape_string(first) + " along axis " + std::to_string(axis));
    shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.size(axis) * inner);
  const std::size_t total = shape[axis] * inner;

  Tensor out = new_output(shape, parts[0].dtype());
  dispatch_dtype(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.mutable_data<T>();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      auto in = parts[p].data<T>();
      for (std::size_t r = 0; r < outer; ++r)
        std::copy_n(in.data() + r * widths[p], widths[p], o.data() + r * total + offset);
      offset += widths[p];
    }
  });
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  record_many("concat", parts, out, [impls, oi = out.impl(), widths, outer, total] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      const auto& go = grad_of<T>(oi);
      std::size_t offset = 0;
      for (std::size_t p = 0; p < impls.size(); ++p) {
        if (auto* g = grad_target<T>(impls[p]))
          for (std::size_t r = 0; r < outer; ++r)
            for (std::size_t k = 0; k < widths[p]; ++k)
              (*g)[r * widths[p] + k] += go[r * total + offset + k];
        offset += widths[p];
      }
    });
  });
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.dim() == 0) throw DimensionError("gather_rows: scalar input");
  const std::size_t rows = x.size(0), width = rows ? x.numel() / rows : 0;
  for (auto idx : indices)
    if (idx >= rows)
      throw DimensionError("gather_rows: index " + std::to_string(idx) +
                           " out of range for " + shape_string(x.shape()));
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor out = new_output(shape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t r = 0; r < indices.size(); ++r)
      std::copy_n(in.data() + indices[r] * width, width, o.data() + r * width);
  });
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  record("gather_rows", {x}, out, [xi = x.impl(), oi = out.impl(), idx, width] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto* g = grad_target<T>(xi);
      if (!g) return;
      const auto& go = grad_of<T>(oi);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t k = 0; k < width; ++k) (*g)[idx[r] * width + k] += go[r * width + k];
    });
  });
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return gather_rows(x, idx);
}

Tensor l2_normalize(const Tensor& x, double epsilon) {
  if (x.dim() == 0 || x.shape().back() == 0)
    throw DimensionError("l2_normalize: empty trailing axis in " + shape_string(x.shape()));
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  Tensor out = new_output(x.shape(), x.dtype());
  auto norms = std::make_shared<std::vector<double>>(rows);
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      double sq = 0;
      for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(in[r * d + j]) * in[r * d + j];
      const double norm = std::sqrt(sq);
      (*norms)[r] = norm;
      const double denom = std::max(norm, epsilon);
      for (std::size_t j = 0; j < d; ++j) o[r * d + j] = static_cast<T>(in[r * d + j] / denom);
    }
  });
  record("l2_normalize", {x}, out, [xi = x.impl(), oi = out.impl(), norms, rows, d, epsilon] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto* g = grad_target<T>(xi);
      if (!g) return;
      const auto& go = grad_of<T>(oi);
      const auto& y = oi->values<T>();
      for (std::size_t r = 0; r < rows; ++r) {
        const double norm = (*norms)[r];
        if (norm <= epsilon) {
          for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += static_cast<T>(go[r * d + j] / epsilon);
          continue;
        }
        double dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(y[r * d + j]) * go[r * d + j];
        for (std::size_t j = 0; j < d; ++j)
          (*g)[r * d + j] += static_cast<T>((go[r * d + j] - y[r * d + j] * dot) / norm);
      }
    });
  });
  return out;
}

Tensor logsumexp(const Tensor& x) {
  if (x.dim() == 0 || x.shape().back() == 0)
    throw DimensionError("logsumexp: empty trailing axis in " +
                         (x.dim() ? shape_string(x.shape()) : std::string("[]")));
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  Tensor out = new_output(shape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = in.data() + r * n;
      const T m = *std::max_element(row, row + n);
      if (!std::isfinite(m)) {
        o[r] = m;
        continue;
      }
      double acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += std::exp(static_cast<double>(row[j] - m));
      o[r] = static_cast<T>(m + std::log(acc));
    }
  });
  record("logsumexp", {x}, out, [xi = x.impl(), oi = out.impl(), rows, n] {
    dispatch_dtype(oi->dtype, [&](auto tag) {
      using T = decltype(tag);
      auto* g = grad_target<T>(xi);
      if (!g) return;
      const auto& go = grad_of<T>(oi);
      const auto& xv = xi->values<T>();
      const auto& lse = oi->values<T>();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
          (*g)[r * n + j] += static_cast<T>(go[r] * std::exp(static_cast<double>(xv[r * n + j] - lse[r])));
    });
  });
  return out;
}

}  // namespace amimv::ops
