#include "hyperseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace hyperseg::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
}

// Records an elementwise unary op whose derivative is a function of (x, y).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = fwd(xs[i]);
  if (needs_tape({&x})) {
    active_tape()->record(out, [x, out, deriv]() mutable {
      auto g = out.grad();
      auto xs = x.data();
      auto ys = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xs[i], ys[i]);
    });
  }
  return out;
}

struct ConvGeom {
  std::size_t channels, height, width;  // image side
  std::size_t k, stride, pad;
  std::size_t out_h, out_w;             // patch-grid side
};

// cols[(c * k + ki) * k + kj][oy * out_w + ox] = img[c][oy*s - p + ki][ox*s - p + kj]
void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* src = img + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* dst = cols + ((c * g.k + ki) * g.k + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          double* row = dst + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(row, row + g.out_w, 0.0);
            continue;
          }
          const double* srow = src + iy * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            row[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0 : srow[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds patch columns back into the image.
void col2im(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* dst = img + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* src = cols + ((c * g.k + ki) * g.k + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* drow = dst + iy * g.width;
          const double* srow = src + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.width)) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

void check_conv_args(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                     int padding, const char* op) {
  require_rank(input, 4, op, "input");
  require_rank(weight, 4, op, "weight");
  require_rank(bias, 1, op, "bias");
  if (weight.dim(2) != weight.dim(3))
    throw ShapeError(std::string(op) + ": kernel must be square, got " + shape_str(weight.shape()));
  if (stride < 1) throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
  if (padding < 0) throw std::invalid_argument(std::string(op) + ": padding must be >= 0");
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  if (needs_tape({&a, &b})) {
    active_tape()->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  if (needs_tape({&a, &b})) {
    active_tape()->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (needs_tape({&a, &b})) {
    active_tape()->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] / b[i];
  if (needs_tape({&a, &b})) {
    active_tape()->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * a[i] / (b[i] * b[i]);
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor rsub_scalar(double c, const Tensor& x) {
  return unary(x, [c](double v) { return c - v; }, [](double, double) { return -1.0; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (needs_tape({&x})) {
    active_tape()->record(out, [x, out]() mutable {
      const double g = out.grad()[0];
      for (auto& gx : x.grad_buffer()) gx += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_per_sample(const Tensor& x) {
  const std::size_t n = x.dim(0);
  const std::size_t per = x.numel() / n;
  Tensor out(Shape{n});
  auto o = out.mutable_data();
  auto xs = x.data();
  for (std::size_t s = 0; s < n; ++s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) acc += xs[s * per + i];
    o[s] = acc;
  }
  if (needs_tape({&x})) {
    active_tape()->record(out, [x, out, n, per]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < per; ++i) gx[s * per + i] += g[s];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (needs_tape({&x})) {
    active_tape()->record(out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels", "a");
  require_rank(b, 4, "concat_channels", "b");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: incompatible " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  double* o = out.mutable_ptr();
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.ptr() + s * ca * plane, ca * plane, o + s * (ca + cb) * plane);
    std::copy_n(b.ptr() + s * cb * plane, cb * plane, o + s * (ca + cb) * plane + ca * plane);
  }
  if (needs_tape({&a, &b})) {
    active_tape()->record(out, [a, b, out, n, ca, cb, plane]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer().data();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < ca * plane; ++i) ga[s * ca * plane + i] += g[s * (ca + cb) * plane + i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer().data();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < cb * plane; ++i)
            gb[s * cb * plane + i] += g[s * (ca + cb) * plane + ca * plane + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear layers

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  require_rank(bias, 1, "dense", "bias");
  const std::size_t n = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din || bias.dim(0) != dout)
    throw ShapeError("dense: input " + shape_str(input.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));
  Tensor out(Shape{n, dout});
  {
    CMapMat x(input.ptr(), n, din), w(weight.ptr(), dout, din);
    MapMat y(out.mutable_ptr(), n, dout);
    y.noalias() = x * w.transpose();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < dout; ++c) y(r, c) += bias[c];
  }
  if (needs_tape({&input, &weight, &bias})) {
    active_tape()->record(out, [input, weight, bias, out, n, din, dout]() mutable {
      CMapMat g(out.grad().data(), n, dout);
      if (input.requires_grad()) {
        MapMat gx(input.grad_buffer().data(), n, din);
        gx.noalias() += g * CMapMat(weight.ptr(), dout, din);
      }
      if (weight.requires_grad()) {
        MapMat gw(weight.grad_buffer().data(), dout, din);
        gw.noalias() += g.transpose() * CMapMat(input.ptr(), n, din);
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < dout; ++c) gb[c] += g(r, c);
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  check_conv_args(input, weight, bias, stride, padding, "conv2d");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin)
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  if (bias.dim(0) != cout)
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  const long span_h = static_cast<long>(h) + 2L * padding - static_cast<long>(k);
  const long span_w = static_cast<long>(w) + 2L * padding - static_cast<long>(k);
  if (span_h < 0 || span_w < 0)
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     shape_str(input.shape()));
  ConvGeom g{cin, h, w, k, static_cast<std::size_t>(stride), static_cast<std::size_t>(padding),
             static_cast<std::size_t>(span_h / stride + 1),
             static_cast<std::size_t>(span_w / stride + 1)};
  const std::size_t kdim = cin * k * k, plane = g.out_h * g.out_w;

  Tensor out(Shape{n, cout, g.out_h, g.out_w});
  std::vector<double> cols(is_pointwise(g) ? 0 : kdim * plane);
  CMapMat wm(weight.ptr(), cout, kdim);
  for (std::size_t s = 0; s < n; ++s) {
    const double* img = input.ptr() + s * cin * h * w;
    const double* colp = img;
    if (!is_pointwise(g)) {
      im2col(img, g, cols.data());
      colp = cols.data();
    }
    MapMat y(out.mutable_ptr() + s * cout * plane, cout, plane);
    y.noalias() = wm * CMapMat(colp, kdim, plane);
    for (std::size_t c = 0; c < cout; ++c) y.row(c).array() += bias[c];
  }

  if (needs_tape({&input, &weight, &bias})) {
    active_tape()->record(out, [input, weight, bias, out, g, n, cout, kdim, plane]() mutable {
      const std::size_t cin = g.channels, img_size = cin * g.height * g.width;
      const double* gout = out.grad().data();
      std::vector<double> cols(is_pointwise(g) ? 0 : kdim * plane);
      std::vector<double> dcols(kdim * plane);
      CMapMat wm(weight.ptr(), cout, kdim);
      double* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      double* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      for (std::size_t s = 0; s < n; ++s) {
        CMapMat go(gout + s * cout * plane, cout, plane);
        if (gw) {
          const double* colp = input.ptr() + s * img_size;
          if (!is_pointwise(g)) {
            im2col(colp, g, cols.data());
            colp = cols.data();
          }
          MapMat(gw, cout, kdim).noalias() += go * CMapMat(colp, kdim, plane).transpose();
        }
        if (gx) {
          if (is_pointwise(g)) {
            MapMat(gx + s * img_size, kdim, plane).noalias() += wm.transpose() * go;
          } else {
            MapMat(dcols.data(), kdim, plane).noalias() = wm.transpose() * go;
            col2im(dcols.data(), g, gx + s * img_size);
          }
        }
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t c = 0; c < cout; ++c) {
            const double* row = gout + (s * cout + c) * plane;
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += row[i];
            gb[c] += acc;
          }
      }
    });
  }
  return out;
}

Tensor conv2d_transposed(const Tensor& input, const Tensor& weight, const Tensor& bias,
                         int stride, int padding) {
  check_conv_args(input, weight, bias, stride, padding, "conv2d_transposed");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(1), k = weight.dim(2);
  if (weight.dim(0) != cin)
    throw ShapeError("conv2d_transposed: input has " + std::to_string(cin) +
                     " channels but weight " + shape_str(weight.shape()) + " expects " +
                     std::to_string(weight.dim(0)));
  if (bias.dim(0) != cout)
    throw ShapeError("conv2d_transposed: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  const long oh = (static_cast<long>(h) - 1) * stride - 2L * padding + static_cast<long>(k);
  const long ow = (static_cast<long>(w) - 1) * stride - 2L * padding + static_cast<long>(k);
  if (oh < 1 || ow < 1)
    throw ShapeError("conv2d_transposed: empty output for input " + shape_str(input.shape()));
  // Geometry of the forward convolution this op is the adjoint of.
  ConvGeom g{cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), k,
             static_cast<std::size_t>(stride), static_cast<std::size_t>(padding), h, w};
  const std::size_t kdim = cout * k * k, plane = h * w, out_size = cout * g.height * g.width;

  Tensor out(Shape{n, cout, g.height, g.width});
  std::vector<double> cols(kdim * plane);
  CMapMat wm(weight.ptr(), cin, kdim);
  for (std::size_t s = 0; s < n; ++s) {
    double* o = out.mutable_ptr() + s * out_size;
    MapMat(cols.data(), kdim, plane).noalias() =
        wm.transpose() * CMapMat(input.ptr() + s * cin * plane, cin, plane);
    col2im(cols.data(), g, o);
    const std::size_t oplane = g.height * g.width;
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t i = 0; i < oplane; ++i) o[c * oplane + i] += bias[c];
  }

  if (needs_tape({&input, &weight, &bias})) {
    active_tape()->record(out, [input, weight, bias, out, g, n, cin, kdim, plane, out_size]() mutable {
      const double* gout = out.grad().data();
      std::vector<double> dcols(kdim * plane);
      CMapMat wm(weight.ptr(), cin, kdim);
      double* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      double* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      for (std::size_t s = 0; s < n; ++s) {
        im2col(gout + s * out_size, g, dcols.data());
        CMapMat dc(dcols.data(), kdim, plane);
        if (gx) MapMat(gx + s * cin * plane, cin, plane).noalias() += wm * dc;
        if (gw)
          MapMat(gw, cin, kdim).noalias() +=
              CMapMat(input.ptr() + s * cin * plane, cin, plane) * dc.transpose();
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        const std::size_t cout = g.channels, oplane = g.height * g.width;
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t c = 0; c < cout; ++c) {
            const double* row = gout + s * out_size + c * oplane;
            double acc = 0.0;
            for (std::size_t i = 0; i < oplane; ++i) acc += row[i];
            gb[c] += acc;
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations and normalization

Tensor prelu(const Tensor& x, const Tensor& slope) {
  if (x.rank() < 2) throw ShapeError("prelu: input needs a channel axis, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.numel() / (n * c);
  if (slope.rank() != 1 || slope.dim(0) != c)
    throw ShapeError("prelu: slope " + shape_str(slope.shape()) + " vs " + std::to_string(c) +
                     " channels");
  Tensor out(x.shape());
  double* o = out.mutable_ptr();
  const double* xs = x.ptr();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double a = slope[ch];
      const std::size_t base = (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = xs[base + i];
        o[base + i] = v > 0 ? v : a * v;
      }
    }
  if (needs_tape({&x, &slope})) {
    active_tape()->record(out, [x, slope, out, n, c, plane]() mutable {
      const double* g = out.grad().data();
      const double* xs = x.ptr();
      double* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      double* ga = slope.requires_grad() ? slope.grad_buffer().data() : nullptr;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double a = slope[ch];
          const std::size_t base = (s * c + ch) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            const double v = xs[base + i];
            if (gx) gx[base + i] += v > 0 ? g[base + i] : a * g[base + i];
            if (v <= 0) acc += g[base + i] * v;
          }
          if (ga) ga[ch] += acc;
        }
    });
  }
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opts) {
  require_rank(x, 4, "batch_norm", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean), static_cast<const Tensor*>(&running_var)})
    if (t->rank() != 1 || t->dim(0) != c)
      throw ShapeError("batch_norm: per-channel parameter " + shape_str(t->shape()) + " vs " +
                       std::to_string(c) + " channels");
  const bool batch_stats = opts.training && n >= 2;
  const double m = static_cast<double>(n * plane);

  std::vector<double> mu(c), inv_std(c);
  const double* xs = x.ptr();
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (batch_stats) {
      double acc = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double* p = xs + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mean_c = acc / m;
      double sq = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double* p = xs + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean_c) * (p[i] - mean_c);
      }
      const double var = sq / m;
      mu[ch] = mean_c;
      inv_std[ch] = 1.0 / std::sqrt(var + opts.eps);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[ch] = (1.0 - opts.momentum) * rm[ch] + opts.momentum * mean_c;
      rv[ch] = (1.0 - opts.momentum) * rv[ch] + opts.momentum * (sq / (m - 1.0));
    } else {
      mu[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + opts.eps);
    }
  }

  Tensor out(x.shape());
  Tensor xhat(x.shape());
  double* o = out.mutable_ptr();
  double* xh = xhat.mutable_ptr();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[base + i] = (xs[base + i] - mu[ch]) * inv_std[ch];
        o[base + i] = gamma[ch] * xh[base + i] + beta[ch];
      }
    }

  if (needs_tape({&x, &gamma, &beta})) {
    active_tape()->record(out, [x, gamma, beta, out, xhat, inv_std, batch_stats, n, c, plane,
                                m]() mutable {
      const double* g = out.grad().data();
      const double* xh = xhat.ptr();
      double* gg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
      double* gb = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
      double* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          const std::size_t base = (s * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += g[base + i];
            sum_gx += g[base + i] * xh[base + i];
          }
        }
        if (gg) gg[ch] += sum_gx;
        if (gb) gb[ch] += sum_g;
        if (!gx) continue;
        const double scale = gamma[ch] * inv_std[ch];
        for (std::size_t s = 0; s < n; ++s) {
          const std::size_t base = (s * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (batch_stats)
              gx[base + i] += scale * (g[base + i] - sum_g / m - xh[base + i] * sum_gx / m);
            else
              gx[base + i] += scale * g[base + i];
          }
        }
      }
    });
  }
  return out;
}

Tensor channel_dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("channel_dropout: rate must be in [0, 1)");
  if (x.rank() < 2) throw ShapeError("channel_dropout: input needs a channel axis");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.numel() / (n * c);
  std::bernoulli_distribution keep(1.0 - p);
  Tensor mask(Shape{n * c});
  auto mk = mask.mutable_data();
  for (auto& v : mk) v = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  Tensor out(x.shape());
  double* o = out.mutable_ptr();
  for (std::size_t j = 0; j < n * c; ++j)
    for (std::size_t i = 0; i < plane; ++i) o[j * plane + i] = x[j * plane + i] * mk[j];
  if (needs_tape({&x})) {
    active_tape()->record(out, [x, out, mask, n, c, plane]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t j = 0; j < n * c; ++j)
        for (std::size_t i = 0; i < plane; ++i) gx[j * plane + i] += g[j * plane + i] * mask[j];
    });
  }
  return out;
}

}  // namespace hyperseg::ops
