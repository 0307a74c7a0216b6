#include "fmc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fmc/parallel.hpp"

namespace fmc {

namespace {

Tape& tape_of(Var v) {
  if (!v.valid()) throw std::invalid_argument("operation on an unset Var");
  return *v.tape;
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("operands recorded on different tapes");
}

// Elementwise unary op from value and derivative-at-input functions.
template <class F, class DF>
Var unary(Var x, F f, DF df, const char* name) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  Tape& tape = tape_of(x);
  return tape.record(
      std::move(y), {x.id},
      [&tape, id = x.id, df](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xv = tape.value(id);
        Tensor& gx = *gin[0];
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * df(xv[i]);
      },
      name);
}

std::size_t same_out_extent(std::size_t in, std::size_t k, const Conv3dOptions& o, std::size_t pad,
                            const char* axis) {
  const std::size_t span = o.dilation * (k - 1) + 1;
  if (in + 2 * pad < span) {
    throw ShapeError(std::string("conv3d: axis ") + axis + " extent " + std::to_string(in) +
                     " smaller than dilated kernel " + std::to_string(span));
  }
  return (in + 2 * pad - span) / o.stride + 1;
}

// Range of output indices o with 0 <= o*stride - pad + koff < n.
void valid_range(std::size_t n_in, std::size_t n_out, std::size_t stride, long pad_minus_koff,
                 std::size_t& lo, std::size_t& hi) {
  // need o*stride >= pad - koff  and  o*stride <= n_in - 1 + pad - koff
  const long s = static_cast<long>(stride);
  const long a = pad_minus_koff;
  const long b = static_cast<long>(n_in) - 1 + pad_minus_koff;
  long l = a <= 0 ? 0 : (a + s - 1) / s;
  long h = b < 0 ? -1 : b / s;
  h = std::min(h, static_cast<long>(n_out) - 1);
  if (h < l) {
    lo = 1;
    hi = 0;
    return;
  }
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

struct ConvGeometry {
  std::size_t ci, d, h, w;
  std::size_t co, cig, k;
  std::size_t od, oh, ow;
  std::size_t groups, cog;
  std::size_t stride, dil, pad;
};

ConvGeometry conv_geometry(const Shape& in, const Shape& ker, const Conv3dOptions& opt) {
  if (in.size() != 4) throw ShapeError("conv3d: input must be [C,D,H,W], got " + to_string(in));
  if (ker.size() != 5) {
    throw ShapeError("conv3d: kernel must be [C_out,C_in/groups,k,k,k], got " + to_string(ker));
  }
  if (opt.groups == 0 || opt.stride == 0 || opt.dilation == 0) {
    throw ShapeError("conv3d: groups, stride and dilation must be >= 1");
  }
  ConvGeometry g{};
  g.ci = in[0];
  g.d = in[1];
  g.h = in[2];
  g.w = in[3];
  g.co = ker[0];
  g.cig = ker[1];
  g.k = ker[2];
  if (ker[3] != g.k || ker[4] != g.k) throw ShapeError("conv3d: kernel must be cubic");
  if (g.k % 2 == 0) throw ShapeError("conv3d: kernel extent must be odd");
  if (g.ci % opt.groups != 0) {
    throw ShapeError("conv3d: axis 0 (input channels) " + std::to_string(g.ci) +
                     " not divisible by groups " + std::to_string(opt.groups));
  }
  if (g.co % opt.groups != 0) {
    throw ShapeError("conv3d: kernel axis 0 (output channels) " + std::to_string(g.co) +
                     " not divisible by groups " + std::to_string(opt.groups));
  }
  if (g.cig != g.ci / opt.groups) {
    throw ShapeError("conv3d: kernel axis 1 is " + std::to_string(g.cig) + ", expected C_in/groups = " +
                     std::to_string(g.ci / opt.groups));
  }
  g.groups = opt.groups;
  g.cog = g.co / opt.groups;
  g.stride = opt.stride;
  g.dil = opt.dilation;
  g.pad = opt.padding == Padding::same ? opt.dilation * (g.k - 1) / 2 : 0;
  g.od = same_out_extent(g.d, g.k, opt, g.pad, "1 (depth)");
  g.oh = same_out_extent(g.h, g.k, opt, g.pad, "2 (height)");
  g.ow = same_out_extent(g.w, g.k, opt, g.pad, "3 (width)");
  return g;
}

// Visits every (output voxel, input voxel) pair for one kernel tap; the
// callback receives flat spatial indices into the output and input planes.
template <class F>
void for_tap(const ConvGeometry& g, std::size_t kz, std::size_t ky, std::size_t kx, F&& f) {
  const long pad = static_cast<long>(g.pad);
  const long offz = static_cast<long>(kz * g.dil);
  const long offy = static_cast<long>(ky * g.dil);
  const long offx = static_cast<long>(kx * g.dil);
  std::size_t z0, z1, y0, y1, x0, x1;
  valid_range(g.d, g.od, g.stride, pad - offz, z0, z1);
  valid_range(g.h, g.oh, g.stride, pad - offy, y0, y1);
  valid_range(g.w, g.ow, g.stride, pad - offx, x0, x1);
  if (z0 > z1 || y0 > y1 || x0 > x1) return;
  for (std::size_t oz = z0; oz <= z1; ++oz) {
    const std::size_t iz = oz * g.stride + offz - pad;
    for (std::size_t oy = y0; oy <= y1; ++oy) {
      const std::size_t iy = oy * g.stride + offy - pad;
      const std::size_t orow = (oz * g.oh + oy) * g.ow;
      const std::size_t irow = (iz * g.h + iy) * g.w;
      f(orow, irow, x0, x1, static_cast<std::size_t>(static_cast<long>(x0 * g.stride) + offx - pad));
    }
  }
}

Tensor conv3d_grad_input(const ConvGeometry& g, const Tensor& kernel, const Tensor& gout) {
  Tensor gin({g.ci, g.d, g.h, g.w}, 0.0);
  const std::size_t in_plane = g.d * g.h * g.w;
  const std::size_t out_plane = g.od * g.oh * g.ow;
  const std::size_t k3 = g.k * g.k * g.k;
  parallel_for(g.ci, [&](std::size_t ci) {
    const std::size_t grp = ci / g.cig;
    const std::size_t cil = ci % g.cig;
    double* gi = gin.data().data() + ci * in_plane;
    for (std::size_t col = 0; col < g.cog; ++col) {
      const std::size_t co = grp * g.cog + col;
      const double* go = gout.data().data() + co * out_plane;
      const double* wk = kernel.data().data() + (co * g.cig + cil) * k3;
      for (std::size_t kz = 0; kz < g.k; ++kz)
        for (std::size_t ky = 0; ky < g.k; ++ky)
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const double wv = wk[(kz * g.k + ky) * g.k + kx];
            for_tap(g, kz, ky, kx,
                    [&](std::size_t orow, std::size_t irow, std::size_t x0, std::size_t x1,
                        std::size_t ix0) {
                      for (std::size_t ox = x0, ix = ix0; ox <= x1; ++ox, ix += g.stride) {
                        gi[irow + ix] += wv * go[orow + ox];
                      }
                    });
          }
    }
  });
  return gin;
}

Tensor conv3d_grad_kernel(const ConvGeometry& g, const Tensor& input, const Tensor& gout) {
  Tensor gk({g.co, g.cig, g.k, g.k, g.k}, 0.0);
  const std::size_t in_plane = g.d * g.h * g.w;
  const std::size_t out_plane = g.od * g.oh * g.ow;
  const std::size_t k3 = g.k * g.k * g.k;
  parallel_for(g.co, [&](std::size_t co) {
    const std::size_t grp = co / g.cog;
    const double* go = gout.data().data() + co * out_plane;
    for (std::size_t cil = 0; cil < g.cig; ++cil) {
      const double* in = input.data().data() + (grp * g.cig + cil) * in_plane;
      double* gw = gk.data().data() + (co * g.cig + cil) * k3;
      for (std::size_t kz = 0; kz < g.k; ++kz)
        for (std::size_t ky = 0; ky < g.k; ++ky)
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            double acc = 0.0;
            for_tap(g, kz, ky, kx,
                    [&](std::size_t orow, std::size_t irow, std::size_t x0, std::size_t x1,
                        std::size_t ix0) {
                      for (std::size_t ox = x0, ix = ix0; ox <= x1; ++ox, ix += g.stride) {
                        acc += go[orow + ox] * in[irow + ix];
                      }
                    });
            gw[(kz * g.k + ky) * g.k + kx] = acc;
          }
    }
  });
  return gk;
}

// Sum over every axis except the channel axis.
Tensor channel_sums(const Tensor& t) {
  const ChannelView v = channel_view(t.shape(), "channel_sums");
  Tensor s({v.channels}, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double* p = t.data().data() + (o * v.channels + c) * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) s[c] += p[i];
    }
  return s;
}

}  // namespace

ChannelView channel_view(const Shape& shape, const char* what) {
  if (shape.size() == 4) return {1, shape[0], shape[1] * shape[2] * shape[3]};
  if (shape.size() == 2) return {shape[0], shape[1], 1};
  throw ShapeError(std::string(what) + ": expected [C,D,H,W] or [L,C], got " + to_string(shape));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

double softplus(double x) {
  // log(1 + e^x) without overflow
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Shape conv3d_output_shape(const Shape& input, const Shape& kernel, const Conv3dOptions& opt) {
  const ConvGeometry g = conv_geometry(input, kernel, opt);
  return {g.co, g.od, g.oh, g.ow};
}

Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
              const Conv3dOptions& opt) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), opt);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.co)) {
    throw ShapeError("conv3d: bias axis 0 must equal C_out " + std::to_string(g.co) + ", got " +
                     to_string(bias->shape()));
  }
  Tensor out({g.co, g.od, g.oh, g.ow}, 0.0);
  const std::size_t in_plane = g.d * g.h * g.w;
  const std::size_t out_plane = g.od * g.oh * g.ow;
  const std::size_t k3 = g.k * g.k * g.k;
  parallel_for(g.co, [&](std::size_t co) {
    const std::size_t grp = co / g.cog;
    double* o = out.data().data() + co * out_plane;
    for (std::size_t cil = 0; cil < g.cig; ++cil) {
      const double* in = input.data().data() + (grp * g.cig + cil) * in_plane;
      const double* wk = kernel.data().data() + (co * g.cig + cil) * k3;
      for (std::size_t kz = 0; kz < g.k; ++kz)
        for (std::size_t ky = 0; ky < g.k; ++ky)
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const double wv = wk[(kz * g.k + ky) * g.k + kx];
            for_tap(g, kz, ky, kx,
                    [&](std::size_t orow, std::size_t irow, std::size_t x0, std::size_t x1,
                        std::size_t ix0) {
                      for (std::size_t ox = x0, ix = ix0; ox <= x1; ++ox, ix += g.stride) {
                        o[orow + ox] += wv * in[irow + ix];
                      }
                    });
          }
    }
    if (bias) {
      const double b = (*bias)[co];
      for (std::size_t i = 0; i < out_plane; ++i) o[i] += b;
    }
  });
  return out;
}

Tensor pointwise_linear(const Tensor& input, const Tensor& weight, const Tensor* bias) {
  const ChannelView v = channel_view(input.shape(), "pointwise_linear");
  if (weight.rank() != 2 || weight.dim(1) != v.channels) {
    throw ShapeError("pointwise_linear: weight " + to_string(weight.shape()) +
                     " does not match input channel axis of " + to_string(input.shape()));
  }
  const std::size_t cout = weight.dim(0);
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw ShapeError("pointwise_linear: bias must be [" + std::to_string(cout) + "], got " +
                     to_string(bias->shape()));
  }
  Shape out_shape = input.shape();
  out_shape[input.rank() == 4 ? 0 : 1] = cout;
  Tensor out(out_shape, 0.0);
  const double* x = input.data().data();
  const double* w = weight.data().data();
  double* y = out.data().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    const double* xo = x + o * v.channels * v.inner;
    double* yo = y + o * cout * v.inner;
    for (std::size_t c = 0; c < cout; ++c) {
      double* yc = yo + c * v.inner;
      for (std::size_t i = 0; i < v.channels; ++i) {
        const double wv = w[c * v.channels + i];
        const double* xi = xo + i * v.inner;
        for (std::size_t p = 0; p < v.inner; ++p) yc[p] += wv * xi[p];
      }
      if (bias) {
        const double b = (*bias)[c];
        for (std::size_t p = 0; p < v.inner; ++p) yc[p] += b;
      }
    }
  }
  return out;
}

Tensor group_pool(const Tensor& band, std::size_t groups, PoolMode mode) {
  require_rank(band, 4, "group_pool");
  const std::size_t c = band.dim(0);
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_pool: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t per = c / groups;
  const std::size_t n = voxels(band);
  Tensor out({groups, band.dim(1), band.dim(2), band.dim(3)}, 0.0);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double* o = out.data().data() + gi * n;
    const double* first = band.data().data() + gi * per * n;
    std::copy(first, first + n, o);
    for (std::size_t k = 1; k < per; ++k) {
      const double* src = first + k * n;
      if (mode == PoolMode::max) {
        for (std::size_t p = 0; p < n; ++p) o[p] = std::max(o[p], src[p]);
      } else {
        for (std::size_t p = 0; p < n; ++p) o[p] += src[p];
      }
    }
    if (mode == PoolMode::avg) {
      const double inv = 1.0 / static_cast<double>(per);
      for (std::size_t p = 0; p < n; ++p) o[p] *= inv;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable ops

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  y += b.value();
  return tape_of(a).record(
      std::move(y), {a.id, b.id},
      [](const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0]) *gin[0] += g;
        if (gin[1]) *gin[1] += g;
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return tape_of(a).record(
      std::move(y), {a.id, b.id},
      [](const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0]) *gin[0] += g;
        if (gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
      },
      "sub");
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  Tape& tape = tape_of(a);
  return tape.record(
      std::move(y), {a.id, b.id},
      [&tape, ia = a.id, ib = b.id](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& av = tape.value(ia);
        const Tensor& bv = tape.value(ib);
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bv[i];
        if (gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * av[i];
      },
      "mul");
}

Var scale(Var a, double s) {
  Tensor y = a.value();
  y *= s;
  return tape_of(a).record(
      std::move(y), {a.id},
      [s](const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += s * g[i];
      },
      "scale");
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return tape_of(a).record(
      Tensor::scalar(s), {a.id},
      [](const Tensor& g, std::span<Tensor* const> gin) {
        for (auto& v : gin[0]->data()) v += g[0];
      },
      "sum");
}

Var weighted_sum(Var a, const Tensor& w) {
  require_same_shape(a.value(), w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  return tape_of(a).record(
      Tensor::scalar(s), {a.id},
      [w](const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t i = 0; i < w.size(); ++i) (*gin[0])[i] += g[0] * w[i];
      },
      "weighted_sum");
}

Var sigmoid(Var x) {
  return unary(
      x, [](double v) { return sigmoid(v); },
      [](double v) {
        const double s = sigmoid(v);
        return s * (1.0 - s);
      },
      "sigmoid");
}

Var silu(Var x) {
  return unary(
      x, [](double v) { return silu(v); },
      [](double v) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      },
      "silu");
}

Var softplus(Var x) {
  return unary(
      x, [](double v) { return softplus(v); }, [](double v) { return sigmoid(v); }, "softplus");
}

Var softmax_channels(Var x) {
  const Tensor& xv = x.value();
  const ChannelView v = channel_view(xv.shape(), "softmax_channels");
  Tensor y(xv.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    const std::size_t base = o * v.channels * v.inner;
    for (std::size_t p = 0; p < v.inner; ++p) {
      double m = xv[base + p];
      for (std::size_t c = 1; c < v.channels; ++c) m = std::max(m, xv[base + c * v.inner + p]);
      double z = 0.0;
      for (std::size_t c = 0; c < v.channels; ++c) {
        const double e = std::exp(xv[base + c * v.inner + p] - m);
        y[base + c * v.inner + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < v.channels; ++c) y[base + c * v.inner + p] /= z;
    }
  }
  Tensor s = y;
  return tape_of(x).record(
      std::move(y), {x.id},
      [s = std::move(s), v](const Tensor& g, std::span<Tensor* const> gin) {
        Tensor& gx = *gin[0];
        for (std::size_t o = 0; o < v.outer; ++o) {
          const std::size_t base = o * v.channels * v.inner;
          for (std::size_t p = 0; p < v.inner; ++p) {
            double dot = 0.0;
            for (std::size_t c = 0; c < v.channels; ++c) {
              const std::size_t i = base + c * v.inner + p;
              dot += g[i] * s[i];
            }
            for (std::size_t c = 0; c < v.channels; ++c) {
              const std::size_t i = base + c * v.inner + p;
              gx[i] += s[i] * (g[i] - dot);
            }
          }
        }
      },
      "softmax_channels");
}

Var layer_norm_channels(Var x, double eps) {
  const Tensor& xv = x.value();
  const ChannelView v = channel_view(xv.shape(), "layer_norm_channels");
  Tensor y(xv.shape());
  std::vector<double> inv_std(v.outer * v.inner);
  const double n = static_cast<double>(v.channels);
  for (std::size_t o = 0; o < v.outer; ++o) {
    const std::size_t base = o * v.channels * v.inner;
    for (std::size_t p = 0; p < v.inner; ++p) {
      double mean = 0.0;
      for (std::size_t c = 0; c < v.channels; ++c) mean += xv[base + c * v.inner + p];
      mean /= n;
      double var = 0.0;
      for (std::size_t c = 0; c < v.channels; ++c) {
        const double d = xv[base + c * v.inner + p] - mean;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[o * v.inner + p] = is;
      for (std::size_t c = 0; c < v.channels; ++c) {
        const std::size_t i = base + c * v.inner + p;
        y[i] = (xv[i] - mean) * is;
      }
    }
  }
  Tape& tape = tape_of(x);
  Tensor ycopy = y;
  return tape.record(
      std::move(y), {x.id},
      [ycopy = std::move(ycopy), inv_std = std::move(inv_std), v, n](
          const Tensor& g, std::span<Tensor* const> gin) {
        Tensor& gx = *gin[0];
        for (std::size_t o = 0; o < v.outer; ++o) {
          const std::size_t base = o * v.channels * v.inner;
          for (std::size_t p = 0; p < v.inner; ++p) {
            double mg = 0.0;
            double mgy = 0.0;
            for (std::size_t c = 0; c < v.channels; ++c) {
              const std::size_t i = base + c * v.inner + p;
              mg += g[i];
              mgy += g[i] * ycopy[i];
            }
            mg /= n;
            mgy /= n;
            const double is = inv_std[o * v.inner + p];
            for (std::size_t c = 0; c < v.channels; ++c) {
              const std::size_t i = base + c * v.inner + p;
              gx[i] += is * (g[i] - mg - ycopy[i] * mgy);
            }
          }
        }
      },
      "layer_norm_channels");
}

Var group_norm(Var x, std::size_t groups, double eps) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "group_norm");
  const std::size_t c = xv.dim(0);
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_norm: axis 0 (channels) " + std::to_string(c) +
                     " not divisible by n_groups " + std::to_string(groups));
  }
  const std::size_t len = (c / groups) * voxels(xv);
  const double n = static_cast<double>(len);
  Tensor y(xv.shape());
  std::vector<double> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const double* p = xv.data().data() + gi * len;
    double mean = 0.0;
    for (std::size_t i = 0; i < len; ++i) mean += p[i];
    mean /= n;
    double var = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double d = p[i] - mean;
      var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[gi] = is;
    double* q = y.data().data() + gi * len;
    for (std::size_t i = 0; i < len; ++i) q[i] = (p[i] - mean) * is;
  }
  Tensor ycopy = y;
  return tape_of(x).record(
      std::move(y), {x.id},
      [ycopy = std::move(ycopy), inv_std = std::move(inv_std), len, n, groups](
          const Tensor& g, std::span<Tensor* const> gin) {
        Tensor& gx = *gin[0];
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const std::size_t off = gi * len;
          double mg = 0.0;
          double mgy = 0.0;
          for (std::size_t i = 0; i < len; ++i) {
            mg += g[off + i];
            mgy += g[off + i] * ycopy[off + i];
          }
          mg /= n;
          mgy /= n;
          for (std::size_t i = 0; i < len; ++i) {
            gx[off + i] += inv_std[gi] * (g[off + i] - mg - ycopy[off + i] * mgy);
          }
        }
      },
      "group_norm");
}

Var channel_affine(Var x, Var gamma, Var beta) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Tensor& xv = x.value();
  const ChannelView v = channel_view(xv.shape(), "channel_affine");
  const Shape want{v.channels};
  if (gamma.shape() != want || beta.shape() != want) {
    throw ShapeError("channel_affine: gamma/beta must be " + to_string(want));
  }
  Tensor y(xv.shape());
  const Tensor& gm = gamma.value();
  const Tensor& bt = beta.value();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t c = 0; c < v.channels; ++c) {
      const std::size_t base = (o * v.channels + c) * v.inner;
      for (std::size_t p = 0; p < v.inner; ++p) y[base + p] = xv[base + p] * gm[c] + bt[c];
    }
  Tape& tape = tape_of(x);
  return tape.record(
      std::move(y), {x.id, gamma.id, beta.id},
      [&tape, ix = x.id, ig = gamma.id, v](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xv = tape.value(ix);
        const Tensor& gm = tape.value(ig);
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t c = 0; c < v.channels; ++c) {
            const std::size_t base = (o * v.channels + c) * v.inner;
            double sg = 0.0;
            double sgx = 0.0;
            for (std::size_t p = 0; p < v.inner; ++p) {
              sg += g[base + p];
              sgx += g[base + p] * xv[base + p];
            }
            if (gin[0])
              for (std::size_t p = 0; p < v.inner; ++p) (*gin[0])[base + p] += g[base + p] * gm[c];
            if (gin[1]) (*gin[1])[c] += sgx;
            if (gin[2]) (*gin[2])[c] += sg;
          }
      },
      "channel_affine");
}

Var pointwise_linear(Var x, Var weight, Var bias) {
  require_same_tape(x, weight);
  const bool has_bias = bias.valid();
  if (has_bias) require_same_tape(x, bias);
  Tensor y = pointwise_linear(x.value(), weight.value(), has_bias ? &bias.value() : nullptr);
  Tape& tape = tape_of(x);
  std::vector<int> inputs{x.id, weight.id};
  if (has_bias) inputs.push_back(bias.id);
  return tape.record(
      std::move(y), std::move(inputs),
      [&tape, ix = x.id, iw = weight.id](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xv = tape.value(ix);
        const Tensor& wv = tape.value(iw);
        const ChannelView v = channel_view(xv.shape(), "pointwise_linear");
        const std::size_t cout = wv.dim(0);
        for (std::size_t o = 0; o < v.outer; ++o) {
          const double* xo = xv.data().data() + o * v.channels * v.inner;
          const double* go = g.data().data() + o * cout * v.inner;
          for (std::size_t c = 0; c < cout; ++c) {
            const double* gc = go + c * v.inner;
            for (std::size_t i = 0; i < v.channels; ++i) {
              const double* xi = xo + i * v.inner;
              if (gin[0]) {
                const double w = wv[c * v.channels + i];
                double* gx = gin[0]->data().data() + (o * v.channels + i) * v.inner;
                for (std::size_t p = 0; p < v.inner; ++p) gx[p] += w * gc[p];
              }
              if (gin[1]) {
                double acc = 0.0;
                for (std::size_t p = 0; p < v.inner; ++p) acc += gc[p] * xi[p];
                (*gin[1])[c * v.channels + i] += acc;
              }
            }
            if (gin.size() > 2 && gin[2]) {
              double acc = 0.0;
              for (std::size_t p = 0; p < v.inner; ++p) acc += gc[p];
              (*gin[2])[c] += acc;
            }
          }
        }
      },
      "pointwise_linear");
}

Var conv3d(Var x, Var kernel, Var bias, const Conv3dOptions& opt) {
  require_same_tape(x, kernel);
  const bool has_bias = bias.valid();
  if (has_bias) require_same_tape(x, bias);
  Tensor y = conv3d(x.value(), kernel.value(), has_bias ? &bias.value() : nullptr, opt);
  Tape& tape = tape_of(x);
  std::vector<int> inputs{x.id, kernel.id};
  if (has_bias) inputs.push_back(bias.id);
  return tape.record(
      std::move(y), std::move(inputs),
      [&tape, ix = x.id, ik = kernel.id, opt](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xv = tape.value(ix);
        const Tensor& kv = tape.value(ik);
        const ConvGeometry geo = conv_geometry(xv.shape(), kv.shape(), opt);
        if (gin[0]) *gin[0] += conv3d_grad_input(geo, kv, g);
        if (gin[1]) *gin[1] += conv3d_grad_kernel(geo, xv, g);
        if (gin.size() > 2 && gin[2]) *gin[2] += channel_sums(g);
      },
      "conv3d");
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Tensor& first = parts[0].value();
  require_rank(first, 4, "concat_channels");
  std::size_t total = 0;
  std::vector<int> ids;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& t = parts[i].value();
    require_same_tape(parts[0], parts[i]);
    require_rank(t, 4, "concat_channels");
    for (std::size_t a = 1; a < 4; ++a) {
      if (t.dim(a) != first.dim(a)) {
        throw ShapeError("concat_channels: input " + std::to_string(i) + " axis " + std::to_string(a) +
                         " is " + std::to_string(t.dim(a)) + ", expected " +
                         std::to_string(first.dim(a)));
      }
    }
    total += t.dim(0);
    ids.push_back(parts[i].id);
  }
  Tensor y({total, first.dim(1), first.dim(2), first.dim(3)});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + off);
    off += p.value().size();
  }
  return tape_of(parts[0]).record(
      std::move(y), std::move(ids),
      [offsets = std::move(offsets)](const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t k = 0; k < gin.size(); ++k) {
          if (!gin[k]) continue;
          Tensor& gk = *gin[k];
          for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[offsets[k] + i];
        }
      },
      "concat_channels");
}

Var slice_channels(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "slice_channels");
  if (count == 0 || begin + count > xv.dim(0)) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside axis 0 of " + to_string(xv.shape()));
  }
  const std::size_t n = voxels(xv);
  Tensor y({count, xv.dim(1), xv.dim(2), xv.dim(3)});
  std::copy(xv.data().begin() + begin * n, xv.data().begin() + (begin + count) * n, y.data().begin());
  return tape_of(x).record(
      std::move(y), {x.id},
      [off = begin * n](const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[off + i] += g[i];
      },
      "slice_channels");
}

Var to_sequence(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "to_sequence");
  const std::size_t c = xv.dim(0);
  const std::size_t l = voxels(xv);
  Tensor y({l, c});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t p = 0; p < l; ++p) y[p * c + ci] = xv[ci * l + p];
  return tape_of(x).record(
      std::move(y), {x.id},
      [c, l](const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t p = 0; p < l; ++p) (*gin[0])[ci * l + p] += g[p * c + ci];
      },
      "to_sequence");
}

Var from_sequence(Var seq, std::size_t depth, std::size_t height, std::size_t width) {
  const Tensor& sv = seq.value();
  require_rank(sv, 2, "from_sequence");
  const std::size_t l = sv.dim(0);
  const std::size_t c = sv.dim(1);
  if (l != depth * height * width) {
    throw ShapeError("from_sequence: axis 0 length " + std::to_string(l) + " != D*H*W = " +
                     std::to_string(depth * height * width));
  }
  Tensor y({c, depth, height, width});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t p = 0; p < l; ++p) y[ci * l + p] = sv[p * c + ci];
  return tape_of(seq).record(
      std::move(y), {seq.id},
      [c, l](const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t p = 0; p < l; ++p) (*gin[0])[p * c + ci] += g[ci * l + p];
      },
      "from_sequence");
}

Var group_pool(Var band, std::size_t groups, PoolMode mode) {
  Tensor y = group_pool(band.value(), groups, mode);
  Tape& tape = tape_of(band);
  return tape.record(
      std::move(y), {band.id},
      [&tape, ib = band.id, groups, mode](const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xv = tape.value(ib);
        const std::size_t per = xv.dim(0) / groups;
        const std::size_t n = voxels(xv);
        Tensor& gx = *gin[0];
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const double* gg = g.data().data() + gi * n;
          const std::size_t c0 = gi * per;
          if (mode == PoolMode::avg) {
            const double inv = 1.0 / static_cast<double>(per);
            for (std::size_t k = 0; k < per; ++k)
              for (std::size_t p = 0; p < n; ++p) gx[(c0 + k) * n + p] += gg[p] * inv;
          } else {
            for (std::size_t p = 0; p < n; ++p) {
              std::size_t best = c0;
              for (std::size_t k = 1; k < per; ++k) {
                if (xv[(c0 + k) * n + p] > xv[best * n + p]) best = c0 + k;
              }
              gx[best * n + p] += gg[p];
            }
          }
        }
      },
      "group_pool");
}

Var max_pool2(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "max_pool2");
  for (std::size_t a = 1; a < 4; ++a) {
    if (xv.dim(a) % 2 != 0) {
      throw ShapeError("max_pool2: axis " + std::to_string(a) + " extent " +
                       std::to_string(xv.dim(a)) + " is odd");
    }
  }
  const std::size_t c = xv.dim(0), d = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor y({c, d / 2, h / 2, w / 2});
  std::vector<std::size_t> arg(y.size());
  std::size_t o = 0;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t z = 0; z < d / 2; ++z)
      for (std::size_t yy = 0; yy < h / 2; ++yy)
        for (std::size_t xx = 0; xx < w / 2; ++xx, ++o) {
          std::size_t best = ((ci * d + 2 * z) * h + 2 * yy) * w + 2 * xx;
          for (std::size_t dz = 0; dz < 2; ++dz)
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t i = ((ci * d + 2 * z + dz) * h + 2 * yy + dy) * w + 2 * xx + dx;
                if (xv[i] > xv[best]) best = i;
              }
          arg[o] = best;
          y[o] = xv[best];
        }
  return tape_of(x).record(
      std::move(y), {x.id},
      [arg = std::move(arg)](const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[arg[i]] += g[i];
      },
      "max_pool2");
}

namespace {

// Linear 2x upsampling along one axis of a [outer, n, inner] view.
struct Lerp {
  std::size_t i0, i1;
  double w1;
};

std::vector<Lerp> lerp_table(std::size_t n) {
  std::vector<Lerp> t(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > n - 1) i0 = n - 1;
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    t[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

Tensor upsample_axis(const Tensor& x, std::size_t axis) {
  Shape s = x.shape();
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  s[axis] = 2 * n;
  Tensor y(s);
  const auto tab = lerp_table(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < 2 * n; ++k) {
      const double* a = x.data().data() + (o * n + tab[k].i0) * inner;
      const double* b = x.data().data() + (o * n + tab[k].i1) * inner;
      double* dst = y.data().data() + (o * 2 * n + k) * inner;
      const double w1 = tab[k].w1;
      for (std::size_t i = 0; i < inner; ++i) dst[i] = (1.0 - w1) * a[i] + w1 * b[i];
    }
  return y;
}

Tensor upsample_axis_backward(const Tensor& g, std::size_t axis) {
  Shape s = g.shape();
  const std::size_t n = s[axis] / 2;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  s[axis] = n;
  Tensor gx(s, 0.0);
  const auto tab = lerp_table(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < 2 * n; ++k) {
      const double* src = g.data().data() + (o * 2 * n + k) * inner;
      double* a = gx.data().data() + (o * n + tab[k].i0) * inner;
      double* b = gx.data().data() + (o * n + tab[k].i1) * inner;
      const double w1 = tab[k].w1;
      for (std::size_t i = 0; i < inner; ++i) {
        a[i] += (1.0 - w1) * src[i];
        b[i] += w1 * src[i];
      }
    }
  return gx;
}

}  // namespace

Var upsample_trilinear2(Var x) {
  require_rank(x.value(), 4, "upsample_trilinear2");
  Tensor y = upsample_axis(upsample_axis(upsample_axis(x.value(), 1), 2), 3);
  return tape_of(x).record(
      std::move(y), {x.id},
      [](const Tensor& g, std::span<Tensor* const> gin) {
        *gin[0] += upsample_axis_backward(upsample_axis_backward(upsample_axis_backward(g, 3), 2), 1);
      },
      "upsample_trilinear2");
}

}  // namespace fmc
