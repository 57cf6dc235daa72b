#pragma once

// Dense float32 kernels. Every reduction runs left to right in a fixed index
// order, so outputs are bit-identical across runs and thread counts.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "stm/tensor.hpp"

namespace stm {

inline constexpr float kLayerNormEps = 1e-6f;

enum class PadMode { Zero, Circular };

namespace detail {

inline std::size_t leading(const Shape& s, std::size_t keep) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + keep < s.size(); ++i) n *= s[i];
  return n;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// For each element of `target`, the flat offset of the numpy-broadcast source
// element of shape `src` (right-aligned).
inline std::vector<std::size_t> broadcast_offsets(const Shape& target, const Shape& src) {
  if (src.size() > target.size())
    throw ShapeError("cannot broadcast " + to_string(src) + " to " + to_string(target));
  const std::size_t r = target.size();
  std::vector<std::size_t> stride(r, 0);
  const auto sstr = strides_of(src);
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::size_t t = r - src.size() + i;
    if (src[i] == target[t]) {
      stride[t] = sstr[i];
    } else if (src[i] != 1) {
      throw ShapeError("cannot broadcast " + to_string(src) + " to " + to_string(target));
    }
  }
  std::vector<std::size_t> out(numel(target));
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < target[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

inline Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  const std::size_t m = a.dim(a.rank() - 2), n = a.dim(a.rank() - 1);
  const std::size_t batch = leading(a.shape(), 2);
  Shape s = a.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor out(s);
  const float* src = a.data().data();
  float* dst = out.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[b * m * n + j * m + i] = src[b * m * n + i * n + j];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: c[..., i, j] = sum_k a[..., i, k] * b[..., k, j], k ascending.
// With transpose_b the right operand is given as [..., j, k].
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (transpose_b) return matmul(a, detail::transpose_last2(b), false);
  if (a.rank() < 2 || a.rank() != b.rank())
    throw ShapeError("matmul: ranks " + std::to_string(a.rank()) + " and " +
                     std::to_string(b.rank()));
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("matmul: batch extents differ " + to_string(a.shape()) + " vs " +
                       to_string(b.shape()));
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  if (b.dim(r - 2) != k)
    throw ShapeError("matmul: inner extents " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  Shape s = a.shape();
  s[r - 1] = n;
  Tensor c(s);
  const std::size_t batch = detail::leading(a.shape(), 2);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* pc = c.data().data();
  // Four rows share each strip of B; every output still accumulates over kk
  // in ascending order, so tiling and threading never change the bits.
  constexpr std::size_t kRows = 4, kCols = 256;
  const std::size_t row_blocks = (m + kRows - 1) / kRows;
  parallel_for(batch * row_blocks, [&](std::size_t job) {
    const std::size_t bi = job / row_blocks, r0 = (job % row_blocks) * kRows;
    const std::size_t rows = std::min(kRows, m - r0);
    const float* bmat = pb + bi * k * n;
    const float* arow = pa + (bi * m + r0) * k;
    float* crow = pc + (bi * m + r0) * n;
    for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
      const std::size_t j1 = std::min(n, j0 + kCols);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const float* brow = bmat + kk * n;
        for (std::size_t r = 0; r < rows; ++r) {
          const float av = arow[r * k + kk];
          float* cr = crow + r * n;
          for (std::size_t j = j0; j < j1; ++j) cr[j] += av * brow[j];
        }
      }
    }
  });
  return c;
}

inline void matmul_backward(const Tensor& a, const Tensor& b, bool transpose_b, const Tensor& g,
                            Tensor* da, Tensor* db) {
  if (!transpose_b) {
    if (da) *da = matmul(g, b, true);
    if (db) *db = matmul(detail::transpose_last2(a), g);
  } else {
    if (da) *da = matmul(g, b);
    if (db) *db = matmul(detail::transpose_last2(g), a);
  }
}

// ---------------------------------------------------------------------------
// linear over the last axis: y = x . W + bias, W stored [in, out].
// ---------------------------------------------------------------------------

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0))
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " +
                     to_string(w.shape()));
  const std::size_t in = w.dim(0), out = w.dim(1);
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != out))
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " for " + std::to_string(out) +
                     " outputs");
  const std::size_t rows = x.numel() / in;
  Tensor y = matmul(x.reshaped({rows, in}), w);
  if (!bias.empty()) {
    float* py = y.data().data();
    const float* pb = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out; ++j) py[r * out + j] += pb[j];
  }
  Shape s = x.shape();
  s.back() = out;
  return y.reshaped(std::move(s));
}

inline Tensor linear_backward_input(const Tensor& g, const Tensor& w) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  const std::size_t rows = g.numel() / out;
  Shape s = g.shape();
  s.back() = in;
  return matmul(g.reshaped({rows, out}), w, true).reshaped(std::move(s));
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor c(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) c[i] = a[i] + b[i];
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor c(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) c[i] = a[i] - b[i];
  return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor c(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) c[i] = a[i] * b[i];
  return c;
}

inline Tensor scale(const Tensor& x, float s) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * s;
  return y;
}

// x + c with c broadcast to x's shape.
inline Tensor add_broadcast(const Tensor& x, const Tensor& c) {
  const auto off = detail::broadcast_offsets(x.shape(), c.shape());
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] + c[off[i]];
  return y;
}

// x * c with c broadcast to x's shape.
inline Tensor mul_broadcast(const Tensor& x, const Tensor& c) {
  const auto off = detail::broadcast_offsets(x.shape(), c.shape());
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * c[off[i]];
  return y;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const std::size_t len = x.dim(ax);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (float v : x.data())
    if (std::isnan(v)) throw ValueError("softmax: NaN input");
  Tensor y(x.shape());
  const float* px = x.data().data();
  float* py = y.data().data();
  parallel_for(outer, [&](std::size_t o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      float mx = px[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, px[base + i * inner]);
      float sum = 0.0f;
      for (std::size_t i = 0; i < len; ++i) {
        const float e = std::exp(px[base + i * inner] - mx);
        py[base + i * inner] = e;
        sum += e;
      }
      const float inv = 1.0f / sum;
      for (std::size_t i = 0; i < len; ++i) py[base + i * inner] *= inv;
    }
  });
  return y;
}

// dx = y * (g - sum(g * y)) along the axis.
inline Tensor softmax_backward(const Tensor& y, const Tensor& g, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, y.rank());
  const std::size_t len = y.dim(ax);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= y.dim(i);
  for (std::size_t i = ax + 1; i < y.rank(); ++i) inner *= y.dim(i);
  Tensor dx(y.shape());
  parallel_for(outer, [&](std::size_t o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      float dot = 0.0f;
      for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t p = base + i * inner;
        dx[p] = y[p] * (g[p] - dot);
      }
    }
  });
  return dx;
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         float eps = kLayerNormEps) {
  const std::size_t c = x.dim(x.rank() - 1);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layer_norm: gamma/beta of " + std::to_string(gamma.numel()) + "/" +
                     std::to_string(beta.numel()) + " for " + std::to_string(c) + " channels");
  const std::size_t rows = x.numel() / c;
  Tensor y(x.shape());
  const float* px = x.data().data();
  float* py = y.data().data();
  parallel_for(rows, [&](std::size_t r) {
    const float* xr = px + r * c;
    // Statistics in double: LN amplifies any error in them by 1/std.
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < c; ++i)
      py[r * c + i] = static_cast<float>((xr[i] - mean) * rstd * gamma[i] + beta[i]);
  });
  return y;
}

inline Tensor layer_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& g,
                                  float eps = kLayerNormEps) {
  const std::size_t c = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / c;
  Tensor dx(x.shape());
  parallel_for(rows, [&](std::size_t r) {
    const std::size_t base = r * c;
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += x[base + i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (x[base + i] - mean) * (x[base + i] - mean);
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double mg = 0.0, mgx = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      const double gh = static_cast<double>(g[base + i]) * gamma[i];
      mg += gh;
      mgx += gh * (x[base + i] - mean) * rstd;
    }
    mg /= static_cast<double>(c);
    mgx /= static_cast<double>(c);
    for (std::size_t i = 0; i < c; ++i) {
      const double xhat = (x[base + i] - mean) * rstd;
      dx[base + i] = static_cast<float>(rstd * (static_cast<double>(g[base + i]) * gamma[i] - mg - xhat * mgx));
    }
  });
  return dx;
}

// ---------------------------------------------------------------------------
// gelu (exact erf form)
// ---------------------------------------------------------------------------

inline Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  const float inv_sqrt2 = static_cast<float>(1.0 / std::numbers::sqrt2);
  for (std::size_t i = 0; i < x.numel(); ++i)
    y[i] = 0.5f * x[i] * (1.0f + std::erf(x[i] * inv_sqrt2));
  return y;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& g) {
  Tensor dx(x.shape());
  const float inv_sqrt2 = static_cast<float>(1.0 / std::numbers::sqrt2);
  const float inv_sqrt2pi = static_cast<float>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float cdf = 0.5f * (1.0f + std::erf(x[i] * inv_sqrt2));
    const float pdf = inv_sqrt2pi * std::exp(-0.5f * x[i] * x[i]);
    dx[i] = g[i] * (cdf + x[i] * pdf);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Convolutions (correlation semantics, NCHW)
// ---------------------------------------------------------------------------

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  if (in + 2 * pad < k)
    throw ShapeError("kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {
inline long wrap(long i, long n) { return ((i % n) + n) % n; }
}  // namespace detail

// Dense conv2d, weight [C_out, C_in, k, k], zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " vs weight " +
                     to_string(w.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t oh = conv_out_extent(h, k, stride, pad);
  const std::size_t ow = conv_out_extent(wd, k, stride, pad);
  if (!bias.empty() && bias.numel() != co) throw ShapeError("conv2d: bias extent");
  Tensor y({n, co, oh, ow});
  const float* px = x.data().data();
  const float* pw = w.data().data();
  float* py = y.data().data();
  parallel_for(n * co, [&](std::size_t job) {
    const std::size_t b = job / co, o = job % co;
    // Fan-in reaches ci*k*k (up to thousands); accumulate in double.
    std::vector<double> plane(oh * ow, 0.0);
    for (std::size_t c = 0; c < ci; ++c) {
      const float* xin = px + (b * ci + c) * h * wd;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const float wv = pw[((o * ci + c) * k + ky) * k + kx];
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const float* xrow = xin + iy * wd;
            double* prow = plane.data() + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              prow[ox] += static_cast<double>(wv) * xrow[ix];
            }
          }
        }
      }
    }
    float* out = py + job * oh * ow;
    for (std::size_t i = 0; i < oh * ow; ++i) out[i] = static_cast<float>(plane[i] + (bias.empty() ? 0.0 : bias[o]));
  });
  return y;
}

inline Tensor conv2d_backward_input(const Tensor& g, const Tensor& w, const Shape& x_shape,
                                    std::size_t stride, std::size_t pad) {
  const std::size_t n = x_shape[0], ci = x_shape[1], h = x_shape[2], wd = x_shape[3];
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t oh = g.dim(2), ow = g.dim(3);
  Tensor dx(x_shape);
  parallel_for(n * ci, [&](std::size_t job) {
    const std::size_t b = job / ci, c = job % ci;
    float* din = dx.data().data() + job * h * wd;
    for (std::size_t o = 0; o < co; ++o) {
      const float* gp = g.data().data() + (b * co + o) * oh * ow;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const float wv = w[((o * ci + c) * k + ky) * k + kx];
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              din[iy * wd + ix] += wv * gp[oy * ow + ox];
            }
          }
        }
    }
  });
  return dx;
}

// Depthwise conv2d, kernel [C, k, k]. Circular padding wraps indices.
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                               std::size_t stride, std::size_t pad,
                               PadMode mode = PadMode::Zero) {
  if (x.rank() != 4 || kernel.rank() != 3 || kernel.dim(0) != x.dim(1) ||
      kernel.dim(1) != kernel.dim(2))
    throw ShapeError("depthwise_conv2d: input " + to_string(x.shape()) + " vs kernel " +
                     to_string(kernel.shape()));
  if (stride == 0) throw ShapeError("depthwise_conv2d: stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), k = kernel.dim(1);
  const std::size_t oh = conv_out_extent(h, k, stride, pad);
  const std::size_t ow = conv_out_extent(wd, k, stride, pad);
  if (!bias.empty() && bias.numel() != c) throw ShapeError("depthwise_conv2d: bias extent");
  Tensor y({n, c, oh, ow});
  parallel_for(n * c, [&](std::size_t job) {
    const std::size_t ch = job % c;
    const float* xin = x.data().data() + job * h * wd;
    const float* kr = kernel.data().data() + ch * k * k;
    float* out = y.data().data() + job * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        // Double accumulator: k*k taps per output, still a fixed order.
        double acc = 0.0;
        for (std::size_t ky = 0; ky < k; ++ky) {
          long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (mode == PadMode::Circular) iy = detail::wrap(iy, static_cast<long>(h));
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (mode == PadMode::Circular) ix = detail::wrap(ix, static_cast<long>(wd));
            if (ix < 0 || ix >= static_cast<long>(wd)) continue;
            acc += static_cast<double>(kr[ky * k + kx]) * xin[iy * wd + ix];
          }
        }
        if (!bias.empty()) acc += bias[ch];
        out[oy * ow + ox] = static_cast<float>(acc);
      }
  });
  return y;
}

inline Tensor depthwise_conv2d_backward_input(const Tensor& g, const Tensor& kernel,
                                              const Shape& x_shape, std::size_t stride,
                                              std::size_t pad, PadMode mode = PadMode::Zero) {
  const std::size_t n = x_shape[0], c = x_shape[1], h = x_shape[2], wd = x_shape[3];
  const std::size_t k = kernel.dim(1), oh = g.dim(2), ow = g.dim(3);
  Tensor dx(x_shape);
  parallel_for(n * c, [&](std::size_t job) {
    const std::size_t ch = job % c;
    const float* gp = g.data().data() + job * oh * ow;
    const float* kr = kernel.data().data() + ch * k * k;
    float* din = dx.data().data() + job * h * wd;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const float gv = gp[oy * ow + ox];
        for (std::size_t ky = 0; ky < k; ++ky) {
          long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (mode == PadMode::Circular) iy = detail::wrap(iy, static_cast<long>(h));
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (mode == PadMode::Circular) ix = detail::wrap(ix, static_cast<long>(wd));
            if (ix < 0 || ix >= static_cast<long>(wd)) continue;
            din[iy * wd + ix] += kr[ky * k + kx] * gv;
          }
        }
      }
  });
  return dx;
}

// ---------------------------------------------------------------------------
// Bilinear sampling with zero outside the map.
// ---------------------------------------------------------------------------

namespace detail {

struct BilinearTap {
  long y0, x0;
  float wy, wx;  // fractional parts
};

inline BilinearTap bilinear_tap(double py, double px) {
  const double fy = std::floor(py), fx = std::floor(px);
  return {static_cast<long>(fy), static_cast<long>(fx), static_cast<float>(py - fy), static_cast<float>(px - fx)};
}

// Sample one channel plane (row stride `rs`, column stride `cs`).
inline float bilinear_at(const float* plane, long h, long w, std::size_t rs, std::size_t cs,
                         const BilinearTap& t) {
  float v = 0.0f;
  const long ys[2] = {t.y0, t.y0 + 1};
  const long xs[2] = {t.x0, t.x0 + 1};
  const float wy[2] = {1.0f - t.wy, t.wy};
  const float wx[2] = {1.0f - t.wx, t.wx};
  for (int a = 0; a < 2; ++a) {
    if (ys[a] < 0 || ys[a] >= h) continue;
    for (int b = 0; b < 2; ++b) {
      if (xs[b] < 0 || xs[b] >= w) continue;
      v += wy[a] * wx[b] * plane[ys[a] * rs + xs[b] * cs];
    }
  }
  return v;
}

}  // namespace detail

// x [N, C, H, W], points [N, P, 2] as (y, x) -> [N, C, P].
inline Tensor bilinear_sample(const Tensor& x, const Tensor& points) {
  if (x.rank() != 4 || points.rank() != 3 || points.dim(0) != x.dim(0) || points.dim(2) != 2)
    throw ShapeError("bilinear_sample: input " + to_string(x.shape()) + " points " +
                     to_string(points.shape()));
  for (float v : points.data())
    if (!std::isfinite(v)) throw ValueError("bilinear_sample: non-finite coordinate");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), p = points.dim(1);
  Tensor y({n, c, p});
  parallel_for(n * c, [&](std::size_t job) {
    const std::size_t b = job / c;
    const float* plane = x.data().data() + job * h * w;
    for (std::size_t i = 0; i < p; ++i) {
      const auto t = detail::bilinear_tap(points[(b * p + i) * 2], points[(b * p + i) * 2 + 1]);
      y[job * p + i] = detail::bilinear_at(plane, static_cast<long>(h), static_cast<long>(w), w, 1, t);
    }
  });
  return y;
}

inline Tensor bilinear_sample_backward_input(const Tensor& g, const Tensor& points,
                                             const Shape& x_shape) {
  const std::size_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
  const std::size_t p = points.dim(1);
  Tensor dx(x_shape);
  parallel_for(n * c, [&](std::size_t job) {
    const std::size_t b = job / c;
    float* plane = dx.data().data() + job * h * w;
    for (std::size_t i = 0; i < p; ++i) {
      const auto t = detail::bilinear_tap(points[(b * p + i) * 2], points[(b * p + i) * 2 + 1]);
      const float gv = g[job * p + i];
      const long ys[2] = {t.y0, t.y0 + 1};
      const long xs[2] = {t.x0, t.x0 + 1};
      const float wy[2] = {1.0f - t.wy, t.wy};
      const float wx[2] = {1.0f - t.wx, t.wx};
      for (int a = 0; a < 2; ++a) {
        if (ys[a] < 0 || ys[a] >= static_cast<long>(h)) continue;
        for (int bb = 0; bb < 2; ++bb) {
          if (xs[bb] < 0 || xs[bb] >= static_cast<long>(w)) continue;
          plane[ys[a] * w + xs[bb]] += wy[a] * wx[bb] * gv;
        }
      }
    }
  });
  return dx;
}

// ---------------------------------------------------------------------------
// Layout primitives
// ---------------------------------------------------------------------------

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  const auto in_str = strides_of(x.shape());
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    step[i] = in_str[perm[i]];
  }
  Tensor y(out_shape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  const float* px = x.data().data();
  float* py = y.data().data();
  for (std::size_t i = 0; i < y.numel(); ++i) {
    py[i] = px[off];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += step[d];
      if (idx[d] < out_shape[d]) break;
      off -= step[d] * idx[d];
      idx[d] = 0;
    }
  }
  return y;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

// y[i] = x[index[i]], or 0 where index[i] < 0.
using GatherIndex = std::vector<std::int64_t>;

inline Tensor gather(const Tensor& x, const Shape& out_shape, const GatherIndex& index) {
  if (index.size() != numel(out_shape))
    throw ShapeError("gather: index length does not match " + to_string(out_shape));
  Tensor y(out_shape);
  const auto n = static_cast<std::int64_t>(x.numel());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto s = index[i];
    if (s >= n) throw ShapeError("gather: source index out of range");
    y[i] = s < 0 ? 0.0f : x[static_cast<std::size_t>(s)];
  }
  return y;
}

inline Tensor gather_backward(const Tensor& g, const Shape& x_shape, const GatherIndex& index) {
  Tensor dx(x_shape);
  for (std::size_t i = 0; i < index.size(); ++i)
    if (index[i] >= 0) dx[static_cast<std::size_t>(index[i])] += g[i];
  return dx;
}

// Mean over the last axis, which is removed.
inline Tensor mean_last(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("mean_last needs rank >= 2");
  const std::size_t len = x.dim(x.rank() - 1);
  Shape s(x.shape().begin(), x.shape().end() - 1);
  Tensor y(s);
  for (std::size_t r = 0; r < y.numel(); ++r) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < len; ++i) acc += x[r * len + i];
    y[r] = acc / static_cast<float>(len);
  }
  return y;
}

inline Tensor mean_last_backward(const Tensor& g, const Shape& x_shape) {
  const std::size_t len = x_shape.back();
  Tensor dx(x_shape);
  for (std::size_t r = 0; r < g.numel(); ++r)
    for (std::size_t i = 0; i < len; ++i) dx[r * len + i] = g[r] / static_cast<float>(len);
  return dx;
}

// ---------------------------------------------------------------------------
// Deformable aggregation (DCNv3 core), channels-last.
//   value   [N, H, W, C]
//   offsets [N, H, W, G*K*2], entry (g*K + k)*2 + {0: dy, 1: dx}
//   weights [N, H, W, G*K]
// out[n, y, x, g*Cg + c] = sum_k w_k * bilinear(value_g, (y, x) + grid_k + scale * offset_k)
// grid_k runs row-major over a sqrt(K) x sqrt(K) unit grid centred on the pixel.
// ---------------------------------------------------------------------------

struct DeformGeometry {
  std::size_t groups;
  std::size_t points;
  float offset_scale;
};

namespace detail {

inline std::size_t grid_side(std::size_t points) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(points))));
  if (side * side != points || side % 2 == 0)
    throw ShapeError("deformable sampling needs an odd square point count, got " +
                     std::to_string(points));
  return side;
}

inline void check_deform_shapes(const Tensor& value, const Tensor& offsets, const Tensor& weights,
                                const DeformGeometry& geo) {
  if (value.rank() != 4) throw ShapeError("dcnv3: value must be [N,H,W,C]");
  const std::size_t c = value.dim(3);
  if (geo.groups == 0 || c % geo.groups != 0)
    throw ShapeError("dcnv3: channels " + std::to_string(c) + " not divisible by groups " +
                     std::to_string(geo.groups));
  Shape off_shape = value.shape();
  off_shape[3] = geo.groups * geo.points * 2;
  Shape w_shape = value.shape();
  w_shape[3] = geo.groups * geo.points;
  if (offsets.shape() != off_shape || weights.shape() != w_shape)
    throw ShapeError("dcnv3: offsets " + to_string(offsets.shape()) + " weights " +
                     to_string(weights.shape()) + " for value " + to_string(value.shape()));
}

}  // namespace detail

inline Tensor dcnv3_sample(const Tensor& value, const Tensor& offsets, const Tensor& weights,
                           const DeformGeometry& geo) {
  detail::check_deform_shapes(value, offsets, weights, geo);
  for (float v : offsets.data())
    if (!std::isfinite(v)) throw ValueError("dcnv3: non-finite sampling offset");
  const std::size_t n = value.dim(0), h = value.dim(1), w = value.dim(2), c = value.dim(3);
  const std::size_t G = geo.groups, K = geo.points, cg = c / G;
  const long side = static_cast<long>(detail::grid_side(K));
  const long half = side / 2;
  Tensor out(value.shape());
  parallel_for(n * h, [&](std::size_t row) {
    const std::size_t b = row / h, y = row % h;
    const float* vbase = value.data().data() + b * h * w * c;
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t pix = (b * h + y) * w + x;
      float* o = out.data().data() + pix * c;
      for (std::size_t g = 0; g < G; ++g) {
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t q = g * K + k;
          const double py = static_cast<double>(y) + static_cast<double>(static_cast<long>(k) / side - half) +
                           static_cast<double>(geo.offset_scale) * offsets[pix * G * K * 2 + q * 2];
          const double px = static_cast<double>(x) + static_cast<double>(static_cast<long>(k) % side - half) +
                           static_cast<double>(geo.offset_scale) * offsets[pix * G * K * 2 + q * 2 + 1];
          const auto t = detail::bilinear_tap(py, px);
          const float wk = weights[pix * G * K + q];
          for (std::size_t ch = 0; ch < cg; ++ch)
            o[g * cg + ch] += wk * detail::bilinear_at(vbase + g * cg + ch, static_cast<long>(h),
                                                       static_cast<long>(w), w * c, c, t);
        }
      }
    }
  });
  return out;
}

struct DeformGrads {
  Tensor value, offsets, weights;
};

inline DeformGrads dcnv3_sample_backward(const Tensor& value, const Tensor& offsets,
                                         const Tensor& weights, const DeformGeometry& geo,
                                         const Tensor& g) {
  const std::size_t n = value.dim(0), h = value.dim(1), w = value.dim(2), c = value.dim(3);
  const std::size_t G = geo.groups, K = geo.points, cg = c / G;
  const long side = static_cast<long>(detail::grid_side(K));
  const long half = side / 2;
  DeformGrads d{Tensor(value.shape()), Tensor(offsets.shape()), Tensor(weights.shape())};
  const long hl = static_cast<long>(h), wl = static_cast<long>(w);
  // Serial: value gradients scatter across pixels.
  for (std::size_t pix = 0; pix < n * h * w; ++pix) {
    const std::size_t b = pix / (h * w), y = (pix / w) % h, x = pix % w;
    const float* vbase = value.data().data() + b * h * w * c;
    float* dvbase = d.value.data().data() + b * h * w * c;
    const float* gp = g.data().data() + pix * c;
    for (std::size_t gi = 0; gi < G; ++gi) {
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t q = gi * K + k;
        const double py = static_cast<double>(y) + static_cast<double>(static_cast<long>(k) / side - half) +
                         static_cast<double>(geo.offset_scale) * offsets[pix * G * K * 2 + q * 2];
        const double px = static_cast<double>(x) + static_cast<double>(static_cast<long>(k) % side - half) +
                         static_cast<double>(geo.offset_scale) * offsets[pix * G * K * 2 + q * 2 + 1];
        const auto t = detail::bilinear_tap(py, px);
        const float wk = weights[pix * G * K + q];
        const long ys[2] = {t.y0, t.y0 + 1};
        const long xs[2] = {t.x0, t.x0 + 1};
        const float wy[2] = {1.0f - t.wy, t.wy};
        const float wx[2] = {1.0f - t.wx, t.wx};
        const float dwy[2] = {-1.0f, 1.0f};
        float dweight = 0.0f, dpy = 0.0f, dpx = 0.0f;
        for (std::size_t ch = 0; ch < cg; ++ch) {
          const std::size_t cc = gi * cg + ch;
          const float go = gp[cc];
          float sample = 0.0f, sy = 0.0f, sx = 0.0f;
          for (int a = 0; a < 2; ++a) {
            if (ys[a] < 0 || ys[a] >= hl) continue;
            for (int bb = 0; bb < 2; ++bb) {
              if (xs[bb] < 0 || xs[bb] >= wl) continue;
              const std::size_t off = (static_cast<std::size_t>(ys[a]) * w + static_cast<std::size_t>(xs[bb])) * c + cc;
              const float v = vbase[off];
              sample += wy[a] * wx[bb] * v;
              sy += dwy[a] * wx[bb] * v;
              sx += wy[a] * dwy[bb] * v;
              dvbase[off] += go * wk * wy[a] * wx[bb];
            }
          }
          dweight += go * sample;
          dpy += go * wk * sy;
          dpx += go * wk * sx;
        }
        d.weights[pix * G * K + q] = dweight;
        d.offsets[pix * G * K * 2 + q * 2] = dpy * geo.offset_scale;
        d.offsets[pix * G * K * 2 + q * 2 + 1] = dpx * geo.offset_scale;
      }
    }
  }
  return d;
}

}  // namespace stm
