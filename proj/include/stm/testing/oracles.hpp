#pragma once

// Reference implementations in double precision, written as direct loops
// over the defining formulas. They share no code with the kernels beyond
// the weight structs and are used by the test suite and the selftest.

#include <cmath>
#include <functional>
#include <vector>

#include "stm/mixers.hpp"
#include "stm/tensor.hpp"

namespace stm::oracle {

// Row-major double buffer.
struct Buf {
  std::vector<std::size_t> shape;
  std::vector<double> v;

  Buf() = default;
  explicit Buf(std::vector<std::size_t> s) : shape(std::move(s)) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    v.assign(n, 0.0);
  }
  explicit Buf(const Tensor& t) : shape(t.shape()), v(t.data().begin(), t.data().end()) {}

  Tensor tensor() const {
    std::vector<float> f(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) f[i] = static_cast<float>(v[i]);
    return Tensor(shape, std::move(f));
  }
};

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Buf c({M, N});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += static_cast<double>(a[i * K + k]) * b[k * N + j];
      c.v[i * N + j] = s;
    }
  return c.tensor();
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double mx = -INFINITY;
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - mx);
  for (auto& v : e) v /= s;
  return e;
}

// Two-pass mean / variance over a channel vector.
inline std::vector<double> layer_norm(const std::vector<double>& x, const Tensor& gamma, const Tensor& beta,
                                      double eps = 1e-6) {
  const double n = static_cast<double>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + eps) * gamma[i] + beta[i];
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Sliding-window correlation, zero padding.
inline Buf depthwise(const Buf& x, const Tensor& k, const Tensor& bias, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3], K = k.dim(1);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Buf out({N, C, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double s = bias[c];
          for (std::size_t i = 0; i < K; ++i)
            for (std::size_t j = 0; j < K; ++j) {
              const long y = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
              const long xx = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
              if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
              s += static_cast<double>(k[(c * K + i) * K + j]) * x.v[((n * C + c) * H + y) * W + xx];
            }
          out.v[((n * C + c) * Ho + oy) * Wo + ox] = s;
        }
  return out;
}

inline Tensor depthwise(const Tensor& x, const Tensor& k, const Tensor& bias, std::size_t stride, std::size_t pad) {
  return depthwise(Buf(x), k, bias, stride, pad).tensor();
}

inline Buf conv2d(const Buf& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3], Co = w.dim(0), K = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Buf out({N, Co, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double s = bias[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t i = 0; i < K; ++i)
              for (std::size_t j = 0; j < K; ++j) {
                const long y = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long xx = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                s += static_cast<double>(w[((o * Ci + c) * K + i) * K + j]) * x.v[((n * Ci + c) * H + y) * W + xx];
              }
          out.v[((n * Co + o) * Ho + oy) * Wo + ox] = s;
        }
  return out;
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  return conv2d(Buf(x), w, bias, stride, pad).tensor();
}

// Four-neighbour formula with zero outside the map; plane is H x W.
inline double bilinear(const std::function<double(long, long)>& at, long H, long W, double y, double x) {
  const long y0 = static_cast<long>(std::floor(y)), x0 = static_cast<long>(std::floor(x));
  const double dy = y - y0, dx = x - x0;
  const auto v = [&](long yy, long xx) { return (yy < 0 || xx < 0 || yy >= H || xx >= W) ? 0.0 : at(yy, xx); };
  return (1 - dy) * (1 - dx) * v(y0, x0) + (1 - dy) * dx * v(y0, x0 + 1) + dy * (1 - dx) * v(y0 + 1, x0) +
         dy * dx * v(y0 + 1, x0 + 1);
}

// ---------------------------------------------------------------------------
// Token-level helpers: a map is held as tokens[n][y][x][c] in a Buf of shape
// [N, H, W, C].
// ---------------------------------------------------------------------------

inline Buf tokens_of(const Buf& x) {
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  Buf t({N, H, W, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H * W; ++i) t.v[(n * H * W + i) * C + c] = x.v[(n * C + c) * H * W + i];
  return t;
}

inline Buf tokens_of(const Tensor& x) { return tokens_of(Buf(x)); }

inline Buf nchw_of(const Buf& t) {
  const std::size_t N = t.shape[0], H = t.shape[1], W = t.shape[2], C = t.shape[3];
  Buf x({N, C, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H * W; ++i) x.v[(n * C + c) * H * W + i] = t.v[(n * H * W + i) * C + c];
  return x;
}

inline Tensor map_of(const Buf& t) { return nchw_of(t).tensor(); }

// y = x W + b applied to every token (last axis).
inline Buf project(const Buf& t, const Linear& l) {
  const std::size_t in = l.weight.dim(0), out = l.weight.dim(1);
  Buf r(t.shape);
  r.shape.back() = out;
  r.v.assign(t.v.size() / in * out, 0.0);
  for (std::size_t tok = 0; tok < t.v.size() / in; ++tok)
    for (std::size_t o = 0; o < out; ++o) {
      double s = l.bias[o];
      for (std::size_t i = 0; i < in; ++i) s += t.v[tok * in + i] * l.weight[i * out + o];
      r.v[tok * out + o] = s;
    }
  return r;
}

// Dense multi-head attention for one query against a list of keys. `q`,
// keys and values are full C-channel vectors; bias(h, j) adds to logits.
inline std::vector<double> attend(const std::vector<double>& q, const std::vector<std::vector<double>>& keys,
                                  const std::vector<std::vector<double>>& values, std::size_t heads,
                                  const std::function<double(std::size_t, std::size_t)>& bias,
                                  std::vector<std::vector<double>>* weights_out = nullptr) {
  const std::size_t C = q.size(), d = C / heads;
  std::vector<double> out(C, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> logits(keys.size());
    for (std::size_t j = 0; j < keys.size(); ++j) {
      double s = 0;
      for (std::size_t e = 0; e < d; ++e) s += q[h * d + e] * keys[j][h * d + e];
      logits[j] = s / std::sqrt(static_cast<double>(d)) + (bias ? bias(h, j) : 0.0);
    }
    const auto p = softmax(logits);
    if (weights_out) weights_out->push_back(p);
    for (std::size_t j = 0; j < keys.size(); ++j)
      for (std::size_t e = 0; e < d; ++e) out[h * d + e] += p[j] * values[j][h * d + e];
  }
  return out;
}

// Dense attention over [T, C] rows, no projections.
inline Tensor mha(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, const Tensor* bias = nullptr) {
  const std::size_t Tq = q.dim(0), Tk = k.dim(0), C = q.dim(1);
  std::vector<std::vector<double>> keys(Tk, std::vector<double>(C)), vals = keys;
  for (std::size_t j = 0; j < Tk; ++j)
    for (std::size_t c = 0; c < C; ++c) {
      keys[j][c] = k[j * C + c];
      vals[j][c] = v[j * C + c];
    }
  Buf out({Tq, C});
  for (std::size_t i = 0; i < Tq; ++i) {
    std::vector<double> qi(C);
    for (std::size_t c = 0; c < C; ++c) qi[c] = q[i * C + c];
    const auto r = attend(qi, keys, vals, heads, bias ? std::function<double(std::size_t, std::size_t)>(
                                                            [&](std::size_t h, std::size_t j) {
                                                              return static_cast<double>((*bias)[(h * Tq + i) * Tk + j]);
                                                            })
                                                      : nullptr);
    for (std::size_t c = 0; c < C; ++c) out.v[i * C + c] = r[c];
  }
  return out.tensor();
}

inline std::vector<double> token(const Buf& t, std::size_t n, std::size_t y, std::size_t x, std::size_t begin,
                                 std::size_t len) {
  const std::size_t H = t.shape[1], W = t.shape[2], C = t.shape[3];
  const double* p = t.v.data() + ((n * H + y) * W + x) * C + begin;
  return {p, p + len};
}

// ---------------------------------------------------------------------------
// Mixers
// ---------------------------------------------------------------------------

// Every query pixel attends to the kw x kw window anchored at its block's
// top-left minus the anchor offset; keys outside the map (or outside the
// block when the halo is not read) are zero vectors.
inline Buf halo_attention(const Buf& x, const LocalAttentionWeights& w, const StmParams& p) {
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const std::size_t b = p.window, kw = p.window + 2 * p.halo, L = w.rel_bias.dim(1);
  const long a = p.anchor == QueryAnchor::Center ? static_cast<long>(p.halo) : 0;
  const Buf qkv = project(tokens_of(x), w.qkv);
  Buf out({N, H, W, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const std::size_t by = y / b, bx = xx / b, qi = y % b, qj = xx % b;
        std::vector<std::vector<double>> keys, vals;
        std::vector<std::pair<std::size_t, std::size_t>> pos;
        for (std::size_t i = 0; i < kw; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const long ky = static_cast<long>(by * b) - a + static_cast<long>(i);
            const long kx = static_cast<long>(bx * b) - a + static_cast<long>(j);
            bool ok = ky >= 0 && kx >= 0 && ky < static_cast<long>(H) && kx < static_cast<long>(W);
            if (!p.read_halo)
              ok = ok && ky >= static_cast<long>(by * b) && ky < static_cast<long>(by * b + b) &&
                   kx >= static_cast<long>(bx * b) && kx < static_cast<long>(bx * b + b);
            if (ok) {
              keys.push_back(token(qkv, n, ky, kx, C, C));
              vals.push_back(token(qkv, n, ky, kx, 2 * C, C));
            } else {
              keys.emplace_back(C, 0.0);
              vals.emplace_back(C, 0.0);
            }
            pos.emplace_back(i, j);
          }
        const auto r = attend(token(qkv, n, y, xx, 0, C), keys, vals, p.heads, [&](std::size_t h, std::size_t j) {
          const std::size_t ry = pos[j].first + b - 1 - qi, rx = pos[j].second + b - 1 - qj;
          return static_cast<double>(w.rel_bias[(h * L + ry) * L + rx]);
        });
        std::copy(r.begin(), r.end(), out.v.begin() + ((n * H + y) * W + xx) * C);
      }
  return nchw_of(project(out, w.proj));
}

// Materialises the padded, rolled map and the region labels explicitly,
// then attends within each window.
inline Buf shifted_window_attention(const Buf& x, const LocalAttentionWeights& w, const StmParams& p) {
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const std::size_t b = p.window, L = w.rel_bias.dim(1);
  const std::size_t Hp = (H + b - 1) / b * b, Wp = (W + b - 1) / b * b;
  const std::size_t s = (p.shifted && b > 1) ? b / 2 : 0;
  const Buf qkv = project(tokens_of(x), w.qkv);
  // Padded map of qkv tokens; padding tokens are zero.
  Buf padded({N, Hp, Wp, 3 * C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t c = 0; c < 3 * C; ++c)
          padded.v[((n * Hp + y) * Wp + xx) * 3 * C + c] = qkv.v[((n * H + y) * W + xx) * 3 * C + c];
  // Roll by -s: rolled[y][x] = padded[(y + s) % Hp][(x + s) % Wp].
  Buf rolled(padded.shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < Hp; ++y)
      for (std::size_t xx = 0; xx < Wp; ++xx)
        for (std::size_t c = 0; c < 3 * C; ++c)
          rolled.v[((n * Hp + y) * Wp + xx) * 3 * C + c] =
              padded.v[((n * Hp + (y + s) % Hp) * Wp + (xx + s) % Wp) * 3 * C + c];
  // Region label image over slices [0, Hp-b), [Hp-b, Hp-s), [Hp-s, Hp).
  std::vector<int> label(Hp * Wp, 0);
  if (s > 0) {
    const std::size_t hs[4] = {0, Hp - b, Hp - s, Hp}, ws[4] = {0, Wp - b, Wp - s, Wp};
    int cnt = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j, ++cnt)
        for (std::size_t y = hs[i]; y < hs[i + 1]; ++y)
          for (std::size_t xx = ws[j]; xx < ws[j + 1]; ++xx) label[y * Wp + xx] = cnt;
  }
  Buf attended({N, Hp, Wp, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t wy = 0; wy < Hp / b; ++wy)
      for (std::size_t wx = 0; wx < Wp / b; ++wx) {
        std::vector<std::vector<double>> keys, vals;
        std::vector<std::pair<std::size_t, std::size_t>> pos;
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j) {
            keys.push_back(token(rolled, n, wy * b + i, wx * b + j, C, C));
            vals.push_back(token(rolled, n, wy * b + i, wx * b + j, 2 * C, C));
            pos.emplace_back(i, j);
          }
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j) {
            const std::size_t qy = wy * b + i, qx = wx * b + j;
            const auto r = attend(token(rolled, n, qy, qx, 0, C), keys, vals, p.heads, [&](std::size_t h, std::size_t k) {
              const std::size_t ky = wy * b + pos[k].first, kx = wx * b + pos[k].second;
              const std::size_t ry = i + b - 1 - pos[k].first, rx = j + b - 1 - pos[k].second;
              const double m = label[qy * Wp + qx] == label[ky * Wp + kx] ? 0.0 : -1e9;
              return static_cast<double>(w.rel_bias[(h * L + ry) * L + rx]) + m;
            });
            std::copy(r.begin(), r.end(), attended.v.begin() + ((n * Hp + qy) * Wp + qx) * C);
          }
      }
  // Roll back and crop.
  Buf out({N, H, W, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t c = 0; c < C; ++c)
          out.v[((n * H + y) * W + xx) * C + c] =
              attended.v[((n * Hp + (y + Hp - s) % Hp) * Wp + (xx + Wp - s) % Wp) * C + c];
  return nchw_of(project(out, w.proj));
}

inline Buf spatial_reduction_attention(const Buf& x, const SpatialReductionWeights& w, const StmParams& p) {
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3], sr = p.sr_ratio;
  const Buf q = project(tokens_of(x), w.q);
  Buf reduced;
  if (sr > 1) {
    reduced = tokens_of(conv2d(x, w.reduce->weight, w.reduce->bias, sr, 0));
    const std::size_t T = reduced.v.size() / C;
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> v(reduced.v.begin() + t * C, reduced.v.begin() + (t + 1) * C);
      const auto y = layer_norm(v, w.reduce_norm->gamma, w.reduce_norm->beta);
      std::copy(y.begin(), y.end(), reduced.v.begin() + t * C);
    }
  } else {
    reduced = tokens_of(x);
  }
  const Buf kv = project(reduced, w.kv);
  const std::size_t Hr = H / sr, Wr = W / sr;
  Buf out({N, H, W, C});
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<std::vector<double>> keys, vals;
    for (std::size_t y = 0; y < Hr; ++y)
      for (std::size_t xx = 0; xx < Wr; ++xx) {
        keys.push_back(token(kv, n, y, xx, 0, C));
        vals.push_back(token(kv, n, y, xx, C, C));
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const auto r = attend(token(q, n, y, xx, 0, C), keys, vals, p.heads, nullptr);
        std::copy(r.begin(), r.end(), out.v.begin() + ((n * H + y) * W + xx) * C);
      }
  }
  return nchw_of(project(out, w.proj));
}

inline Buf dwconv_mixer(const Buf& x, const DwConvWeights& w) {
  Buf h = x;
  if (w.in_proj) h = nchw_of(project(tokens_of(h), *w.in_proj));
  const std::size_t k = w.dw.kernel.dim(1);
  h = depthwise(h, w.dw.kernel, w.dw.bias, 1, (k - 1) / 2);
  if (w.out_proj) h = nchw_of(project(tokens_of(h), *w.out_proj));
  return h;
}

// Per-pixel loop: generator, softmax over the K points of each group,
// bilinear sampling of the projected values, weighted sum, projection.
inline Buf dcnv3_mixer(const Buf& x, const DcnWeights& w, const StmParams& p,
                       std::vector<std::vector<double>>* modulation_out = nullptr) {
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const std::size_t G = p.dcn_groups, K = p.dcn_points, cg = C / G;
  const long side = static_cast<long>(std::lround(std::sqrt(static_cast<double>(K)))), half = side / 2;
  const Buf value = project(tokens_of(x), w.in_proj);
  const Buf feat = tokens_of(depthwise(x, w.offset_dw.kernel, w.offset_dw.bias, 1, 1));
  const Buf off = project(feat, w.offset);
  const Buf logit = project(feat, w.mask);
  Buf out({N, H, W, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const std::size_t pix = (n * H + y) * W + xx;
        for (std::size_t g = 0; g < G; ++g) {
          std::vector<double> l(logit.v.begin() + pix * G * K + g * K, logit.v.begin() + pix * G * K + (g + 1) * K);
          const auto m = softmax(l);
          if (modulation_out) modulation_out->push_back(m);
          for (std::size_t k = 0; k < K; ++k) {
            const double py = static_cast<double>(y) + (static_cast<long>(k) / side - half) +
                              p.offset_scale * off.v[pix * G * K * 2 + (g * K + k) * 2];
            const double px = static_cast<double>(xx) + (static_cast<long>(k) % side - half) +
                              p.offset_scale * off.v[pix * G * K * 2 + (g * K + k) * 2 + 1];
            for (std::size_t ch = 0; ch < cg; ++ch) {
              const std::size_t cc = g * cg + ch;
              const double s = bilinear(
                  [&](long yy, long x2) { return value.v[((n * H + yy) * W + x2) * C + cc]; }, static_cast<long>(H),
                  static_cast<long>(W), py, px);
              out.v[pix * C + cc] += m[k] * s;
            }
          }
        }
      }
  return nchw_of(project(out, w.out_proj));
}

// Deformable sampling alone on [N, H, W, C] values, [N, H, W, G*K*2]
// offsets and [N, H, W, G*K] weights.
inline Buf deform_sample(const Buf& value, const Buf& off, const Buf& wts, std::size_t G, std::size_t K,
                         double offset_scale) {
  const std::size_t N = value.shape[0], H = value.shape[1], W = value.shape[2], C = value.shape[3], cg = C / G;
  const long side = static_cast<long>(std::lround(std::sqrt(static_cast<double>(K)))), half = side / 2;
  Buf out(value.shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const std::size_t pix = (n * H + y) * W + xx;
        for (std::size_t g = 0; g < G; ++g)
          for (std::size_t k = 0; k < K; ++k) {
            const double py = static_cast<double>(y) + (static_cast<long>(k) / side - half) +
                              offset_scale * off.v[pix * G * K * 2 + (g * K + k) * 2];
            const double px = static_cast<double>(xx) + (static_cast<long>(k) % side - half) +
                              offset_scale * off.v[pix * G * K * 2 + (g * K + k) * 2 + 1];
            for (std::size_t ch = 0; ch < cg; ++ch) {
              const std::size_t cc = g * cg + ch;
              out.v[pix * C + cc] += wts.v[pix * G * K + g * K + k] *
                                     bilinear([&](long yy, long x2) { return value.v[((n * H + yy) * W + x2) * C + cc]; },
                                              static_cast<long>(H), static_cast<long>(W), py, px);
            }
          }
      }
  return out;
}

inline Buf mix(const Mixer& m, const Buf& x) {
  switch (m.kind) {
    case StmKind::HaloAttn: return halo_attention(x, std::get<LocalAttentionWeights>(m.weights), m.params);
    case StmKind::SWAttn: return shifted_window_attention(x, std::get<LocalAttentionWeights>(m.weights), m.params);
    case StmKind::SRAttn: return spatial_reduction_attention(x, std::get<SpatialReductionWeights>(m.weights), m.params);
    case StmKind::DWConv: return dwconv_mixer(x, std::get<DwConvWeights>(m.weights));
    case StmKind::DCNv3: return dcnv3_mixer(x, std::get<DcnWeights>(m.weights), m.params);
  }
  return {};
}

inline Tensor mix(const Mixer& m, const Tensor& x) { return mix(m, Buf(x)).tensor(); }

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

// Central differences of a scalar function of x, one element at a time.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, float step = 1e-3f) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float orig = xp[i];
    const float hi = orig + step, lo = orig - step;
    xp[i] = hi;
    const double fp = f(xp);
    xp[i] = lo;
    const double fm = f(xp);
    xp[i] = orig;
    // Divide by the step actually representable in float.
    g[i] = static_cast<float>((fp - fm) / (static_cast<double>(hi) - static_cast<double>(lo)));
  }
  return g;
}

// Same, on a double-precision reference: no float round-off in f.
inline Buf finite_difference(const std::function<double(const Buf&)>& f, const Buf& x, double step = 1e-3) {
  Buf g(x.shape);
  Buf xp = x;
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    const double orig = xp.v[i];
    xp.v[i] = orig + step;
    const double fp = f(xp);
    xp.v[i] = orig - step;
    const double fm = f(xp);
    xp.v[i] = orig;
    g.v[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

// ||a - b|| / max(||b||, floor)
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
    den += static_cast<double>(b[i]) * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

}  // namespace stm::oracle
