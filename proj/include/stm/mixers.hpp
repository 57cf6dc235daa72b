#pragma once

// The five spatial token mixers. Each maps an (N, C, H, W) map to a map of the
// same shape: M(p) = W_o * sum_{k in S(p)} w_pk * X(k).

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "stm/autodiff.hpp"
#include "stm/ops.hpp"
#include "stm/tensor.hpp"

namespace stm {

enum class StmKind { HaloAttn, SWAttn, SRAttn, DWConv, DCNv3 };

enum class HaloVariant { Standard, Switch, OnePixel, ShiftedQuery };

// How a Switch block without halo is realised.
enum class SwitchMode {
  ZeroHalo,  // halo size 0 on alternate blocks
  SkipRead,  // keep the enlarged window but never read the halo band
};

enum class QueryAnchor { Center, TopLeft };

inline std::string_view name_of(StmKind k) {
  switch (k) {
    case StmKind::HaloAttn: return "halo";
    case StmKind::SWAttn: return "swin";
    case StmKind::SRAttn: return "pvt";
    case StmKind::DWConv: return "dwconv";
    case StmKind::DCNv3: return "dcnv3";
  }
  return "?";
}

inline std::string_view name_of(HaloVariant v) {
  switch (v) {
    case HaloVariant::Standard: return "standard";
    case HaloVariant::Switch: return "switch";
    case HaloVariant::OnePixel: return "1px";
    case HaloVariant::ShiftedQuery: return "shift";
  }
  return "?";
}

// Per-block mixer hyperparameters.
struct StmParams {
  std::size_t heads = 1;
  std::size_t window = 7;  // halo block / swin window side
  std::size_t halo = 3;
  bool shifted = false;  // swin: roll by window/2
  QueryAnchor anchor = QueryAnchor::Center;
  bool read_halo = true;
  std::size_t sr_ratio = 1;
  std::size_t dcn_points = 9;
  std::size_t dcn_groups = 1;
  float offset_scale = 1.0f;
  std::size_t dw_kernel = 7;
  bool dw_projections = true;

  std::size_t key_window() const { return window + 2 * halo; }
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct Norm {
  Tensor gamma;
  Tensor beta;
};

struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct DepthwiseConv {
  Tensor kernel;  // [C, k, k]
  Tensor bias;
};

struct LocalAttentionWeights {
  Linear qkv;
  Linear proj;
  Tensor rel_bias;  // [heads, L, L], L = window + key_window - 1
};

struct SpatialReductionWeights {
  Linear q;
  Linear kv;
  Linear proj;
  std::optional<Conv2d> reduce;
  std::optional<Norm> reduce_norm;
};

struct DwConvWeights {
  std::optional<Linear> in_proj;
  DepthwiseConv dw;
  std::optional<Linear> out_proj;
};

struct DcnWeights {
  Linear in_proj;
  DepthwiseConv offset_dw;  // 3x3
  Linear offset;            // -> G*K*2
  Linear mask;              // -> G*K
  Linear out_proj;
};

using MixerWeights =
    std::variant<LocalAttentionWeights, SpatialReductionWeights, DwConvWeights, DcnWeights>;

struct Mixer {
  StmKind kind = StmKind::DWConv;
  StmParams params;
  MixerWeights weights;
};

// Intermediate aggregation weights, captured for inspection.
struct MixTrace {
  std::vector<Tensor> attention;   // softmax outputs [..., T_q, T_k]
  std::vector<Tensor> modulation;  // DCNv3 [N, H, W, G*K]
};

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Every draw is zero; builds shape-only models (accounting, loading).
  static Rng zeros() {
    Rng r(0);
    r.zeros_ = true;
    return r;
  }

  // Normal(0, std) truncated to +-2 std.
  Tensor trunc_normal(Shape shape, float std) {
    Tensor t(std::move(shape));
    if (zeros_) return t;
    std::normal_distribution<float> dist(0.0f, 1.0f);
    for (auto& v : t.data()) {
      float z = dist(engine_);
      while (std::abs(z) > 2.0f) z = dist(engine_);
      v = z * std;
    }
    return t;
  }

  Tensor uniform(Shape shape, float lo, float hi) {
    Tensor t(std::move(shape));
    if (zeros_) return t;
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : t.data()) v = dist(engine_);
    return t;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool zeros_ = false;
};

inline constexpr float kInitStd = 0.02f;

inline Linear make_linear(Rng& rng, std::size_t in, std::size_t out) {
  return {rng.trunc_normal({in, out}, kInitStd), Tensor({out})};
}

inline Linear zero_linear(std::size_t in, std::size_t out) {
  return {Tensor({in, out}), Tensor({out})};
}

inline Norm make_norm(std::size_t c) { return {Tensor({c}, 1.0f), Tensor({c})}; }

inline Conv2d make_conv(Rng& rng, std::size_t in, std::size_t out, std::size_t k,
                        std::size_t stride, std::size_t pad) {
  return {rng.trunc_normal({out, in, k, k}, kInitStd), Tensor({out}), stride, pad};
}

inline DepthwiseConv make_depthwise(Rng& rng, std::size_t c, std::size_t k) {
  return {rng.trunc_normal({c, k, k}, kInitStd), Tensor({c})};
}

inline std::size_t rel_table_side(StmKind kind, const StmParams& p) {
  return kind == StmKind::HaloAttn ? p.window + p.key_window() - 1 : 2 * p.window - 1;
}

inline void validate_mixer(StmKind kind, std::size_t channels, const StmParams& p) {
  const bool attention =
      kind == StmKind::HaloAttn || kind == StmKind::SWAttn || kind == StmKind::SRAttn;
  if (attention && (p.heads == 0 || channels % p.heads != 0))
    throw ShapeError("channels " + std::to_string(channels) + " not divisible by heads " +
                     std::to_string(p.heads));
  if ((kind == StmKind::HaloAttn || kind == StmKind::SWAttn) && p.window == 0)
    throw ShapeError("window size must be positive");
  if (kind == StmKind::SRAttn && p.sr_ratio == 0) throw ShapeError("sr_ratio must be >= 1");
  if (kind == StmKind::DCNv3 && (p.dcn_groups == 0 || channels % p.dcn_groups != 0))
    throw ShapeError("channels " + std::to_string(channels) + " not divisible by groups " +
                     std::to_string(p.dcn_groups));
  if (kind == StmKind::DWConv && p.dw_kernel % 2 == 0)
    throw ShapeError("depthwise kernel must be odd");
}

inline Mixer make_mixer(StmKind kind, std::size_t c, const StmParams& p, Rng& rng) {
  validate_mixer(kind, c, p);
  Mixer m{kind, p, {}};
  switch (kind) {
    case StmKind::HaloAttn:
    case StmKind::SWAttn: {
      const std::size_t side = rel_table_side(kind, p);
      LocalAttentionWeights w;
      w.qkv = make_linear(rng, c, 3 * c);
      w.proj = make_linear(rng, c, c);
      w.rel_bias = rng.trunc_normal({p.heads, side, side}, kInitStd);
      m.weights = std::move(w);
      break;
    }
    case StmKind::SRAttn: {
      SpatialReductionWeights w;
      w.q = make_linear(rng, c, c);
      w.kv = make_linear(rng, c, 2 * c);
      w.proj = make_linear(rng, c, c);
      if (p.sr_ratio > 1) {
        w.reduce = make_conv(rng, c, c, p.sr_ratio, p.sr_ratio, 0);
        w.reduce_norm = make_norm(c);
      }
      m.weights = std::move(w);
      break;
    }
    case StmKind::DWConv: {
      DwConvWeights w;
      if (p.dw_projections) w.in_proj = make_linear(rng, c, c);
      w.dw = make_depthwise(rng, c, p.dw_kernel);
      if (p.dw_projections) w.out_proj = make_linear(rng, c, c);
      m.weights = std::move(w);
      break;
    }
    case StmKind::DCNv3: {
      DcnWeights w;
      w.in_proj = make_linear(rng, c, c);
      w.offset_dw = make_depthwise(rng, c, 3);
      w.offset = zero_linear(c, p.dcn_groups * p.dcn_points * 2);
      w.mask = zero_linear(c, p.dcn_groups * p.dcn_points);
      w.out_proj = make_linear(rng, c, c);
      m.weights = std::move(w);
      break;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Tensor enumeration (checkpoint order)
// ---------------------------------------------------------------------------

template <class L, class F>
void visit_linear(L& l, const std::string& prefix, F&& f) {
  f(prefix + ".weight", l.weight);
  f(prefix + ".bias", l.bias);
}

template <class N, class F>
void visit_norm(N& n, const std::string& prefix, F&& f) {
  f(prefix + ".gamma", n.gamma);
  f(prefix + ".beta", n.beta);
}

template <class C, class F>
void visit_conv(C& c, const std::string& prefix, F&& f) {
  f(prefix + ".weight", c.weight);
  f(prefix + ".bias", c.bias);
}

template <class D, class F>
void visit_depthwise(D& d, const std::string& prefix, F&& f) {
  f(prefix + ".kernel", d.kernel);
  f(prefix + ".bias", d.bias);
}

template <class M, class F>
void visit_mixer(M& m, const std::string& prefix, F&& f) {
  std::visit(
      [&](auto& w) {
        using W = std::decay_t<decltype(w)>;
        if constexpr (std::is_same_v<W, LocalAttentionWeights>) {
          visit_linear(w.qkv, prefix + ".qkv", f);
          visit_linear(w.proj, prefix + ".proj", f);
          f(prefix + ".rel_bias", w.rel_bias);
        } else if constexpr (std::is_same_v<W, SpatialReductionWeights>) {
          visit_linear(w.q, prefix + ".q", f);
          visit_linear(w.kv, prefix + ".kv", f);
          if (w.reduce) visit_conv(*w.reduce, prefix + ".sr", f);
          if (w.reduce_norm) visit_norm(*w.reduce_norm, prefix + ".sr_norm", f);
          visit_linear(w.proj, prefix + ".proj", f);
        } else if constexpr (std::is_same_v<W, DwConvWeights>) {
          if (w.in_proj) visit_linear(*w.in_proj, prefix + ".in_proj", f);
          visit_depthwise(w.dw, prefix + ".dw", f);
          if (w.out_proj) visit_linear(*w.out_proj, prefix + ".out_proj", f);
        } else {
          visit_linear(w.in_proj, prefix + ".in_proj", f);
          visit_depthwise(w.offset_dw, prefix + ".offset_dw", f);
          visit_linear(w.offset, prefix + ".offset", f);
          visit_linear(w.mask, prefix + ".mask", f);
          visit_linear(w.out_proj, prefix + ".out_proj", f);
        }
      },
      m.weights);
}

// ---------------------------------------------------------------------------
// Shared attention core
// ---------------------------------------------------------------------------

inline const Tensor& value_of(const Tensor& t) { return t; }
inline const Tensor& value_of(const Var& v) { return v.value(); }

// Last-axis slice [begin, begin + len).
template <Value T>
T slice_last(const T& x, std::size_t begin, std::size_t len) {
  const Shape& s = x.shape();
  const std::size_t c = s.back();
  if (begin + len > c) throw ShapeError("slice_last out of range");
  Shape out = s;
  out.back() = len;
  auto idx = std::make_shared<GatherIndex>(numel(out));
  const std::size_t rows = numel(out) / len;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j)
      (*idx)[r * len + j] = static_cast<std::int64_t>(r * c + begin + j);
  return gather(x, out, std::move(idx));
}

// Multi-head scaled dot-product attention without output projection.
//   q [B, Tq, C], k/v [B, Tk, C] (or unbatched [T, C])
//   bias [heads, Tq, Tk] or [G, heads, Tq, Tk] with B a multiple of G
//   (batch index b uses bias slice b % G).
template <Value T>
T mha_core(const T& q, const T& k, const T& v, std::size_t heads, const Tensor* bias = nullptr,
           MixTrace* trace = nullptr) {
  const bool unbatched = q.shape().size() == 2;
  if (unbatched) {
    const auto r = [](const T& t) {
      return reshape(t, {1, t.shape()[0], t.shape()[1]});
    };
    T out = mha_core(r(q), r(k), r(v), heads, bias, trace);
    return reshape(out, {q.shape()[0], q.shape()[1]});
  }
  if (q.shape().size() != 3 || k.shape().size() != 3 || v.shape() != k.shape() ||
      q.shape()[0] != k.shape()[0] || q.shape()[2] != k.shape()[2])
    throw ShapeError("mha_core: q " + to_string(q.shape()) + " k " + to_string(k.shape()) +
                     " v " + to_string(v.shape()));
  const std::size_t B = q.shape()[0], tq = q.shape()[1], tk = k.shape()[1], c = q.shape()[2];
  if (heads == 0 || c % heads != 0)
    throw ShapeError("mha_core: channels " + std::to_string(c) + " not divisible by heads " +
                     std::to_string(heads));
  const std::size_t d = c / heads;
  const auto split = [&](const T& t, std::size_t len) {
    return permute(reshape(t, {B, len, heads, d}), {0, 2, 1, 3});
  };
  T logits = scale(matmul(split(q, tq), split(k, tk), true),
                   1.0f / std::sqrt(static_cast<float>(d)));
  if (bias) {
    if (bias->rank() == 3) {
      logits = add_broadcast(logits, *bias);
    } else {
      const std::size_t groups = bias->dim(0);
      if (bias->rank() != 4 || B % groups != 0)
        throw ShapeError("mha_core: bias " + to_string(bias->shape()) + " for batch " +
                         std::to_string(B));
      logits = reshape(add_broadcast(reshape(logits, {B / groups, groups, heads, tq, tk}), *bias),
                       {B, heads, tq, tk});
    }
  }
  T attn = softmax(logits, -1);
  if (trace) trace->attention.push_back(value_of(attn));
  T out = matmul(attn, split(v, tk));
  return reshape(permute(out, {0, 2, 1, 3}), {B, tq, c});
}

// ---------------------------------------------------------------------------
// Local attention geometry
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

struct WindowLayout {
  std::size_t n, h, w, c;
  std::size_t block;
  std::size_t rows, cols;  // block grid
  std::size_t blocks() const { return rows * cols; }
};

inline WindowLayout window_layout(const Shape& nhwc, std::size_t block) {
  WindowLayout l{nhwc[0], nhwc[1], nhwc[2], nhwc[3] / 3, block, 0, 0};
  l.rows = round_up(l.h, block) / block;
  l.cols = round_up(l.w, block) / block;
  return l;
}

// Halo relative-bias expansion: [heads, b*b, kw*kw]. The table is indexed by
// key-window coordinate minus query-block coordinate, so it serves either
// query anchor.
inline Tensor halo_bias(const Tensor& table, std::size_t b, std::size_t kw) {
  const std::size_t heads = table.dim(0), side = table.dim(1);
  Tensor out({heads, b * b, kw * kw});
  for (std::size_t hd = 0; hd < heads; ++hd)
    for (std::size_t qi = 0; qi < b; ++qi)
      for (std::size_t qj = 0; qj < b; ++qj)
        for (std::size_t ki = 0; ki < kw; ++ki)
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const std::size_t ry = ki + b - 1 - qi;
            const std::size_t rx = kj + b - 1 - qj;
            out[((hd * b * b) + qi * b + qj) * kw * kw + ki * kw + kj] =
                table[(hd * side + ry) * side + rx];
          }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Halo attention
// ---------------------------------------------------------------------------

template <Value T>
T halo_attention(const T& x, const LocalAttentionWeights& w, const StmParams& p,
                 MixTrace* trace = nullptr) {
  if (p.window == 0) throw ShapeError("halo_attention: block size must be positive");
  const std::size_t c = x.shape()[1];
  if (p.heads == 0 || c % p.heads != 0)
    throw ShapeError("halo_attention: channels not divisible by heads");
  const std::size_t b = p.window, kw = p.key_window();
  const std::size_t a = p.anchor == QueryAnchor::Center ? p.halo : 0;
  T qkv = linear(to_channels_last(x), w.qkv.weight, w.qkv.bias);
  const auto l = detail::window_layout(qkv.shape(), b);
  const std::size_t nb = l.n * l.blocks();

  auto q_idx = std::make_shared<GatherIndex>(nb * b * b * c, -1);
  auto k_idx = std::make_shared<GatherIndex>(nb * kw * kw * c, -1);
  auto v_idx = std::make_shared<GatherIndex>(nb * kw * kw * c, -1);
  const auto src = [&](std::size_t n, std::size_t y, std::size_t xx) {
    return static_cast<std::int64_t>(((n * l.h + y) * l.w + xx) * 3 * c);
  };
  for (std::size_t n = 0; n < l.n; ++n)
    for (std::size_t by = 0; by < l.rows; ++by)
      for (std::size_t bx = 0; bx < l.cols; ++bx) {
        const std::size_t blk = (n * l.rows + by) * l.cols + bx;
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j) {
            const std::size_t y = by * b + i, xx = bx * b + j;
            if (y >= l.h || xx >= l.w) continue;
            const auto s = src(n, y, xx);
            for (std::size_t ch = 0; ch < c; ++ch)
              (*q_idx)[((blk * b * b) + i * b + j) * c + ch] = s + static_cast<std::int64_t>(ch);
          }
        const long oy = static_cast<long>(by * b) - static_cast<long>(a);
        const long ox = static_cast<long>(bx * b) - static_cast<long>(a);
        for (std::size_t i = 0; i < kw; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const long y = oy + static_cast<long>(i), xx = ox + static_cast<long>(j);
            if (y < 0 || xx < 0 || y >= static_cast<long>(l.h) || xx >= static_cast<long>(l.w))
              continue;
            if (!p.read_halo) {
              const bool inside = y >= static_cast<long>(by * b) && y < static_cast<long>(by * b + b) &&
                                  xx >= static_cast<long>(bx * b) && xx < static_cast<long>(bx * b + b);
              if (!inside) continue;
            }
            const auto s = src(n, static_cast<std::size_t>(y), static_cast<std::size_t>(xx));
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t o = ((blk * kw * kw) + i * kw + j) * c + ch;
              (*k_idx)[o] = s + static_cast<std::int64_t>(c + ch);
              (*v_idx)[o] = s + static_cast<std::int64_t>(2 * c + ch);
            }
          }
      }
  T q = gather(qkv, {nb, b * b, c}, q_idx);
  T k = gather(qkv, {nb, kw * kw, c}, k_idx);
  T v = gather(qkv, {nb, kw * kw, c}, v_idx);
  Tensor bias = detail::halo_bias(w.rel_bias, b, kw);
  T attended = mha_core(q, k, v, p.heads, &bias, trace);

  auto out_idx = std::make_shared<GatherIndex>(l.n * l.h * l.w * c);
  for (std::size_t n = 0; n < l.n; ++n)
    for (std::size_t y = 0; y < l.h; ++y)
      for (std::size_t xx = 0; xx < l.w; ++xx) {
        const std::size_t blk = (n * l.rows + y / b) * l.cols + xx / b;
        const std::size_t tok = (y % b) * b + xx % b;
        for (std::size_t ch = 0; ch < c; ++ch)
          (*out_idx)[((n * l.h + y) * l.w + xx) * c + ch] =
              static_cast<std::int64_t>((blk * b * b + tok) * c + ch);
      }
  T merged = gather(attended, {l.n, l.h, l.w, c}, out_idx);
  return to_channels_first(linear(merged, w.proj.weight, w.proj.bias));
}

// ---------------------------------------------------------------------------
// Shifted-window attention
// ---------------------------------------------------------------------------

inline constexpr float kMaskLogit = -1e9f;

template <Value T>
T shifted_window_attention(const T& x, const LocalAttentionWeights& w, const StmParams& p,
                           MixTrace* trace = nullptr) {
  if (p.window == 0) throw ShapeError("shifted_window_attention: window must be positive");
  const std::size_t c = x.shape()[1];
  if (p.heads == 0 || c % p.heads != 0)
    throw ShapeError("shifted_window_attention: channels not divisible by heads");
  const std::size_t b = p.window;
  const std::size_t shift = (p.shifted && b > 1) ? b / 2 : 0;
  T qkv = linear(to_channels_last(x), w.qkv.weight, w.qkv.bias);
  const auto l = detail::window_layout(qkv.shape(), b);
  const std::size_t hp = l.rows * b, wp = l.cols * b;
  const std::size_t nw = l.blocks(), tok = b * b;

  // Rolled coordinate (y', x') reads original ((y' + shift) mod hp, ...).
  std::vector<GatherIndex> idx(3, GatherIndex(l.n * nw * tok * c, -1));
  for (std::size_t n = 0; n < l.n; ++n)
    for (std::size_t wy = 0; wy < l.rows; ++wy)
      for (std::size_t wx = 0; wx < l.cols; ++wx)
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j) {
            const std::size_t y = (wy * b + i + shift) % hp, xx = (wx * b + j + shift) % wp;
            if (y >= l.h || xx >= l.w) continue;
            const std::size_t o = (((n * nw) + wy * l.cols + wx) * tok + i * b + j) * c;
            const std::size_t s = ((n * l.h + y) * l.w + xx) * 3 * c;
            for (int part = 0; part < 3; ++part)
              for (std::size_t ch = 0; ch < c; ++ch)
                idx[part][o + ch] = static_cast<std::int64_t>(s + part * c + ch);
          }
  const Shape ws{l.n * nw, tok, c};
  T q = gather(qkv, ws, std::make_shared<GatherIndex>(std::move(idx[0])));
  T k = gather(qkv, ws, std::make_shared<GatherIndex>(std::move(idx[1])));
  T v = gather(qkv, ws, std::make_shared<GatherIndex>(std::move(idx[2])));

  const std::size_t heads = p.heads, side = w.rel_bias.dim(1);
  Tensor rel({heads, tok, tok});
  for (std::size_t hd = 0; hd < heads; ++hd)
    for (std::size_t a = 0; a < tok; ++a)
      for (std::size_t bb = 0; bb < tok; ++bb) {
        const std::size_t ry = a / b + b - 1 - bb / b, rx = a % b + b - 1 - bb % b;
        rel[(hd * tok + a) * tok + bb] = w.rel_bias[(hd * side + ry) * side + rx];
      }
  Tensor bias;
  if (shift > 0) {
    const auto region = [&](std::size_t v, std::size_t ext) -> std::size_t {
      return v < ext - b ? 0 : (v < ext - shift ? 1 : 2);
    };
    bias = Tensor({nw, heads, tok, tok});
    for (std::size_t wy = 0; wy < l.rows; ++wy)
      for (std::size_t wx = 0; wx < l.cols; ++wx) {
        const std::size_t win = wy * l.cols + wx;
        for (std::size_t a = 0; a < tok; ++a)
          for (std::size_t bb = 0; bb < tok; ++bb) {
            const std::size_t ra = region(wy * b + a / b, hp) * 3 + region(wx * b + a % b, wp);
            const std::size_t rb = region(wy * b + bb / b, hp) * 3 + region(wx * b + bb % b, wp);
            const float m = ra == rb ? 0.0f : kMaskLogit;
            for (std::size_t hd = 0; hd < heads; ++hd)
              bias[((win * heads + hd) * tok + a) * tok + bb] = rel[(hd * tok + a) * tok + bb] + m;
          }
      }
  } else {
    bias = std::move(rel);
  }
  T attended = mha_core(q, k, v, heads, &bias, trace);

  auto out_idx = std::make_shared<GatherIndex>(l.n * l.h * l.w * c);
  for (std::size_t n = 0; n < l.n; ++n)
    for (std::size_t y = 0; y < l.h; ++y)
      for (std::size_t xx = 0; xx < l.w; ++xx) {
        const std::size_t ry = (y + hp - shift) % hp, rx = (xx + wp - shift) % wp;
        const std::size_t win = n * nw + (ry / b) * l.cols + rx / b;
        const std::size_t t = (ry % b) * b + rx % b;
        for (std::size_t ch = 0; ch < c; ++ch)
          (*out_idx)[((n * l.h + y) * l.w + xx) * c + ch] =
              static_cast<std::int64_t>((win * tok + t) * c + ch);
      }
  T merged = gather(attended, {l.n, l.h, l.w, c}, out_idx);
  return to_channels_first(linear(merged, w.proj.weight, w.proj.bias));
}

// ---------------------------------------------------------------------------
// Spatial-reduction attention
// ---------------------------------------------------------------------------

template <Value T>
T spatial_reduction_attention(const T& x, const SpatialReductionWeights& w, const StmParams& p,
                              MixTrace* trace = nullptr) {
  const auto& s = x.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], wd = s[3];
  const std::size_t sr = p.sr_ratio;
  if (sr == 0 || h % sr != 0 || wd % sr != 0)
    throw ShapeError("spatial_reduction_attention: sr_ratio " + std::to_string(sr) +
                     " does not divide " + std::to_string(h) + "x" + std::to_string(wd));
  T tokens = to_channels_last(x);
  T q = reshape(linear(tokens, w.q.weight, w.q.bias), {n, h * wd, c});
  T reduced = tokens;
  if (sr > 1) {
    if (!w.reduce || !w.reduce_norm)
      throw ShapeError("spatial_reduction_attention: missing reduction weights");
    reduced = layer_norm(to_channels_last(conv2d(x, w.reduce->weight, w.reduce->bias, sr, 0)),
                         w.reduce_norm->gamma, w.reduce_norm->beta);
  }
  const std::size_t tr = (h / sr) * (wd / sr);
  T kv = reshape(linear(reduced, w.kv.weight, w.kv.bias), {n, tr, 2 * c});
  T attended = mha_core(q, slice_last(kv, 0, c), slice_last(kv, c, c), p.heads, nullptr, trace);
  T out = linear(reshape(attended, {n, h, wd, c}), w.proj.weight, w.proj.bias);
  return to_channels_first(out);
}

// ---------------------------------------------------------------------------
// Depthwise-convolution mixer
// ---------------------------------------------------------------------------

template <Value T>
T dwconv_mixer(const T& x, const DwConvWeights& w, PadMode mode = PadMode::Zero) {
  const std::size_t c = x.shape()[1];
  if (w.dw.kernel.dim(0) != c)
    throw ShapeError("dwconv_mixer: " + std::to_string(c) + " channels vs kernel " +
                     to_string(w.dw.kernel.shape()));
  const std::size_t k = w.dw.kernel.dim(1);
  T h = x;
  if (w.in_proj) h = to_channels_first(linear(to_channels_last(h), w.in_proj->weight, w.in_proj->bias));
  h = depthwise_conv2d(h, w.dw.kernel, w.dw.bias, 1, (k - 1) / 2, mode);
  if (w.out_proj)
    h = to_channels_first(linear(to_channels_last(h), w.out_proj->weight, w.out_proj->bias));
  return h;
}

// ---------------------------------------------------------------------------
// DCNv3 mixer
// ---------------------------------------------------------------------------

template <Value T>
T dcnv3_mixer(const T& x, const DcnWeights& w, const StmParams& p, MixTrace* trace = nullptr) {
  const auto& s = x.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], wd = s[3];
  const std::size_t G = p.dcn_groups, K = p.dcn_points;
  if (G == 0 || c % G != 0)
    throw ShapeError("dcnv3_mixer: channels " + std::to_string(c) + " not divisible by groups " +
                     std::to_string(G));
  T value = linear(to_channels_last(x), w.in_proj.weight, w.in_proj.bias);
  T feat = to_channels_last(depthwise_conv2d(x, w.offset_dw.kernel, w.offset_dw.bias, 1, 1));
  T offsets = linear(feat, w.offset.weight, w.offset.bias);
  T logits = reshape(linear(feat, w.mask.weight, w.mask.bias), {n, h, wd, G, K});
  T modulation = reshape(softmax(logits, -1), {n, h, wd, G * K});
  if (trace) trace->modulation.push_back(value_of(modulation));
  T agg = dcnv3_sample(value, offsets, modulation, DeformGeometry{G, K, p.offset_scale});
  return to_channels_first(linear(agg, w.out_proj.weight, w.out_proj.bias));
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

template <Value T>
T mix(const Mixer& m, const T& x, MixTrace* trace = nullptr, PadMode mode = PadMode::Zero) {
  switch (m.kind) {
    case StmKind::HaloAttn:
      return halo_attention(x, std::get<LocalAttentionWeights>(m.weights), m.params, trace);
    case StmKind::SWAttn:
      return shifted_window_attention(x, std::get<LocalAttentionWeights>(m.weights), m.params,
                                      trace);
    case StmKind::SRAttn:
      return spatial_reduction_attention(x, std::get<SpatialReductionWeights>(m.weights),
                                         m.params, trace);
    case StmKind::DWConv:
      return dwconv_mixer(x, std::get<DwConvWeights>(m.weights), mode);
    case StmKind::DCNv3:
      return dcnv3_mixer(x, std::get<DcnWeights>(m.weights), m.params, trace);
  }
  throw ShapeError("unknown mixer kind");
}

}  // namespace stm
