#pragma once

// Effective receptive field: per-pixel input-gradient magnitude of the summed
// centre activation of a stage map, and the ERF@50 window ratio.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <vector>

#include "stm/autodiff.hpp"
#include "stm/model.hpp"

namespace stm {

// Anything that maps an input image to a feature map at a chosen stage.
struct FeatureProbe {
  std::size_t num_stages = 1;
  std::size_t in_channels = 3;
  std::function<Var(const Var& x, std::size_t stage)> forward;
};

inline FeatureProbe feature_probe(const Model& m) {
  return {4, m.config.in_channels, [&m](const Var& x, std::size_t stage) {
            return forward_features(m, x, stage).back();
          }};
}

// Toy pure-convolution model: `layers` stride-1 depthwise k x k convolutions
// with zero padding. layers == 0 is the identity.
struct ConvStack {
  std::size_t channels = 3;
  std::size_t layers = 1;
  std::size_t kernel = 3;
  std::vector<Tensor> kernels;  // [C, k, k] each

  static ConvStack ones(std::size_t channels, std::size_t layers, std::size_t kernel) {
    ConvStack s{channels, layers, kernel, {}};
    for (std::size_t i = 0; i < layers; ++i) s.kernels.emplace_back(Shape{channels, kernel, kernel}, 1.0f);
    return s;
  }

  static ConvStack random(std::size_t channels, std::size_t layers, std::size_t kernel, std::uint64_t seed) {
    ConvStack s{channels, layers, kernel, {}};
    Rng rng(seed);
    for (std::size_t i = 0; i < layers; ++i) s.kernels.push_back(rng.uniform({channels, kernel, kernel}, -1.0f, 1.0f));
    return s;
  }

  template <Value T>
  T forward(const T& x) const {
    T h = x;
    const Tensor bias({channels});
    for (const auto& k : kernels) h = depthwise_conv2d(h, k, bias, 1, (kernel - 1) / 2);
    return h;
  }
};

inline FeatureProbe feature_probe(const ConvStack& s) {
  return {1, s.channels, [&s](const Var& x, std::size_t) { return s.forward(x); }};
}

struct ErfError : std::domain_error {
  using std::domain_error::domain_error;
};

// Raw gradient-magnitude map [H, W] for one image [C, H, W] or [1, C, H, W]:
// map(y, x) = sum_c |d(sum_c' F[c', ch, cw]) / d img(c, y, x)|.
inline Tensor gradient_map(const FeatureProbe& probe, const Tensor& image, std::size_t stage) {
  if (stage >= probe.num_stages)
    throw ErfError("stage " + std::to_string(stage) + " out of range (model has " +
                   std::to_string(probe.num_stages) + ")");
  Tensor x = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("gradient_map: expected a single image, got " + to_string(image.shape()));
  Tape tape;
  Var in = tape.leaf(x);
  Var f = probe.forward(in, stage);
  const auto& fs = f.shape();
  Tensor seed(fs);
  const std::size_t ch = fs[2] / 2, cw = fs[3] / 2;
  for (std::size_t c = 0; c < fs[1]; ++c) seed[(c * fs[2] + ch) * fs[3] + cw] = 1.0f;
  Tensor g = tape.vjp(f, seed, in);
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor map({H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H * W; ++i) map[i] += std::abs(g[c * H * W + i]);
  return map;
}

inline Tensor normalize_mass(const Tensor& map) {
  double total = 0.0;
  for (float v : map.data()) total += v;
  if (!(total > 0.0)) throw ErfError("gradient map has zero mass");
  Tensor out(map.shape());
  for (std::size_t i = 0; i < map.numel(); ++i) out[i] = static_cast<float>(map[i] / total);
  return out;
}

// Smallest odd side r of a centred square window holding at least half the
// mass, divided by the input width. Windows are clipped at the borders.
inline double erf_at_50(const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("erf_at_50: expected a 2-D map");
  const std::size_t H = map.dim(0), W = map.dim(1);
  double total = 0.0;
  for (float v : map.data()) total += v;
  if (!(total > 0.0)) throw ErfError("gradient map has zero mass");
  const long cy = static_cast<long>(H / 2), cx = static_cast<long>(W / 2);
  const long limit = 2 * static_cast<long>(std::max(H, W)) + 1;
  for (long r = 1; r <= limit; r += 2) {
    const long h = r / 2;
    double mass = 0.0;
    for (long y = std::max(0L, cy - h); y <= std::min<long>(H - 1, cy + h); ++y)
      for (long x = std::max(0L, cx - h); x <= std::min<long>(W - 1, cx + h); ++x)
        mass += map[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
    if (mass >= 0.5 * total) return static_cast<double>(std::min<long>(r, static_cast<long>(W))) / static_cast<double>(W);
  }
  return 1.0;
}

struct ErfReport {
  std::size_t stage = 0;
  Tensor map;      // normalised to unit mass
  Tensor raw_map;  // image-averaged magnitudes before normalisation
  double erf50 = 0.0;
  std::size_t n_images = 0;
};

inline std::vector<ErfReport> erf_suite(const FeatureProbe& probe, const std::vector<Tensor>& images,
                                        const std::vector<std::size_t>& stages) {
  if (images.empty()) throw ErfError("erf_suite needs at least one image");
  std::vector<ErfReport> out;
  for (auto s : stages) {
    std::vector<Tensor> maps(images.size());
    parallel_for(images.size(), [&](std::size_t i) { maps[i] = gradient_map(probe, images[i], s); });
    Tensor avg(maps.front().shape());
    for (const auto& m : maps)
      for (std::size_t i = 0; i < avg.numel(); ++i) avg[i] += m[i];
    for (auto& v : avg.data()) v /= static_cast<float>(images.size());
    ErfReport r;
    r.stage = s;
    r.raw_map = avg;
    r.map = normalize_mass(avg);
    r.erf50 = erf_at_50(r.map);
    r.n_images = images.size();
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Theoretical receptive field of pure-convolution pipelines
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t kernel, stride, pad;
};

// Inclusive input interval [lo, hi] (possibly reaching into padding) read by
// output position `pos` through the layer sequence.
struct Interval {
  long lo, hi;
};

inline Interval receptive_interval(const std::vector<ConvGeometry>& layers, long pos) {
  Interval iv{pos, pos};
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    const long s = static_cast<long>(it->stride), p = static_cast<long>(it->pad), k = static_cast<long>(it->kernel);
    iv = {iv.lo * s - p, iv.hi * s - p + k - 1};
  }
  return iv;
}

// Layer sequence up to the end of `stage` for depthwise-convolution models;
// empty for mixers whose support is not a fixed convolution.
inline std::optional<std::vector<ConvGeometry>> conv_geometry(const Model& m, std::size_t stage) {
  if (m.config.stm != StmKind::DWConv) return std::nullopt;
  std::vector<ConvGeometry> g{{3, 2, 1}, {3, 2, 1}};
  for (std::size_t s = 0; s <= stage; ++s) {
    if (s > 0) g.push_back({3, 2, 1});
    for (const auto& b : m.stages[s].blocks) {
      const std::size_t k = b.mixer.params.dw_kernel;
      g.push_back({k, 1, (k - 1) / 2});
    }
  }
  return g;
}

inline std::vector<ConvGeometry> conv_geometry(const ConvStack& s) {
  return std::vector<ConvGeometry>(s.layers, ConvGeometry{s.kernel, 1, (s.kernel - 1) / 2});
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

// 8-bit binary PGM, max-normalised; `log_scale` compresses with log1p.
inline void write_pgm(std::ostream& os, const Tensor& map, bool log_scale = false) {
  const std::size_t H = map.dim(0), W = map.dim(1);
  float mx = 0.0f;
  for (float v : map.data()) mx = std::max(mx, v);
  os << "P5\n" << W << ' ' << H << "\n255\n";
  constexpr double kLogGain = 1000.0;
  for (std::size_t i = 0; i < H * W; ++i) {
    double v = mx > 0.0f ? map[i] / mx : 0.0;
    if (log_scale) v = std::log1p(kLogGain * v) / std::log1p(kLogGain);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
}

// stage,erf50,n_images
inline void write_erf_csv(std::ostream& os, const std::vector<ErfReport>& reports) {
  os << "stage,erf50,n_images\n";
  for (const auto& r : reports) os << r.stage << ',' << r.erf50 << ',' << r.n_images << '\n';
}

}  // namespace stm
