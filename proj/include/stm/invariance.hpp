#pragma once

// Geometric transforms and prediction-consistency sweeps. Images are
// [C, H, W]; vacated pixels take the fill value.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stm/model.hpp"

namespace stm {

namespace detail {

inline void require_image(const Tensor& img, const char* who) {
  if (img.rank() != 3) throw ShapeError(std::string(who) + ": expected [C,H,W], got " + to_string(img.shape()));
}

// Bilinear read at real (y, x); taps outside the image contribute `fill`.
inline float sample_fill(const Tensor& img, std::size_t c, double y, double x, float fill) {
  const long H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  const double fy = std::floor(y), fx = std::floor(x);
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double wy = y - fy, wx = x - fx;
  const auto at = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= H || xx >= W) return fill;
    return img[(c * H + yy) * W + xx];
  };
  return static_cast<float>((1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
                            wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1)));
}

}  // namespace detail

// Shifts at or beyond the image extent leave only fill.
inline Tensor translate_image(const Tensor& img, long dy, long dx, float fill = 0.0f) {
  detail::require_image(img, "translate_image");
  const long C = static_cast<long>(img.dim(0)), H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  Tensor out(img.shape(), fill);
  for (long c = 0; c < C; ++c)
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        const long sy = y - dy, sx = x - dx;
        if (sy >= 0 && sx >= 0 && sy < H && sx < W) out[(c * H + y) * W + x] = img[(c * H + sy) * W + sx];
      }
  return out;
}

// Cyclic shift, used where translation must be exactly invertible.
inline Tensor roll_image(const Tensor& img, long dy, long dx) {
  detail::require_image(img, "roll_image");
  const long C = static_cast<long>(img.dim(0)), H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  Tensor out(img.shape());
  for (long c = 0; c < C; ++c)
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x)
        out[(c * H + y) * W + x] = img[(c * H + ((y - dy) % H + H) % H) * W + ((x - dx) % W + W) % W];
  return out;
}

// Rotation about the image centre, clockwise on screen (rows grow downward)
// for positive degrees, inverse-mapped with bilinear sampling.
inline Tensor rotate_image(const Tensor& img, double degrees, float fill = 0.0f) {
  detail::require_image(img, "rotate_image");
  if (!(degrees >= -180.0 && degrees <= 180.0)) throw ValueError("rotate_image: angle must lie in [-180, 180]");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t), sn = std::sin(t);
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  Tensor out(img.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double ry = static_cast<double>(y) - cy, rx = static_cast<double>(x) - cx;
        const double sy = cy + cs * ry - sn * rx;
        const double sx = cx + sn * ry + cs * rx;
        out[(c * H + y) * W + x] = detail::sample_fill(img, c, sy, sx, fill);
      }
  return out;
}

// Bilinear resize by `factor` (half-pixel centres, edge-clamped), then
// centre-crop or centre-pad with `fill` back to the original extents.
inline Tensor scale_image(const Tensor& img, double factor, float fill = 0.0f) {
  detail::require_image(img, "scale_image");
  if (!(factor > 0.0)) throw ValueError("scale_image: factor must be positive");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const long Hn = std::lround(static_cast<double>(H) * factor), Wn = std::lround(static_cast<double>(W) * factor);
  if (Hn < 1 || Wn < 1) throw ValueError("scale_image: factor " + std::to_string(factor) + " collapses the image");
  const double fy = static_cast<double>(Hn) / H, fx = static_cast<double>(Wn) / W;
  // Offset of the kept window inside the resized image (negative when padding).
  const long oy = Hn >= static_cast<long>(H) ? (Hn - static_cast<long>(H)) / 2 : -((static_cast<long>(H) - Hn) / 2);
  const long ox = Wn >= static_cast<long>(W) ? (Wn - static_cast<long>(W)) / 2 : -((static_cast<long>(W) - Wn) / 2);
  const auto clampd = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  Tensor out(img.shape(), fill);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const long ry = static_cast<long>(y) + oy, rx = static_cast<long>(x) + ox;
        if (ry < 0 || rx < 0 || ry >= Hn || rx >= Wn) continue;
        const double sy = clampd((ry + 0.5) / fy - 0.5, static_cast<double>(H - 1));
        const double sx = clampd((rx + 0.5) / fx - 0.5, static_cast<double>(W - 1));
        out[(c * H + y) * W + x] = detail::sample_fill(img, c, sy, sx, fill);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class TransformKind { Translate, Rotate, Scale };

inline std::string_view name_of(TransformKind k) {
  switch (k) {
    case TransformKind::Translate: return "translate";
    case TransformKind::Rotate: return "rotate";
    case TransformKind::Scale: return "scale";
  }
  return "?";
}

inline TransformKind parse_transform(std::string_view s) {
  for (auto k : {TransformKind::Translate, TransformKind::Rotate, TransformKind::Scale})
    if (name_of(k) == s) return k;
  throw ConfigError("unknown transform '" + std::string(s) + "' (expected translate, rotate or scale)");
}

struct TransformSpec {
  TransformKind kind = TransformKind::Translate;
  std::vector<double> magnitudes;
  float fill = 0.0f;
};

// translate 0..64 px step 8; rotate 0..45 deg step 5; scale 0.25..3.0 step 0.25.
inline TransformSpec default_spec(TransformKind kind) {
  TransformSpec s{kind, {}, 0.0f};
  switch (kind) {
    case TransformKind::Translate:
      for (int i = 0; i <= 8; ++i) s.magnitudes.push_back(8.0 * i);
      break;
    case TransformKind::Rotate:
      for (int i = 0; i <= 9; ++i) s.magnitudes.push_back(5.0 * i);
      break;
    case TransformKind::Scale:
      for (int i = 1; i <= 12; ++i) s.magnitudes.push_back(0.25 * i);
      break;
  }
  return s;
}

inline double identity_magnitude(TransformKind k) { return k == TransformKind::Scale ? 1.0 : 0.0; }

// All variants of an image at one magnitude: four axis directions for
// translation, one image otherwise.
inline std::vector<Tensor> transformed(const Tensor& img, const TransformSpec& spec, double m) {
  switch (spec.kind) {
    case TransformKind::Translate: {
      const long d = std::lround(m);
      return {translate_image(img, d, 0, spec.fill), translate_image(img, -d, 0, spec.fill),
              translate_image(img, 0, d, spec.fill), translate_image(img, 0, -d, spec.fill)};
    }
    case TransformKind::Rotate: return {rotate_image(img, m, spec.fill)};
    case TransformKind::Scale: return {scale_image(img, m, spec.fill)};
  }
  return {};
}

// Lowest index wins ties.
inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t k = logits.dim(logits.rank() - 1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (logits[row * k + j] > logits[row * k + best]) best = j;
  return best;
}

// Batch [N, C, H, W] -> logits [N, classes].
using Classifier = std::function<Tensor(const Tensor&)>;

inline Classifier classifier_of(const Model& m) {
  return [&m](const Tensor& x) { return forward_classify(m, x); };
}

struct InvarianceRow {
  double magnitude = 0.0;
  double consistency = 0.0;
  std::optional<double> accuracy;
  std::size_t n = 0;
};

struct InvarianceReport {
  TransformKind kind = TransformKind::Translate;
  std::vector<InvarianceRow> rows;
};

struct InvarianceError : std::domain_error {
  using std::domain_error::domain_error;
};

inline std::size_t predict(const Classifier& f, const Tensor& img) {
  return argmax_row(f(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)})), 0);
}

inline InvarianceReport consistency_sweep(const Classifier& f, const std::vector<Tensor>& images,
                                          const std::vector<std::size_t>* labels, const TransformSpec& spec) {
  if (images.empty()) throw InvarianceError("consistency sweep needs at least one image");
  if (labels && labels->size() != images.size()) throw InvarianceError("label count does not match image count");
  for (std::size_t i = 1; i < spec.magnitudes.size(); ++i)
    if (!(spec.magnitudes[i] > spec.magnitudes[i - 1])) throw InvarianceError("magnitudes must be strictly increasing");
  std::vector<std::size_t> base(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) base[i] = predict(f, images[i]);

  InvarianceReport rep{spec.kind, {}};
  for (double m : spec.magnitudes) {
    InvarianceRow row{m, 0.0, std::nullopt, images.size()};
    std::size_t same = 0, hit = 0, total = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
      for (const auto& t : transformed(images[i], spec, m)) {
        const std::size_t p = predict(f, t);
        same += p == base[i];
        if (labels) hit += p == (*labels)[i];
        ++total;
      }
    row.consistency = static_cast<double>(same) / static_cast<double>(total);
    if (labels) row.accuracy = static_cast<double>(hit) / static_cast<double>(total);
    rep.rows.push_back(row);
  }
  return rep;
}

// transform,magnitude,consistency,accuracy,n. The scale sweep measures
// classification consistency, not detection box agreement, and is labelled
// accordingly.
inline void write_invariance_csv(std::ostream& os, const InvarianceReport& r, bool header = true) {
  if (header) os << "transform,magnitude,consistency,accuracy,n\n";
  const std::string label =
      r.kind == TransformKind::Scale ? "scale(classification-adapted)" : std::string(name_of(r.kind));
  for (const auto& row : r.rows) {
    os << label << ',' << row.magnitude << ',' << row.consistency << ',';
    if (row.accuracy) os << *row.accuracy;
    os << ',' << row.n << '\n';
  }
}

}  // namespace stm
