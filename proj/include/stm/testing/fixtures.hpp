#pragma once

// Mixers with every tensor randomised (including tensors that are
// zero-initialised in a fresh model) so oracle and gradient checks
// exercise all weights.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "stm/mixers.hpp"

namespace stm::oracle {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline Mixer random_mixer(StmKind kind, std::size_t channels, const StmParams& p, std::uint64_t seed) {
  Rng rng(seed);
  Mixer m = make_mixer(kind, channels, p, rng);
  visit_mixer(m, "mixer", [&](const std::string& name, Tensor& t) {
    if (ends_with(name, "gamma"))
      t = rng.uniform(t.shape(), 0.8f, 1.2f);
    else
      t = rng.uniform(t.shape(), -0.5f, 0.5f);
  });
  return m;
}

// Bilinear sampling has kinks where a coordinate crosses an integer; a
// central difference that straddles one is not a derivative. Keep every
// offset at 0.5 +- 0.4 so coordinates stay >= 0.1 from the lattice for
// inputs in [-1, 1] (|feat| <= 5, fan-in up to 16).
inline Mixer smooth_for_differences(Mixer m, std::uint64_t seed) {
  if (m.kind != StmKind::DCNv3) return m;
  auto& w = std::get<DcnWeights>(m.weights);
  Rng rng(seed ^ 0xdcULL);
  const float bound = 0.4f / (5.0f * static_cast<float>(w.offset.weight.dim(0)));
  w.offset.weight = rng.uniform(w.offset.weight.shape(), -bound, bound);
  w.offset.bias = Tensor(w.offset.bias.shape(), 0.5f);
  return m;
}

inline StmParams small_params(StmKind kind) {
  StmParams p;
  p.heads = 2;
  switch (kind) {
    case StmKind::HaloAttn:
      p.window = 2;
      p.halo = 1;
      break;
    case StmKind::SWAttn:
      p.window = 4;
      p.shifted = true;
      break;
    case StmKind::SRAttn: p.sr_ratio = 2; break;
    case StmKind::DWConv: break;
    case StmKind::DCNv3: p.dcn_groups = 2; break;
  }
  return p;
}

// Cyclic shift of every [H, W] plane of an NCHW map.
inline Tensor roll_map(const Tensor& x, long dy, long dx) {
  const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
  const std::size_t planes = x.dim(0) * x.dim(1);
  Tensor out(x.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (long y = 0; y < H; ++y)
      for (long xx = 0; xx < W; ++xx)
        out[(p * H + y) * W + xx] = x[(p * H + ((y - dy) % H + H) % H) * W + ((xx - dx) % W + W) % W];
  return out;
}

// Adds `eps` to every element of the first tensor of the mixer.
inline Mixer perturbed(Mixer m, float eps) {
  if (eps == 0.0f) return m;
  bool done = false;
  visit_mixer(m, "mixer", [&](const std::string&, Tensor& t) {
    if (done) return;
    for (auto& v : t.data()) v += eps;
    done = true;
  });
  return m;
}

struct OracleCase {
  StmKind kind;
  StmParams params;
  std::size_t h, w;
};

// Geometries up to 8x8 covering the edge cases of each mixer: ragged
// borders, halo 0, top-left anchoring, shifted and unshifted windows,
// sr = 1, and DCN with several groups.
inline std::vector<OracleCase> oracle_cases() {
  StmParams b;
  b.heads = 2;
  b.dcn_groups = 2;
  const auto with = [&](auto&& edit) {
    StmParams p = b;
    edit(p);
    return p;
  };
  return {
      {StmKind::HaloAttn, with([](auto& p) { p.window = 2; p.halo = 1; }), 4, 4},
      {StmKind::HaloAttn, with([](auto& p) { p.window = 3; p.halo = 2; }), 7, 8},
      {StmKind::HaloAttn, with([](auto& p) { p.window = 3; p.halo = 1; p.anchor = QueryAnchor::TopLeft; }), 6, 6},
      {StmKind::HaloAttn, with([](auto& p) { p.window = 2; p.halo = 1; p.read_halo = false; }), 6, 6},
      {StmKind::HaloAttn, with([](auto& p) { p.window = 4; p.halo = 0; }), 8, 8},
      {StmKind::SWAttn, with([](auto& p) { p.window = 4; p.shifted = true; }), 8, 8},
      {StmKind::SWAttn, with([](auto& p) { p.window = 3; p.shifted = true; }), 7, 5},
      {StmKind::SWAttn, with([](auto& p) { p.window = 4; }), 8, 6},
      {StmKind::SRAttn, with([](auto& p) { p.sr_ratio = 2; }), 8, 8},
      {StmKind::SRAttn, with([](auto& p) { p.sr_ratio = 1; }), 5, 7},
      {StmKind::SRAttn, with([](auto& p) { p.sr_ratio = 4; }), 8, 4},
      {StmKind::DWConv, b, 8, 8},
      {StmKind::DWConv, with([](auto& p) { p.dw_projections = false; }), 5, 6},
      {StmKind::DCNv3, b, 8, 8},
      {StmKind::DCNv3, with([](auto& p) { p.offset_scale = 2.0f; p.dcn_groups = 4; }), 6, 7},
  };
}

}  // namespace stm::oracle
