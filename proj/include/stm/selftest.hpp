#pragma once

// Oracle battery shared by the `selftest` command and the acceptance run.
// Each check reduces to one deviation compared against a tolerance.
//
// A perturbation names one check and shifts its reference side by `eps`:
// oracle-fixture weights for oracle, gradient and equivariance checks, the
// expected value for sum, accounting and ERF checks. The check must then fail.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stm/accounting.hpp"
#include "stm/erf.hpp"
#include "stm/testing/fixtures.hpp"
#include "stm/testing/gradcheck.hpp"
#include "stm/testing/oracles.hpp"

namespace stm::selftest {

struct Options {
  std::size_t oracle_seeds = 4;
  std::size_t grad_seeds = 3;
  std::optional<std::string> perturb;
  float eps = 1e-2f;
};

struct Context {
  std::size_t oracle_seeds, grad_seeds;
  float eps;  // 0 unless this check is the perturbed one
};

struct Check {
  std::string name;
  double tolerance;
  std::function<double(const Context&)> run;
};

struct Result {
  std::string name;
  double deviation;
  double tolerance;
  bool pass;
};

namespace detail {

inline Tensor uniform(Shape s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Rng rng(seed);
  return rng.uniform(std::move(s), lo, hi);
}

inline Tensor plus(Tensor t, float eps) {
  for (auto& v : t.data()) v += eps;
  return t;
}

inline double oracle_check(StmKind kind, const Context& c) {
  double worst = 0;
  for (const auto& tc : oracle::oracle_cases()) {
    if (tc.kind != kind) continue;
    for (std::uint64_t seed = 0; seed < c.oracle_seeds; ++seed) {
      const Mixer m = oracle::random_mixer(kind, 8, tc.params, seed);
      const Tensor x = uniform({2, 8, tc.h, tc.w}, 100 + seed);
      const Tensor ref = oracle::mix(oracle::perturbed(m, c.eps), x);
      worst = std::max<double>(worst, max_abs_diff(mix(m, x), ref));
    }
  }
  return worst;
}

inline double mixer_grad_check(StmKind kind, const Context& c) {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < c.grad_seeds; ++seed) {
    const Mixer m =
        oracle::smooth_for_differences(oracle::random_mixer(kind, 8, oracle::small_params(kind), seed), seed);
    const Mixer ref = oracle::perturbed(m, c.eps);
    const Tensor x = uniform({1, 8, 6, 6}, 1000 + seed);
    const auto r = oracle::gradient_check([&](const auto& v) { return mix(m, v); },
                                          [&](const oracle::Buf& b) { return oracle::mix(ref, b); }, x, seed);
    worst = std::max(worst, r.rel_error);
  }
  return worst;
}

struct PrimWeights {
  Tensor w, b, other, gamma, beta, cw, cb, dk, db, pts, gamma3;
};

inline PrimWeights prim_weights(std::uint64_t seed, float eps) {
  return {plus(uniform({6, 5}, 100 + seed), eps),
          uniform({5}, 200 + seed),
          uniform({3, 6}, 300 + seed),
          uniform({6}, 400 + seed, 0.5f, 1.5f),
          uniform({6}, 500 + seed),
          plus(uniform({4, 3, 3, 3}, 600 + seed), eps),
          uniform({4}, 700 + seed),
          plus(uniform({3, 5, 5}, 800 + seed), eps),
          uniform({3}, 900 + seed),
          uniform({2, 11, 2}, 1000 + seed, -1.3f, 7.7f),
          plus(uniform({3}, 1100 + seed, 0.5f, 1.5f), eps)};
}

// Zero-pads [2, 3, 7, 6] by one pixel on each side.
inline std::shared_ptr<GatherIndex> pad_index() {
  auto pad = std::make_shared<GatherIndex>(2 * 3 * 9 * 8, -1);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < 7; ++y)
        for (std::size_t x = 0; x < 6; ++x)
          (*pad)[((n * 3 + ch) * 9 + y + 1) * 8 + x + 1] = static_cast<std::int64_t>(((n * 3 + ch) * 7 + y) * 6 + x);
  return pad;
}

// Every differentiable primitive in at least one small graph.
inline double primitive_grad_check(const Context& c) {
  double worst = 0;
  const auto pad = pad_index();
  for (std::uint64_t seed = 0; seed < c.grad_seeds; ++seed) {
    const PrimWeights pw = prim_weights(seed, 0.0f), rw = prim_weights(seed, c.eps);
    const Tensor x = uniform({3, 6}, seed);
    const Tensor xs = uniform({2, 3, 7, 6}, 50 + seed);
    const auto check = [&](auto&& make, const Tensor& in) {
      worst = std::max(worst, oracle::gradient_check_against(make(pw), make(rw), in, seed).rel_error);
    };
    check([](const PrimWeights& p) { return [&p](const auto& v) { return linear(v, p.w, p.b); }; }, x);
    check([](const PrimWeights&) { return [](const auto& v) { return matmul(v, v, true); }; }, x);
    check([](const PrimWeights&) { return [](const auto& v) { return mul(v, add(v, v)); }; }, x);
    check([](const PrimWeights&) { return [](const auto& v) { return sub(scale(v, 0.5f), mul(v, v)); }; }, x);
    check([](const PrimWeights& p) { return [&p](const auto& v) { return mul_broadcast(add_broadcast(v, p.other), p.other); }; }, x);
    check([](const PrimWeights&) { return [](const auto& v) { return softmax(scale(v, 2.0f), 0); }; }, x);
    check([](const PrimWeights&) { return [](const auto& v) { return softmax(v, -1); }; }, x);
    check([](const PrimWeights& p) { return [&p](const auto& v) { return layer_norm(v, p.gamma, p.beta); }; }, x);
    check([](const PrimWeights&) { return [](const auto& v) { return gelu(scale(v, 2.0f)); }; }, x);
    check([](const PrimWeights&) {
      return [](const auto& v) { return mean_last(permute(reshape(v, {3, 2, 3}), {2, 0, 1})); };
    }, x);
    check([](const PrimWeights& p) { return [&p](const auto& v) { return conv2d(v, p.cw, p.cb, 2, 1); }; }, xs);
    check([](const PrimWeights& p) { return [&p](const auto& v) { return depthwise_conv2d(v, p.dk, p.db, 1, 2); }; }, xs);
    check([](const PrimWeights& p) { return [&p](const auto& v) { return depthwise_conv2d(v, p.dk, p.db, 2, 2); }; }, xs);
    check([](const PrimWeights& p) {
      return [&p](const auto& v) { return depthwise_conv2d(v, p.dk, p.db, 1, 2, PadMode::Circular); };
    }, xs);
    check([](const PrimWeights& p) { return [&p](const auto& v) { return bilinear_sample(mul(v, v), p.pts); }; }, xs);
    check([&pad](const PrimWeights&) { return [&pad](const auto& v) { return gelu(gather(v, {2, 3, 9, 8}, pad)); }; }, xs);
    // Pooled gradients are ~1/HW per element, below float difference noise:
    // differences go through a double evaluation instead.
    const auto ln_pool = [&](const oracle::Buf& b) {
      const std::size_t N = 2, C = 3, HW = 42;
      oracle::Buf out({N, C});
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          std::vector<double> px(C);
          for (std::size_t ch = 0; ch < C; ++ch) px[ch] = b.v[(n * C + ch) * HW + i];
          const auto y = oracle::layer_norm(px, rw.gamma3, rw.db, kLayerNormEps);
          for (std::size_t ch = 0; ch < C; ++ch) out.v[n * C + ch] += y[ch] / HW;
        }
      return out;
    };
    worst = std::max(
        worst,
        oracle::gradient_check([&](const auto& v) { return spatial_mean(layer_norm_channels(v, pw.gamma3, pw.db)); },
                               ln_pool, xs, seed)
            .rel_error);
  }
  return worst;
}

// Deformable sampling w.r.t. value, offsets and modulation, against the
// double-precision sampler. Offsets keep a fractional part in [0.1, 0.9] so
// no stencil straddles a bilinear kink.
inline double deform_grad_check(const Context& c) {
  const DeformGeometry geo{2, 9, 1.0f};
  double worst = 0;
  for (std::uint64_t seed = 0; seed < c.grad_seeds; ++seed) {
    const Tensor value = uniform({1, 5, 5, 4}, seed);
    Tensor off = uniform({1, 5, 5, 36}, 10 + seed, 0.1f, 0.9f);
    const Tensor whole = uniform({1, 5, 5, 36}, 30 + seed, -2.0f, 2.0f);
    for (std::size_t i = 0; i < off.numel(); ++i) off[i] += std::floor(whole[i]);
    const Tensor wts = uniform({1, 5, 5, 18}, 20 + seed, 0.0f, 1.0f);
    const oracle::Buf vb(value), ob(off), wb(plus(wts, c.eps));
    const auto ref = [&](const oracle::Buf* v, const oracle::Buf* o, const oracle::Buf* w) {
      return oracle::deform_sample(v ? *v : vb, o ? *o : ob, w ? *w : wb, geo.groups, geo.points, geo.offset_scale);
    };
    // Slot 0 is differentiated; the others are constants.
    const auto fn = [&](int slot) {
      return [&, slot](const auto& a) {
        using T = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<T, Var>) {
          Tape& t = a.tape();
          return dcnv3_sample(slot == 0 ? a : t.leaf(value), slot == 1 ? a : t.leaf(off), slot == 2 ? a : t.leaf(wts),
                              geo);
        } else {
          return dcnv3_sample(slot == 0 ? a : value, slot == 1 ? a : off, slot == 2 ? a : wts, geo);
        }
      };
    };
    const auto at = [&](int slot) {
      return [&, slot](const oracle::Buf& b) {
        return ref(slot == 0 ? &b : nullptr, slot == 1 ? &b : nullptr, slot == 2 ? &b : nullptr);
      };
    };
    worst = std::max(worst, oracle::gradient_check(fn(0), at(0), value, seed).rel_error);
    worst = std::max(worst, oracle::gradient_check(fn(1), at(1), off, seed).rel_error);
    worst = std::max(worst, oracle::gradient_check(fn(2), at(2), wts, seed).rel_error);
  }
  return worst;
}

inline double dwconv_interior(const Context& c) {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < c.oracle_seeds; ++seed) {
    const Mixer m = oracle::random_mixer(StmKind::DWConv, 4, StmParams{}, 26 + seed);
    const Mixer r = oracle::perturbed(m, c.eps);
    const Tensor x = uniform({1, 4, 20, 20}, 27 + seed);
    const long dy = 1 + static_cast<long>(seed % 3), dx = 5 - static_cast<long>(seed % 4);
    const Tensor y0 = mix(m, x), y1 = mix(r, oracle::roll_map(x, dy, dx));
    // Outputs whose 7x7 field, before and after the shift, avoids padding and wrap.
    for (std::size_t ch = 0; ch < 4; ++ch)
      for (long y = 3 + dy; y < 17; ++y)
        for (long xx = 3 + std::max(dx, 0L); xx < 17 + std::min(dx, 0L); ++xx)
          worst = std::max<double>(worst, std::abs(y1.at({0, ch, (std::size_t)y, (std::size_t)xx}) -
                                                   y0.at({0, ch, (std::size_t)(y - dy), (std::size_t)(xx - dx)})));
  }
  return worst;
}

// Unshifted windows: a cyclic shift by a window multiple permutes windows.
inline double swin_window(const Context& c) {
  StmParams p;
  p.heads = 2;
  p.window = 4;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < c.oracle_seeds; ++seed) {
    const Mixer m = oracle::random_mixer(StmKind::SWAttn, 8, p, 22 + seed);
    const Tensor x = uniform({1, 8, 12, 12}, 23 + seed);
    const long d = 4 * static_cast<long>(1 + seed % 2);
    worst = std::max<double>(worst, max_abs_diff(mix(oracle::perturbed(m, c.eps), oracle::roll_map(x, d, -d)),
                                                 oracle::roll_map(mix(m, x), d, -d)));
  }
  return worst;
}

// Halo: a shift by one block moves interior blocks whose haloed window stays
// inside the map before and after.
inline double halo_window(const Context& c) {
  StmParams p;
  p.heads = 2;
  p.window = 3;
  p.halo = 1;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < c.oracle_seeds; ++seed) {
    const Mixer m = oracle::random_mixer(StmKind::HaloAttn, 8, p, 24 + seed);
    const Tensor x = uniform({1, 8, 15, 15}, 25 + seed);
    const Tensor y0 = mix(m, x), y1 = mix(oracle::perturbed(m, c.eps), oracle::roll_map(x, 3, 3));
    for (std::size_t ch = 0; ch < 8; ++ch)
      for (std::size_t y = 6; y < 12; ++y)
        for (std::size_t xx = 6; xx < 12; ++xx)
          worst = std::max<double>(worst, std::abs(y1.at({0, ch, y, xx}) - y0.at({0, ch, y - 3, xx - 3})));
  }
  return worst;
}

inline double weight_sums(bool modulation, const Context& c) {
  double worst = 0;
  const auto kinds = modulation ? std::vector<StmKind>{StmKind::DCNv3}
                                : std::vector<StmKind>{StmKind::HaloAttn, StmKind::SWAttn, StmKind::SRAttn};
  for (auto kind : kinds)
    for (std::uint64_t seed = 0; seed < c.oracle_seeds; ++seed) {
      const Mixer m = oracle::random_mixer(kind, 8, oracle::small_params(kind), 20 + seed);
      MixTrace trace;
      mix(m, uniform({1, 8, 8, 8}, 21 + seed), &trace);
      const auto& list = modulation ? trace.modulation : trace.attention;
      if (list.empty()) return INFINITY;
      const std::size_t k = modulation ? m.params.dcn_points : list[0].shape().back();
      for (const auto& t : list)
        for (std::size_t r = 0; r < t.numel() / k; ++r) {
          double s = 0;
          for (std::size_t j = 0; j < k; ++j) {
            if (t[r * k + j] < 0.0f) return INFINITY;
            s += t[r * k + j];
          }
          worst = std::max(worst, std::abs(s - (1.0 + c.eps)));
        }
    }
  return worst;
}

// Closed-form MAC counts against loops that enumerate every multiply-add.
inline double mac_formulas(const Context& c) {
  const double ref_scale = 1.0 + c.eps;
  double worst = 0;
  const auto compare = [&](std::uint64_t formula, std::uint64_t counted) {
    worst = std::max(worst, std::abs(static_cast<double>(formula) - ref_scale * static_cast<double>(counted)));
  };
  for (std::uint64_t s : {3u, 7u, 14u})
    for (std::uint64_t k : {1u, 3u, 7u}) {
      std::uint64_t n = 0;
      for (std::uint64_t ch = 0; ch < 5; ++ch)
        for (std::uint64_t y = 0; y < s; ++y)
          for (std::uint64_t x = 0; x < s; ++x)
            for (std::uint64_t t = 0; t < k * k; ++t) ++n;
      compare(macs::depthwise(s, s, 5, k), n);
      std::uint64_t full = 0;
      for (std::uint64_t i = 0; i < n; ++i)
        for (std::uint64_t ci = 0; ci < 3; ++ci) ++full;
      compare(macs::conv(s, s, 3, 5, k), full);
    }
  // Logits: Tq x Tk dot products of length C; aggregation: Tq x C sums of Tk terms.
  for (std::uint64_t tq : {4u, 9u})
    for (std::uint64_t tk : {4u, 16u}) {
      std::uint64_t n = 0;
      for (std::uint64_t g = 0; g < 3; ++g)
        for (std::uint64_t i = 0; i < tq; ++i) {
          for (std::uint64_t j = 0; j < tk; ++j)
            for (std::uint64_t ch = 0; ch < 8; ++ch) ++n;
          for (std::uint64_t ch = 0; ch < 8; ++ch)
            for (std::uint64_t j = 0; j < tk; ++j) ++n;
        }
      compare(macs::attention(3, tq, tk, 8), n);
    }
  std::uint64_t lin = 0;
  for (int t = 0; t < 10; ++t)
    for (int i = 0; i < 6; ++i)
      for (int o = 0; o < 4; ++o) ++lin;
  compare(macs::linear(10, 6, 4), lin);
  return worst;
}

// Per-module parameter rows against a direct walk over the model tensors.
inline double param_enumeration(const Context& c) {
  double worst = 0;
  for (auto stm : kAllStms) {
    const Model m = build_skeleton(preset(stm, Scale::Micro));
    const double rows = static_cast<double>(count_params(m).total_params());
    worst = std::max(worst, std::abs(rows - (1.0 + c.eps) * static_cast<double>(parameter_count(m))));
  }
  return worst;
}

inline double erf_identity(const Context& c) {
  const auto rep = erf_suite(feature_probe(ConvStack::ones(3, 0, 3)), {uniform({3, 224, 224}, 1)}, {0});
  return std::abs(rep[0].erf50 - (1.0 + c.eps) / 224.0);
}

inline double erf_ones3x3(const Context& c) {
  const auto rep = erf_suite(feature_probe(ConvStack::ones(3, 1, 3)), {uniform({3, 224, 224}, 2)}, {0});
  return std::abs(rep[0].erf50 - (1.0 + c.eps) * 3.0 / 224.0);
}

}  // namespace detail

inline std::vector<Check> battery() {
  std::vector<Check> out;
  for (auto k : kAllStms)
    out.push_back({"oracle." + std::string(name_of(k)), 1e-5, [k](const Context& c) { return detail::oracle_check(k, c); }});
  for (auto k : kAllStms)
    out.push_back({"grad." + std::string(name_of(k)), 1e-3, [k](const Context& c) { return detail::mixer_grad_check(k, c); }});
  out.push_back({"grad.primitives", 1e-3, detail::primitive_grad_check});
  out.push_back({"grad.deform_sample", 1e-3, detail::deform_grad_check});
  out.push_back({"equivariance.dwconv_interior", 1e-6, detail::dwconv_interior});
  out.push_back({"equivariance.swin_window", 1e-6, detail::swin_window});
  out.push_back({"equivariance.halo_window", 1e-6, detail::halo_window});
  out.push_back({"sums.attention_rows", 1e-6, [](const Context& c) { return detail::weight_sums(false, c); }});
  out.push_back({"sums.dcn_modulation", 1e-6, [](const Context& c) { return detail::weight_sums(true, c); }});
  out.push_back({"accounting.mac_formulas", 0.0, detail::mac_formulas});
  out.push_back({"accounting.param_rows", 0.0, detail::param_enumeration});
  out.push_back({"erf.identity", 1e-12, detail::erf_identity});
  out.push_back({"erf.ones3x3", 1e-12, detail::erf_ones3x3});
  return out;
}

inline std::vector<std::string> check_names() {
  std::vector<std::string> n;
  for (const auto& c : battery()) n.push_back(c.name);
  return n;
}

inline Result run_check(const Check& chk, const Options& o) {
  const Context ctx{o.oracle_seeds, o.grad_seeds, o.perturb && *o.perturb == chk.name ? o.eps : 0.0f};
  double dev;
  try {
    dev = chk.run(ctx);
  } catch (const std::exception&) {
    dev = INFINITY;
  }
  return {chk.name, dev, chk.tolerance, dev <= chk.tolerance};
}

inline std::vector<Result> run(const Options& o) {
  std::vector<Result> out;
  for (const auto& c : battery()) out.push_back(run_check(c, o));
  return out;
}

inline bool all_pass(const std::vector<Result>& r) {
  for (const auto& x : r)
    if (!x.pass) return false;
  return true;
}

// Fixed-width text with deviations in %.3e: identical across runs.
inline void write_report(std::ostream& os, const std::vector<Result>& rs) {
  std::size_t passed = 0;
  char line[160];
  for (const auto& r : rs) {
    passed += r.pass;
    std::snprintf(line, sizeof line, "%s  %-30s max_dev=%.3e  tol=%.1e\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                  r.deviation, r.tolerance);
    os << line;
  }
  os << passed << "/" << rs.size() << " checks passed\n";
  for (const auto& r : rs)
    if (!r.pass) os << "failed: " << r.name << '\n';
}

}  // namespace stm::selftest
