#pragma once

// Reverse-mode vs central finite differences for a scalar probe <s, f(x)>
// with a random seed s. With a double-precision reference the differences
// are taken on the reference instead of on f, which keeps float round-off
// (roughly eps * |f| / step) out of the numeric gradient.

#include <cstdint>

#include "stm/autodiff.hpp"
#include "stm/mixers.hpp"
#include "stm/testing/oracles.hpp"

namespace stm::oracle {

struct GradCheck {
  double rel_error = 0.0;
  Tensor analytic;
  Tensor numeric;
};

// Reverse mode through `f`, differences through `g`; normally the same
// function, but a check can be pointed at a deliberately different one.
template <class F, class G>
GradCheck gradient_check_against(F&& f, G&& g, const Tensor& x, std::uint64_t seed, float step = 1e-3f) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var y = f(xv);
  Rng rng(seed ^ 0x5eedULL);
  const Tensor s = rng.uniform(y.shape(), -1.0f, 1.0f);
  GradCheck r;
  r.analytic = tape.vjp(y, s, xv);
  r.numeric = finite_difference(
      [&](const Tensor& xp) {
        const Tensor yp = g(xp);
        double acc = 0;
        for (std::size_t i = 0; i < yp.numel(); ++i) acc += static_cast<double>(s[i]) * yp[i];
        return acc;
      },
      x, step);
  r.rel_error = relative_error(r.analytic, r.numeric);
  return r;
}

// `f` must be callable with both Tensor and Var (a generic lambda).
template <class F>
GradCheck gradient_check(F&& f, const Tensor& x, std::uint64_t seed, float step = 1e-3f) {
  return gradient_check_against(f, f, x, seed, step);
}

// `ref` maps a Buf shaped like x to a Buf shaped like f(x).
template <class F, class R>
GradCheck gradient_check(F&& f, R&& ref, const Tensor& x, std::uint64_t seed, double step = 1e-3) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var y = f(xv);
  Rng rng(seed ^ 0x5eedULL);
  const Tensor s = rng.uniform(y.shape(), -1.0f, 1.0f);
  GradCheck r;
  r.analytic = tape.vjp(y, s, xv);
  r.numeric = finite_difference(
                  [&](const Buf& xp) {
                    const Buf yp = ref(xp);
                    double acc = 0;
                    for (std::size_t i = 0; i < yp.v.size(); ++i) acc += static_cast<double>(s[i]) * yp.v[i];
                    return acc;
                  },
                  Buf(x), step)
                  .tensor();
  r.rel_error = relative_error(r.analytic, r.numeric);
  return r;
}

}  // namespace stm::oracle
