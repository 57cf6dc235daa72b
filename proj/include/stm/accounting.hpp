#pragma once

// Parameter and multiply-accumulate accounting. One MAC = one multiply-add;
// normalisation, activation and softmax costs are not counted.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "stm/model.hpp"

namespace stm {

struct CostRow {
  std::string module;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::vector<CostRow> rows;

  std::uint64_t total_params() const {
    std::uint64_t n = 0;
    for (const auto& r : rows) n += r.params;
    return n;
  }
  std::uint64_t total_macs() const {
    std::uint64_t n = 0;
    for (const auto& r : rows) n += r.macs;
    return n;
  }
};

namespace macs {

inline std::uint64_t linear(std::uint64_t tokens, std::uint64_t in, std::uint64_t out) {
  return tokens * in * out;
}

inline std::uint64_t conv(std::uint64_t out_h, std::uint64_t out_w, std::uint64_t in_c,
                          std::uint64_t out_c, std::uint64_t k) {
  return out_h * out_w * out_c * in_c * k * k;
}

inline std::uint64_t depthwise(std::uint64_t out_h, std::uint64_t out_w, std::uint64_t c,
                               std::uint64_t k) {
  return out_h * out_w * c * k * k;
}

// Logits plus aggregation: 2 * Tq * Tk * C, summed over independent groups.
inline std::uint64_t attention(std::uint64_t groups, std::uint64_t tq, std::uint64_t tk,
                               std::uint64_t c) {
  return 2 * groups * tq * tk * c;
}

}  // namespace macs

// MACs of one mixer applied to a C x H x W map.
inline std::uint64_t mixer_macs(const Mixer& m, std::uint64_t c, std::uint64_t h, std::uint64_t w) {
  const auto& p = m.params;
  const std::uint64_t t = h * w;
  switch (m.kind) {
    case StmKind::HaloAttn: {
      const std::uint64_t b = p.window, kw = p.key_window();
      const std::uint64_t blocks = ((h + b - 1) / b) * ((w + b - 1) / b);
      return macs::linear(t, c, 3 * c) + macs::linear(t, c, c) + macs::attention(blocks, b * b, kw * kw, c);
    }
    case StmKind::SWAttn: {
      const std::uint64_t b = p.window;
      const std::uint64_t windows = ((h + b - 1) / b) * ((w + b - 1) / b);
      return macs::linear(t, c, 3 * c) + macs::linear(t, c, c) + macs::attention(windows, b * b, b * b, c);
    }
    case StmKind::SRAttn: {
      const std::uint64_t sr = p.sr_ratio;
      const std::uint64_t hr = h / sr, wr = w / sr, tr = hr * wr;
      std::uint64_t n = macs::linear(t, c, c) + macs::linear(tr, c, 2 * c) + macs::linear(t, c, c) +
                        macs::attention(1, t, tr, c);
      if (sr > 1) n += macs::conv(hr, wr, c, c, sr);
      return n;
    }
    case StmKind::DWConv: {
      const auto& wt = std::get<DwConvWeights>(m.weights);
      std::uint64_t n = macs::depthwise(h, w, c, p.dw_kernel);
      if (wt.in_proj) n += macs::linear(t, c, c);
      if (wt.out_proj) n += macs::linear(t, c, c);
      return n;
    }
    case StmKind::DCNv3: {
      const std::uint64_t gk = p.dcn_groups * p.dcn_points;
      return macs::linear(t, c, c) + macs::depthwise(h, w, c, 3) + macs::linear(t, c, 2 * gk) +
             macs::linear(t, c, gk) + t * p.dcn_points * c + macs::linear(t, c, c);
    }
  }
  return 0;
}

namespace detail {

template <class S>
std::uint64_t count_tensors(const S& visit) {
  std::uint64_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

}  // namespace detail

// Per-module parameters and MACs at a square input of side `input_size`.
// Rows: stem, one per block, stage norms, transitions, head.
inline CostReport cost_report(const Model& m, std::size_t input_size) {
  if (input_size == 0 || input_size % 32 != 0)
    throw ShapeError("accounting: input size " + std::to_string(input_size) +
                     " must be a positive multiple of 32");
  const auto& cfg = m.config;
  CostReport r;

  const std::uint64_t half = input_size / 2, quarter = input_size / 4;
  const std::uint64_t c0 = cfg.stages[0].width;
  r.rows.push_back({"stem",
                    detail::count_tensors([&](auto&& f) {
                      visit_conv(m.stem.conv1, "", f);
                      visit_norm(m.stem.norm1, "", f);
                      visit_conv(m.stem.conv2, "", f);
                      visit_norm(m.stem.norm2, "", f);
                    }),
                    macs::conv(half, half, cfg.in_channels, c0 / 2, 3) +
                        macs::conv(quarter, quarter, c0 / 2, c0, 3)});

  for (std::size_t s = 0; s < 4; ++s) {
    const std::uint64_t side = input_size / (4u << s);
    const std::uint64_t c = cfg.stages[s].width, t = side * side;
    const std::string sp = "stages." + std::to_string(s);
    if (s > 0) {
      const auto& tr = m.transitions[s - 1];
      r.rows.push_back({"transitions." + std::to_string(s - 1),
                        detail::count_tensors([&](auto&& f) { visit_conv(tr, "", f); }),
                        macs::conv(side, side, cfg.stages[s - 1].width, c, 3)});
    }
    for (std::size_t i = 0; i < m.stages[s].blocks.size(); ++i) {
      const auto& b = m.stages[s].blocks[i];
      const std::uint64_t hidden = b.fc1.weight.dim(1);
      r.rows.push_back({sp + ".blocks." + std::to_string(i),
                        detail::count_tensors([&](auto&& f) { visit_block(b, "", f); }),
                        mixer_macs(b.mixer, c, side, side) + macs::linear(t, c, hidden) +
                            macs::linear(t, hidden, c)});
    }
    if (m.stages[s].norm)
      r.rows.push_back({sp + ".norm", detail::count_tensors([&](auto&& f) { visit_norm(*m.stages[s].norm, "", f); }),
                        0});
  }
  r.rows.push_back({"head",
                    detail::count_tensors([&](auto&& f) {
                      visit_norm(m.head_norm, "", f);
                      visit_linear(m.head, "", f);
                    }),
                    macs::linear(1, cfg.stages[3].width, cfg.num_classes)});
  return r;
}

// Parameters only (input-size independent).
inline CostReport count_params(const Model& m) {
  CostReport r = cost_report(m, 32);
  for (auto& row : r.rows) row.macs = 0;
  return r;
}

inline CostReport count_macs(const Model& m, std::size_t input_size) { return cost_report(m, input_size); }

// module,params,macs
inline void write_cost_csv(std::ostream& os, const CostReport& r) {
  os << "module,params,macs\n";
  for (const auto& row : r.rows) os << row.module << ',' << row.params << ',' << row.macs << '\n';
  os << "total," << r.total_params() << ',' << r.total_macs() << '\n';
}

}  // namespace stm
