#pragma once

// Unified four-stage backbone: overlapped 3x3/stride-2 stem and transitions,
// transformer-style blocks hosting any spatial token mixer, pooled classifier.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stm/autodiff.hpp"
#include "stm/mixers.hpp"
#include "stm/tensor.hpp"

namespace stm {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A: unified. B: head LN after pooling. C: B without stage LN.
// D: A with ConvNeXt-style blocks. E: ConvNeXt-style blocks, C-style stages.
enum class Variant { A, B, C, D, E };

inline char name_of(Variant v) { return static_cast<char>('A' + static_cast<int>(v)); }

inline bool has_stage_norm(Variant v) { return v == Variant::A || v == Variant::B || v == Variant::D; }
inline bool head_norm_before_pool(Variant v) { return v == Variant::A || v == Variant::D; }
inline bool convnext_blocks(Variant v) { return v == Variant::D || v == Variant::E; }

struct StageConfig {
  std::size_t depth = 2;
  std::size_t width = 64;
  std::size_t heads = 2;
  std::size_t window = 7;
  std::size_t halo = 3;
  std::size_t sr_ratio = 1;
  std::size_t dcn_groups = 4;
};

struct ModelConfig {
  std::string name = "custom";
  StmKind stm = StmKind::DWConv;
  HaloVariant halo_variant = HaloVariant::Standard;
  SwitchMode switch_mode = SwitchMode::ZeroHalo;
  std::array<StageConfig, 4> stages{};
  Variant variant = Variant::A;
  std::size_t mlp_ratio = 4;
  float layer_scale_init = 1e-6f;
  float offset_scale = 1.0f;
  float drop_path = 0.0f;  // recorded only; inference has no stochastic depth
  std::size_t num_classes = 1000;
  std::size_t input_size = 224;
  std::size_t in_channels = 3;
};

inline void validate(const ModelConfig& cfg) {
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[s];
    const std::string where = "stage " + std::to_string(s) + ": ";
    if (st.depth == 0) throw ConfigError(where + "depth must be positive");
    if (st.width == 0 || st.width % 2 != 0) throw ConfigError(where + "width must be positive and even");
    if (st.heads == 0 || st.width % st.heads != 0)
      throw ConfigError(where + "width " + std::to_string(st.width) + " not divisible by heads " +
                        std::to_string(st.heads));
    if (cfg.stm == StmKind::DCNv3 && (st.dcn_groups == 0 || st.width % st.dcn_groups != 0))
      throw ConfigError(where + "width not divisible by dcn_groups");
    if ((cfg.stm == StmKind::HaloAttn || cfg.stm == StmKind::SWAttn) && st.window == 0)
      throw ConfigError(where + "window must be positive");
    if (cfg.stm == StmKind::SRAttn && st.sr_ratio == 0) throw ConfigError(where + "sr_ratio must be >= 1");
  }
  if (cfg.mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  if (cfg.num_classes == 0) throw ConfigError("num_classes must be positive");
  if (cfg.in_channels == 0) throw ConfigError("in_channels must be positive");
  if (cfg.input_size == 0 || cfg.input_size % 32 != 0)
    throw ConfigError("input_size must be a positive multiple of 32");
  if (cfg.stm != StmKind::HaloAttn && cfg.halo_variant != HaloVariant::Standard)
    throw ConfigError("halo_variant only applies to halo attention");
}

// Mixer parameters for block `index` of stage `s`.
inline StmParams block_params(const ModelConfig& cfg, std::size_t s, std::size_t index) {
  const auto& st = cfg.stages[s];
  StmParams p;
  p.heads = st.heads;
  p.window = st.window;
  p.halo = st.halo;
  p.sr_ratio = st.sr_ratio;
  p.dcn_groups = st.dcn_groups;
  p.offset_scale = cfg.offset_scale;
  p.dw_projections = !convnext_blocks(cfg.variant);
  if (cfg.stm == StmKind::SWAttn) p.shifted = index % 2 == 1;
  if (cfg.stm == StmKind::HaloAttn) {
    switch (cfg.halo_variant) {
      case HaloVariant::Standard: break;
      case HaloVariant::Switch:
        if (index % 2 == 1) {
          if (cfg.switch_mode == SwitchMode::ZeroHalo)
            p.halo = 0;
          else
            p.read_halo = false;
        }
        break;
      case HaloVariant::OnePixel: p.halo = 1; break;
      case HaloVariant::ShiftedQuery: p.anchor = QueryAnchor::TopLeft; break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

enum class Scale { Micro, Tiny, Small, Base };

inline std::string_view name_of(Scale s) {
  switch (s) {
    case Scale::Micro: return "micro";
    case Scale::Tiny: return "tiny";
    case Scale::Small: return "small";
    case Scale::Base: return "base";
  }
  return "?";
}

inline constexpr std::array<StmKind, 5> kAllStms = {StmKind::HaloAttn, StmKind::SRAttn, StmKind::SWAttn,
                                                    StmKind::DWConv, StmKind::DCNv3};
inline constexpr std::array<Scale, 4> kAllScales = {Scale::Micro, Scale::Tiny, Scale::Small, Scale::Base};

// Stage-0 width and per-stage depths; widths double per stage. Attention
// heads use 32 channels each, DCNv3 groups 16 channels each.
struct PresetShape {
  std::size_t base_width;
  std::array<std::size_t, 4> depths;
};

inline PresetShape preset_shape(StmKind stm, Scale scale) {
  const auto i = static_cast<std::size_t>(scale);
  switch (stm) {
    case StmKind::HaloAttn: {
      static constexpr std::array<PresetShape, 4> t = {{{32, {1, 2, 6, 3}},
                                                         {96, {1, 1, 7, 2}},
                                                         {128, {2, 2, 6, 2}},
                                                         {160, {2, 2, 8, 2}}}};
      return t[i];
    }
    case StmKind::SRAttn: {
      static constexpr std::array<PresetShape, 4> t = {{{32, {3, 3, 3, 3}},
                                                         {64, {2, 2, 23, 1}},
                                                         {96, {2, 2, 15, 1}},
                                                         {96, {3, 3, 26, 3}}}};
      return t[i];
    }
    case StmKind::SWAttn: {
      static constexpr std::array<PresetShape, 4> t = {{{32, {3, 3, 6, 3}},
                                                         {96, {2, 2, 6, 2}},
                                                         {96, {2, 2, 18, 2}},
                                                         {128, {2, 2, 18, 2}}}};
      return t[i];
    }
    case StmKind::DWConv: {
      static constexpr std::array<PresetShape, 4> t = {{{32, {4, 4, 5, 4}},
                                                         {96, {3, 3, 6, 3}},
                                                         {96, {3, 3, 21, 3}},
                                                         {128, {3, 3, 21, 3}}}};
      return t[i];
    }
    case StmKind::DCNv3: {
      static constexpr std::array<PresetShape, 4> t = {{{32, {3, 3, 6, 3}},
                                                         {64, {4, 4, 18, 4}},
                                                         {96, {3, 3, 14, 3}},
                                                         {128, {3, 3, 16, 3}}}};
      return t[i];
    }
  }
  throw ConfigError("unknown stm");
}

inline std::string preset_name(StmKind stm, Scale scale) {
  return std::string(name_of(scale)) + "-" + std::string(name_of(stm));
}

inline ModelConfig preset(StmKind stm, Scale scale) {
  const auto shape = preset_shape(stm, scale);
  static constexpr std::array<std::size_t, 4> kSrRatios = {8, 4, 2, 1};
  ModelConfig cfg;
  cfg.name = preset_name(stm, scale);
  cfg.stm = stm;
  for (std::size_t s = 0; s < 4; ++s) {
    auto& st = cfg.stages[s];
    st.depth = shape.depths[s];
    st.width = shape.base_width << s;
    st.heads = st.width / 32;
    st.window = 7;
    st.halo = 3;
    st.sr_ratio = kSrRatios[s];
    st.dcn_groups = st.width / 16;
  }
  return cfg;
}

struct PresetEntry {
  std::string name;
  StmKind stm;
  Scale scale;
};

inline std::vector<PresetEntry> all_presets() {
  std::vector<PresetEntry> out;
  for (auto stm : kAllStms)
    for (auto scale : kAllScales) out.push_back({preset_name(stm, scale), stm, scale});
  return out;
}

// "<scale>-<stm>" or "<scale>-halo-<switch|1px|shift>".
inline ModelConfig preset_by_name(std::string_view name) {
  for (const auto& e : all_presets())
    if (e.name == name) return preset(e.stm, e.scale);
  for (auto scale : kAllScales)
    for (auto v : {HaloVariant::Switch, HaloVariant::OnePixel, HaloVariant::ShiftedQuery}) {
      const std::string n = preset_name(StmKind::HaloAttn, scale) + "-" + std::string(name_of(v));
      if (n == name) {
        auto cfg = preset(StmKind::HaloAttn, scale);
        cfg.halo_variant = v;
        cfg.name = n;
        return cfg;
      }
    }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Block {
  bool convnext_style = false;
  Norm norm1;  // pre-mixer LN (A-C) or post-mixer LN (D/E)
  Mixer mixer;
  Norm norm2;  // pre-MLP LN (A-C only)
  Linear fc1;
  Linear fc2;
  Tensor ls1;
  Tensor ls2;  // A-C only
};

struct Stem {
  Conv2d conv1;
  Norm norm1;
  Conv2d conv2;
  Norm norm2;
};

struct Stage {
  std::vector<Block> blocks;
  std::optional<Norm> norm;
};

struct Model {
  ModelConfig config;
  Stem stem;
  std::array<Stage, 4> stages;
  std::array<Conv2d, 3> transitions;
  Norm head_norm;
  Linear head;
};

template <class B, class F>
void visit_block(B& b, const std::string& prefix, F&& f) {
  if (!b.convnext_style) {
    visit_norm(b.norm1, prefix + ".norm1", f);
    visit_mixer(b.mixer, prefix + ".mixer", f);
    f(prefix + ".ls1", b.ls1);
    visit_norm(b.norm2, prefix + ".norm2", f);
    visit_linear(b.fc1, prefix + ".mlp.fc1", f);
    visit_linear(b.fc2, prefix + ".mlp.fc2", f);
    f(prefix + ".ls2", b.ls2);
  } else {
    visit_mixer(b.mixer, prefix + ".mixer", f);
    visit_norm(b.norm1, prefix + ".norm", f);
    visit_linear(b.fc1, prefix + ".mlp.fc1", f);
    visit_linear(b.fc2, prefix + ".mlp.fc2", f);
    f(prefix + ".ls", b.ls1);
  }
}

// Visits every weight tensor in the fixed checkpoint order.
template <class M, class F>
void visit_tensors(M& m, F&& f) {
  visit_conv(m.stem.conv1, "stem.conv1", f);
  visit_norm(m.stem.norm1, "stem.norm1", f);
  visit_conv(m.stem.conv2, "stem.conv2", f);
  visit_norm(m.stem.norm2, "stem.norm2", f);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string sp = "stages." + std::to_string(s);
    for (std::size_t i = 0; i < m.stages[s].blocks.size(); ++i)
      visit_block(m.stages[s].blocks[i], sp + ".blocks." + std::to_string(i), f);
    if (m.stages[s].norm) visit_norm(*m.stages[s].norm, sp + ".norm", f);
    if (s < 3) visit_conv(m.transitions[s], "transitions." + std::to_string(s), f);
  }
  visit_norm(m.head_norm, "head.norm", f);
  visit_linear(m.head, "head.fc", f);
}

namespace detail {

inline Model build_model(const ModelConfig& cfg, Rng rng) {
  validate(cfg);
  Model m;
  m.config = cfg;
  const std::size_t c0 = cfg.stages[0].width;
  m.stem.conv1 = make_conv(rng, cfg.in_channels, c0 / 2, 3, 2, 1);
  m.stem.norm1 = make_norm(c0 / 2);
  m.stem.conv2 = make_conv(rng, c0 / 2, c0, 3, 2, 1);
  m.stem.norm2 = make_norm(c0);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t c = cfg.stages[s].width;
    const std::size_t hidden = c * cfg.mlp_ratio;
    auto& stage = m.stages[s];
    for (std::size_t i = 0; i < cfg.stages[s].depth; ++i) {
      Block b;
      b.convnext_style = convnext_blocks(cfg.variant);
      if (!b.convnext_style) {
        b.norm1 = make_norm(c);
        b.mixer = make_mixer(cfg.stm, c, block_params(cfg, s, i), rng);
        b.ls1 = Tensor({c}, cfg.layer_scale_init);
        b.norm2 = make_norm(c);
        b.fc1 = make_linear(rng, c, hidden);
        b.fc2 = make_linear(rng, hidden, c);
        b.ls2 = Tensor({c}, cfg.layer_scale_init);
      } else {
        b.mixer = make_mixer(cfg.stm, c, block_params(cfg, s, i), rng);
        b.norm1 = make_norm(c);
        b.fc1 = make_linear(rng, c, hidden);
        b.fc2 = make_linear(rng, hidden, c);
        b.ls1 = Tensor({c}, cfg.layer_scale_init);
      }
      stage.blocks.push_back(std::move(b));
    }
    if (has_stage_norm(cfg.variant)) stage.norm = make_norm(c);
    if (s < 3) m.transitions[s] = make_conv(rng, c, cfg.stages[s + 1].width, 3, 2, 1);
  }
  const std::size_t c3 = cfg.stages[3].width;
  m.head_norm = make_norm(c3);
  m.head = make_linear(rng, c3, cfg.num_classes);
  return m;
}

}  // namespace detail

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) { return detail::build_model(cfg, Rng(seed)); }

// Same structure with zero-filled random weights; enough for accounting
// and as a target for loading a checkpoint.
inline Model build_skeleton(const ModelConfig& cfg) { return detail::build_model(cfg, Rng::zeros()); }

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <Value T>
T stem_forward(const Stem& stem, const T& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0)
    throw ShapeError("stem: input " + to_string(s) + " must be NCHW with extents divisible by 4");
  T h = conv2d(x, stem.conv1.weight, stem.conv1.bias, stem.conv1.stride, stem.conv1.pad);
  h = gelu(layer_norm_channels(h, stem.norm1.gamma, stem.norm1.beta));
  h = conv2d(h, stem.conv2.weight, stem.conv2.bias, stem.conv2.stride, stem.conv2.pad);
  return layer_norm_channels(h, stem.norm2.gamma, stem.norm2.beta);
}

namespace detail {
inline Tensor channel_scale(const Tensor& ls) { return ls.reshaped({ls.numel(), 1, 1}); }
}  // namespace detail

template <Value T>
T block_forward(const T& x, const Block& b, MixTrace* trace = nullptr) {
  if (!b.convnext_style) {
    T h = mix(b.mixer, layer_norm_channels(x, b.norm1.gamma, b.norm1.beta), trace);
    T y = add(x, mul_broadcast(h, detail::channel_scale(b.ls1)));
    T t = layer_norm(to_channels_last(y), b.norm2.gamma, b.norm2.beta);
    t = linear(gelu(linear(t, b.fc1.weight, b.fc1.bias)), b.fc2.weight, b.fc2.bias);
    return add(y, to_channels_first(mul_broadcast(t, b.ls2)));
  }
  T t = layer_norm(to_channels_last(mix(b.mixer, x, trace)), b.norm1.gamma, b.norm1.beta);
  t = linear(gelu(linear(t, b.fc1.weight, b.fc1.bias)), b.fc2.weight, b.fc2.bias);
  return add(x, to_channels_first(mul_broadcast(t, b.ls1)));
}

// Post-stage maps (after the optional stage LN, before the transition) for
// stages 0..last_stage.
template <Value T>
std::vector<T> forward_features(const Model& m, const T& x, std::size_t last_stage = 3) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != m.config.in_channels || s[2] % 32 != 0 || s[3] % 32 != 0)
    throw ShapeError("forward: input " + to_string(s) + " must be N x " +
                     std::to_string(m.config.in_channels) + " x H x W with H, W divisible by 32");
  if (last_stage > 3) throw ShapeError("forward: stage index out of range");
  std::vector<T> outs;
  T h = stem_forward(m.stem, x);
  for (std::size_t st = 0; st <= last_stage; ++st) {
    if (st > 0) {
      const auto& tr = m.transitions[st - 1];
      h = conv2d(h, tr.weight, tr.bias, tr.stride, tr.pad);
    }
    for (const auto& b : m.stages[st].blocks) h = block_forward(h, b);
    if (m.stages[st].norm) h = layer_norm_channels(h, m.stages[st].norm->gamma, m.stages[st].norm->beta);
    outs.push_back(h);
  }
  return outs;
}

// Pooled classifier head on the last stage map.
template <Value T>
T head_forward(const Model& m, const T& last) {
  T pooled = head_norm_before_pool(m.config.variant)
                 ? spatial_mean(layer_norm_channels(last, m.head_norm.gamma, m.head_norm.beta))
                 : layer_norm(spatial_mean(last), m.head_norm.gamma, m.head_norm.beta);
  return linear(pooled, m.head.weight, m.head.bias);
}

template <Value T>
T forward_classify(const Model& m, const T& x) {
  return head_forward(m, forward_features(m, x).back());
}

inline std::size_t parameter_count(const Model& m) {
  std::size_t n = 0;
  visit_tensors(m, [&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

}  // namespace stm
