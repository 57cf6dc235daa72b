#pragma once

// JSON run configuration. Top-level keys (all optional):
//
//   preset            "<scale>-<stm>" starting point, e.g. "tiny-halo"
//   stm               halo | swin | pvt | dwconv | dcnv3
//   halo_variant      standard | switch | 1px | shift
//   halo_switch_mode  zero_halo | skip_read
//   variant           A | B | C | D | E
//   depths, widths, heads, window, halo, sr_ratios, dcn_groups
//                     4-element arrays (window/halo also accept one number)
//   offset_scale, mlp_ratio, layer_scale_init, num_classes, input_size,
//   in_channels, drop_path
//   normalization     { "mean": [3], "std": [3] }
//   probe             { "kind": "conv_stack", "layers": n, "kernel": k,
//                       "channels": c, "weights": "ones" | "random" }
//
// Unknown keys are errors.

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "stm/erf.hpp"
#include "stm/image_io.hpp"
#include "stm/model.hpp"

namespace stm {

struct ProbeConfig {
  std::size_t layers = 1;
  std::size_t kernel = 3;
  std::size_t channels = 3;
  bool random_weights = false;
};

struct RunSetup {
  std::optional<ModelConfig> model;
  std::optional<ProbeConfig> probe;
  Normalization norm;
};

inline StmKind parse_stm(std::string_view s) {
  for (auto k : kAllStms)
    if (name_of(k) == s) return k;
  throw ConfigError("unknown stm '" + std::string(s) + "' (expected halo, swin, pvt, dwconv or dcnv3)");
}

inline HaloVariant parse_halo_variant(std::string_view s) {
  for (auto v : {HaloVariant::Standard, HaloVariant::Switch, HaloVariant::OnePixel, HaloVariant::ShiftedQuery})
    if (name_of(v) == s) return v;
  throw ConfigError("unknown halo_variant '" + std::string(s) + "'");
}

inline Variant parse_variant(std::string_view s) {
  if (s.size() == 1 && s[0] >= 'A' && s[0] <= 'E') return static_cast<Variant>(s[0] - 'A');
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected A-E)");
}

namespace detail {

using Json = nlohmann::json;

inline void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.contains(k)) throw ConfigError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
}

inline std::size_t as_count(const Json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

inline float as_float(const Json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return v.get<float>();
}

inline std::string as_string(const Json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

// Four per-stage values; a scalar is broadcast when `scalar_ok`.
inline std::array<std::size_t, 4> stage_values(const Json& v, const std::string& key, bool scalar_ok) {
  std::array<std::size_t, 4> out{};
  if (scalar_ok && v.is_number_integer()) {
    out.fill(as_count(v, key));
    return out;
  }
  if (!v.is_array() || v.size() != 4) throw ConfigError("config key '" + key + "' must be an array of 4 integers");
  for (std::size_t i = 0; i < 4; ++i) out[i] = as_count(v[i], key);
  return out;
}

}  // namespace detail

inline RunSetup parse_config(const nlohmann::json& j) {
  using detail::as_count;
  using detail::as_float;
  using detail::as_string;
  detail::check_keys(j,
                     {"preset", "stm", "halo_variant", "halo_switch_mode", "variant", "depths", "widths", "heads",
                      "window", "halo", "sr_ratios", "dcn_groups", "offset_scale", "mlp_ratio", "layer_scale_init",
                      "num_classes", "input_size", "in_channels", "drop_path", "normalization", "probe"},
                     "");
  RunSetup run;
  if (j.contains("normalization")) {
    const auto& n = j["normalization"];
    detail::check_keys(n, {"mean", "std"}, "normalization");
    for (const char* key : {"mean", "std"}) {
      if (!n.contains(key)) continue;
      const auto& a = n[key];
      if (!a.is_array() || a.size() != 3) throw ConfigError(std::string("normalization.") + key + " must have 3 numbers");
      auto& dst = std::string(key) == "mean" ? run.norm.mean : run.norm.std;
      for (std::size_t i = 0; i < 3; ++i) dst[i] = as_float(a[i], std::string("normalization.") + key);
    }
    for (float s : run.norm.std)
      if (!(s > 0.0f)) throw ConfigError("normalization.std entries must be positive");
  }
  if (j.contains("probe")) {
    const auto& p = j["probe"];
    detail::check_keys(p, {"kind", "layers", "kernel", "channels", "weights"}, "probe");
    if (!p.contains("kind") || as_string(p["kind"], "probe.kind") != "conv_stack")
      throw ConfigError("probe.kind must be \"conv_stack\"");
    ProbeConfig pc;
    if (p.contains("layers")) pc.layers = as_count(p["layers"], "probe.layers");
    if (p.contains("kernel")) pc.kernel = as_count(p["kernel"], "probe.kernel");
    if (p.contains("channels")) pc.channels = as_count(p["channels"], "probe.channels");
    if (p.contains("weights")) {
      const auto w = as_string(p["weights"], "probe.weights");
      if (w != "ones" && w != "random") throw ConfigError("probe.weights must be \"ones\" or \"random\"");
      pc.random_weights = w == "random";
    }
    if (pc.kernel % 2 == 0 || pc.channels == 0) throw ConfigError("probe.kernel must be odd and probe.channels positive");
    run.probe = pc;
    for (const auto& [k, v] : j.items())
      if (k != "probe" && k != "normalization")
        throw ConfigError("config key '" + k + "' cannot be combined with a probe");
    return run;
  }

  ModelConfig cfg = preset(StmKind::DWConv, Scale::Micro);
  if (j.contains("preset")) cfg = preset_by_name(as_string(j["preset"], "preset"));
  if (j.contains("stm")) {
    const auto k = parse_stm(as_string(j["stm"], "stm"));
    if (!j.contains("preset")) {
      // Start from the micro shape of that mixer.
      cfg = preset(k, Scale::Micro);
    }
    cfg.stm = k;
  }
  if (j.contains("halo_variant")) cfg.halo_variant = parse_halo_variant(as_string(j["halo_variant"], "halo_variant"));
  if (j.contains("halo_switch_mode")) {
    const auto m = as_string(j["halo_switch_mode"], "halo_switch_mode");
    if (m == "zero_halo")
      cfg.switch_mode = SwitchMode::ZeroHalo;
    else if (m == "skip_read")
      cfg.switch_mode = SwitchMode::SkipRead;
    else
      throw ConfigError("halo_switch_mode must be \"zero_halo\" or \"skip_read\"");
  }
  if (j.contains("variant")) cfg.variant = parse_variant(as_string(j["variant"], "variant"));

  if (j.contains("depths")) {
    const auto d = detail::stage_values(j["depths"], "depths", false);
    for (std::size_t s = 0; s < 4; ++s) cfg.stages[s].depth = d[s];
  }
  if (j.contains("widths")) {
    const auto w = detail::stage_values(j["widths"], "widths", false);
    for (std::size_t s = 0; s < 4; ++s) {
      cfg.stages[s].width = w[s];
      // Derived defaults; explicit heads/dcn_groups below override them.
      cfg.stages[s].heads = std::max<std::size_t>(1, w[s] / 32);
      cfg.stages[s].dcn_groups = std::max<std::size_t>(1, w[s] / 16);
    }
  }
  const auto per_stage = [&](const char* key, bool scalar_ok, std::size_t StageConfig::* field) {
    if (!j.contains(key)) return;
    const auto v = detail::stage_values(j[key], key, scalar_ok);
    for (std::size_t s = 0; s < 4; ++s) cfg.stages[s].*field = v[s];
  };
  per_stage("heads", false, &StageConfig::heads);
  per_stage("window", true, &StageConfig::window);
  per_stage("halo", true, &StageConfig::halo);
  per_stage("sr_ratios", false, &StageConfig::sr_ratio);
  per_stage("dcn_groups", false, &StageConfig::dcn_groups);
  if (j.contains("offset_scale")) cfg.offset_scale = as_float(j["offset_scale"], "offset_scale");
  if (j.contains("mlp_ratio")) cfg.mlp_ratio = as_count(j["mlp_ratio"], "mlp_ratio");
  if (j.contains("layer_scale_init")) cfg.layer_scale_init = as_float(j["layer_scale_init"], "layer_scale_init");
  if (j.contains("num_classes")) cfg.num_classes = as_count(j["num_classes"], "num_classes");
  if (j.contains("input_size")) cfg.input_size = as_count(j["input_size"], "input_size");
  if (j.contains("in_channels")) cfg.in_channels = as_count(j["in_channels"], "in_channels");
  if (j.contains("drop_path")) cfg.drop_path = as_float(j["drop_path"], "drop_path");
  if (j.contains("preset") || j.contains("stm")) {
    cfg.name = j.contains("preset") ? j["preset"].get<std::string>() : std::string(name_of(cfg.stm));
  }
  validate(cfg);
  run.model = cfg;
  return run;
}

inline RunSetup parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline RunSetup load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

inline ConvStack make_conv_stack(const ProbeConfig& p, std::uint64_t seed) {
  return p.random_weights ? ConvStack::random(p.channels, p.layers, p.kernel, seed)
                          : ConvStack::ones(p.channels, p.layers, p.kernel);
}

}  // namespace stm
