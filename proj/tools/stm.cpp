// stm: describe, build/load, ERF, invariance and self-test front end.
// Exit codes: 0 success, 1 check failure, 2 usage or input error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stm/accounting.hpp"
#include "stm/checkpoint.hpp"
#include "stm/config.hpp"
#include "stm/erf.hpp"
#include "stm/image_io.hpp"
#include "stm/invariance.hpp"
#include "stm/selftest.hpp"

namespace fs = std::filesystem;
using namespace stm;

namespace {

constexpr int kOk = 0, kCheckFailed = 1, kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Args {
  std::string config, preset, checkpoint, images, stages, transform = "translate", out, perturb;
  std::uint64_t seed = 42;
  unsigned threads = 1;
  std::size_t noise = 0;
  bool all = false, digest = false, full = false, log_pgm = false;
};

void write_atomic(const fs::path& path, const std::function<void(std::ostream&)>& body, bool binary = false) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!os) throw UsageError("cannot write " + tmp.string());
    body(os);
    if (!os) throw UsageError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

RunSetup setup_of(const Args& a) {
  if (!a.config.empty() && !a.preset.empty()) throw UsageError("give --config or --preset, not both");
  if (!a.config.empty()) return load_config(a.config);
  RunSetup run;
  run.model = a.preset.empty() ? preset(StmKind::DWConv, Scale::Micro) : preset_by_name(a.preset);
  return run;
}

ModelConfig model_config(const RunSetup& run) {
  if (!run.model) throw UsageError("this command needs a model config, not a probe");
  return *run.model;
}

Model model_of(const Args& a, const ModelConfig& cfg) {
  return a.checkpoint.empty() ? build_model(cfg, a.seed) : load_checkpoint(a.checkpoint, cfg);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// FNV-1a over the raw float bytes.
std::string digest_of(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
  for (std::size_t i = 0; i < t.numel() * sizeof(float); ++i) h = (h ^ p[i]) * 1099511628211ULL;
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string logits_digest(const Model& m, std::uint64_t seed) {
  const auto& c = m.config;
  const Tensor img = noise_images(1, c.in_channels, c.input_size, seed, Normalization{})[0];
  return digest_of(forward_classify(m, img.reshaped({1, c.in_channels, c.input_size, c.input_size})));
}

std::vector<Tensor> images_of(const Args& a, std::size_t channels, std::size_t side, const Normalization& norm,
                              std::vector<std::size_t>* labels) {
  if (!a.images.empty() && a.noise > 0) throw UsageError("give --images or --noise, not both");
  if (a.noise > 0) return noise_images(a.noise, channels, side, a.seed, norm);
  if (a.images.empty()) throw UsageError("need --images DIR or --noise N");
  auto set = load_image_dir(a.images, channels, side, norm);
  if (labels) *labels = set.labels;
  return set.images;
}

// ---------------------------------------------------------------------------

void describe_one(const ModelConfig& cfg, std::ostream& os) {
  const Model m = build_skeleton(cfg);
  const CostReport r = count_macs(m, 224);
  os << "model " << cfg.name << "  stm=" << name_of(cfg.stm) << "  variant=" << name_of(cfg.variant);
  if (cfg.stm == StmKind::HaloAttn) os << "  halo_variant=" << name_of(cfg.halo_variant);
  os << "\n  stem     " << cfg.in_channels << "x224x224 -> " << cfg.stages[0].width << "x56x56\n";
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[s];
    const std::size_t side = 224 / (4u << s);
    os << "  stage " << s << "  " << st.width << "x" << side << "x" << side << "  depth=" << st.depth;
    switch (cfg.stm) {
      case StmKind::HaloAttn: os << " heads=" << st.heads << " block=" << st.window << " halo=" << st.halo; break;
      case StmKind::SWAttn: os << " heads=" << st.heads << " window=" << st.window; break;
      case StmKind::SRAttn: os << " heads=" << st.heads << " sr=" << st.sr_ratio; break;
      case StmKind::DWConv: os << " kernel=7"; break;
      case StmKind::DCNv3: os << " groups=" << st.dcn_groups; break;
    }
    os << '\n';
  }
  os << "  head     " << cfg.stages[3].width << " -> " << cfg.num_classes << '\n';
  os << "  #Params " << fmt("%.2fM", r.total_params() / 1e6) << "   FLOPs " << fmt("%.3fG", r.total_macs() / 1e9)
     << " (multiply-accumulates at 224x224)\n";
}

int cmd_describe(const Args& a) {
  if (a.all) {
    if (!a.config.empty() || !a.preset.empty()) throw UsageError("--all takes no --config or --preset");
    std::ostringstream csv;
    csv << "preset,stm,scale,variant,params,macs\n";
    std::printf("%-14s %-7s %-6s %10s %10s\n", "preset", "stm", "scale", "#Params", "FLOPs");
    for (const auto& e : all_presets()) {
      const ModelConfig cfg = preset(e.stm, e.scale);
      const CostReport r = count_macs(build_skeleton(cfg), 224);
      std::printf("%-14s %-7s %-6s %9.2fM %9.3fG\n", e.name.c_str(), std::string(name_of(e.stm)).c_str(),
                  std::string(name_of(e.scale)).c_str(), r.total_params() / 1e6, r.total_macs() / 1e9);
      csv << e.name << ',' << name_of(e.stm) << ',' << name_of(e.scale) << ',' << name_of(cfg.variant) << ','
          << r.total_params() << ',' << r.total_macs() << '\n';
    }
    if (!a.out.empty()) write_atomic(a.out, [&](std::ostream& os) { os << csv.str(); });
    return kOk;
  }
  const ModelConfig cfg = model_config(setup_of(a));
  describe_one(cfg, std::cout);
  if (!a.out.empty())
    write_atomic(a.out, [&](std::ostream& os) { write_cost_csv(os, count_macs(build_skeleton(cfg), 224)); });
  return kOk;
}

int cmd_build(const Args& a) {
  if (a.out.empty()) throw UsageError("build needs --out CHECKPOINT");
  const ModelConfig cfg = model_config(setup_of(a));
  const Model m = build_model(cfg, a.seed);
  save_checkpoint(a.out, m);
  std::cout << "wrote " << a.out << "  tensors=" << named_tensors(m).size() << "  params=" << parameter_count(m)
            << '\n';
  if (a.digest) std::cout << "logits_digest=" << logits_digest(m, a.seed) << '\n';
  return kOk;
}

int cmd_load(const Args& a) {
  if (a.checkpoint.empty()) throw UsageError("load needs --checkpoint FILE");
  const ModelConfig cfg = model_config(setup_of(a));
  const Model m = load_checkpoint(a.checkpoint, cfg);
  std::cout << "loaded " << a.checkpoint << "  tensors=" << named_tensors(m).size()
            << "  params=" << parameter_count(m) << '\n';
  if (a.digest) std::cout << "logits_digest=" << logits_digest(m, a.seed) << '\n';
  return kOk;
}

std::vector<std::size_t> parse_stages(const std::string& s, std::size_t num_stages) {
  std::vector<std::size_t> out;
  if (s.empty()) {
    for (std::size_t i = 0; i < num_stages; ++i) out.push_back(i);
    return out;
  }
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != tok.size()) throw UsageError("bad --stages entry '" + tok + "'");
    if (v >= num_stages) throw UsageError("stage " + tok + " out of range (model has " + std::to_string(num_stages) + ")");
    out.push_back(v);
  }
  return out;
}

int cmd_erf(const Args& a) {
  const RunSetup run = setup_of(a);
  std::optional<Model> model;
  std::optional<ConvStack> stack;
  FeatureProbe probe;
  std::size_t side;
  if (run.probe) {
    stack = make_conv_stack(*run.probe, a.seed);
    probe = feature_probe(*stack);
    side = 224;
  } else {
    model = model_of(a, *run.model);
    probe = feature_probe(*model);
    side = run.model->input_size;
  }
  const auto stages = parse_stages(a.stages, probe.num_stages);
  const auto images = images_of(a, probe.in_channels, side, run.norm, nullptr);
  const auto reports = erf_suite(probe, images, stages);
  for (const auto& r : reports) std::cout << "stage " << r.stage << "  ERF@50 " << fmt("%.4f", r.erf50) << '\n';
  if (!a.out.empty()) {
    const fs::path dir = a.out;
    write_atomic(dir / "erf.csv", [&](std::ostream& os) { write_erf_csv(os, reports); });
    for (const auto& r : reports)
      write_atomic(dir / ("stage" + std::to_string(r.stage) + ".pgm"),
                   [&](std::ostream& os) { write_pgm(os, r.map, a.log_pgm); }, true);
  }
  return kOk;
}

int cmd_invariance(const Args& a) {
  const RunSetup run = setup_of(a);
  const ModelConfig cfg = model_config(run);
  const Model m = model_of(a, cfg);
  std::vector<std::size_t> labels;
  const auto images = images_of(a, cfg.in_channels, cfg.input_size, run.norm, &labels);
  std::vector<TransformKind> kinds;
  if (a.transform == "all")
    kinds = {TransformKind::Translate, TransformKind::Rotate, TransformKind::Scale};
  else
    kinds = {parse_transform(a.transform)};
  std::ostringstream csv;
  bool header = true;
  for (auto k : kinds) {
    const auto rep = consistency_sweep(classifier_of(m), images, labels.empty() ? nullptr : &labels, default_spec(k));
    write_invariance_csv(csv, rep, header);
    header = false;
  }
  std::cout << csv.str();
  if (!a.out.empty()) write_atomic(a.out, [&](std::ostream& os) { os << csv.str(); });
  return kOk;
}

int cmd_selftest(const Args& a) {
  selftest::Options o;
  if (a.full) {
    o.oracle_seeds = 20;
    o.grad_seeds = 10;
  }
  if (!a.perturb.empty()) {
    const auto names = selftest::check_names();
    if (std::find(names.begin(), names.end(), a.perturb) == names.end())
      throw UsageError("unknown check '" + a.perturb + "' for --perturb");
    o.perturb = a.perturb;
  }
  const auto results = selftest::run(o);
  std::ostringstream rep;
  selftest::write_report(rep, results);
  std::cout << rep.str();
  if (!a.out.empty()) write_atomic(a.out, [&](std::ostream& os) { os << rep.str(); });
  return selftest::all_pass(results) ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial token mixer toolkit: describe, build, ERF, invariance, selftest"};
  app.require_subcommand(1);
  Args a;

  const auto model_opts = [&](CLI::App* c) {
    c->add_option("--config", a.config, "JSON run configuration")->check(CLI::ExistingFile);
    c->add_option("--preset", a.preset, "preset name, e.g. tiny-halo or small-halo-switch");
    c->add_option("--seed", a.seed, "initialisation / noise seed")->capture_default_str();
    c->add_option("--threads", a.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  };

  auto* describe = app.add_subcommand("describe", "shape trace, #Params and FLOPs (MACs) at 224x224");
  model_opts(describe);
  describe->add_flag("--all", a.all, "all 20 presets");
  describe->add_option("--out", a.out, "CSV output");

  auto* build = app.add_subcommand("build", "initialise a model and write a checkpoint");
  model_opts(build);
  build->add_option("--out", a.out, "checkpoint path")->required();
  build->add_flag("--digest", a.digest, "print a digest of logits on a seeded noise image");

  auto* load = app.add_subcommand("load", "verify a checkpoint against a config");
  model_opts(load);
  load->add_option("--checkpoint", a.checkpoint, "checkpoint path")->required();
  load->add_flag("--digest", a.digest, "print a digest of logits on a seeded noise image");

  auto* erf = app.add_subcommand("erf", "effective receptive field maps and ERF@50");
  model_opts(erf);
  erf->add_option("--checkpoint", a.checkpoint, "weights (default: seeded initialisation)");
  erf->add_option("--images", a.images, "directory of PGM/PPM/STMF images");
  erf->add_option("--noise", a.noise, "use N seeded noise images instead");
  erf->add_option("--stages", a.stages, "comma-separated stage indices (default: all)");
  erf->add_option("--out", a.out, "output directory for erf.csv and stage<k>.pgm");
  erf->add_flag("--log", a.log_pgm, "log-scaled PGM maps");

  auto* inv = app.add_subcommand("invariance", "prediction consistency under translate/rotate/scale");
  model_opts(inv);
  inv->add_option("--checkpoint", a.checkpoint, "weights (default: seeded initialisation)");
  inv->add_option("--images", a.images, "directory of PGM/PPM/STMF images (+ optional labels.csv)");
  inv->add_option("--noise", a.noise, "use N seeded noise images instead");
  inv->add_option("--transform", a.transform, "translate | rotate | scale | all")->capture_default_str();
  inv->add_option("--out", a.out, "CSV output");

  auto* self = app.add_subcommand("selftest", "oracle battery; exit 1 on any failure");
  self->add_option("--threads", a.threads, "worker threads")->check(CLI::PositiveNumber);
  self->add_option("--perturb", a.perturb, "perturb the reference side of one named check");
  self->add_flag("--full", a.full, "20 oracle seeds and 10 gradient seeds");
  self->add_option("--out", a.out, "report output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  set_num_threads(a.threads);

  try {
    if (*describe) return cmd_describe(a);
    if (*build) return cmd_build(a);
    if (*load) return cmd_load(a);
    if (*erf) return cmd_erf(a);
    if (*inv) return cmd_invariance(a);
    if (*self) return cmd_selftest(a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kUsage;
  } catch (const ImageError& e) {
    std::cerr << "image error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
