// lmnet command-line front end. Every log line on stdout is one JSON
// object; human-readable tables go to stderr.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "lmnet/lmnet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lmnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

void emit(const json& j) {
  std::cout << j.dump() << '\n';
  std::cout.flush();
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string weights;
  std::string out;
  std::string flops_unit = "macs";
  bool foreground_only = false;
  // eval
  std::string manifest;
  std::string split = "test";
  std::string pred, ref;
  // infer
  std::string image;
  // synth
  std::size_t n = 200;
  std::size_t size = 64;
  // fuse
  std::size_t probes = 2;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValueError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

// A config file is either a run config (with a "model" object) or a bare
// model config.
LmNetConfig model_config_from(const fs::path& path) {
  const json j = read_json_file(path);
  LmNetConfig c;
  try {
    c = j.contains("model") ? j.at("model").get<LmNetConfig>() : j.get<LmNetConfig>();
  } catch (const json::exception& e) {
    throw ValueError("invalid model config in " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

std::string require(const std::string& value, const char* flag, const char* cmd) {
  if (value.empty()) throw ValueError(std::string(cmd) + " needs " + flag);
  return value;
}

// Dispatches on the checkpoint dtype.
template <class F>
auto with_checkpoint(const fs::path& path, F&& f) {
  if (!fs::exists(path)) throw IoError("missing weights file " + path.string());
  const std::string bytes = read_file_bytes(path);
  const LmwHeader h = parse_lmw_header(bytes);
  if (h.dtype == "f64") {
    LmNet<double> net = decode_lmw<double>(bytes);
    return f(net);
  }
  LmNet<float> net = decode_lmw<float>(bytes);
  return f(net);
}

json cost_json(const CostReport& r, const std::string& unit) {
  json j{{"params", r.params}, {"buffers", r.buffers}, {"params_with_buffers", r.params_with_buffers()}};
  if (unit == "flops2x")
    j["flops"] = 2 * r.macs;
  else
    j["macs"] = r.macs;
  return j;
}

json report_json(const MetricsReport& r) { return json(r); }

void print_table(const MetricsReport& r) {
  std::fprintf(stderr, "%-10s %10s %10s\n", "class", "dice", "iou");
  for (std::size_t c = 0; c < r.num_classes; ++c) std::fprintf(stderr, "%-10zu %10.4f %10.4f\n", c, r.dice[c], r.iou[c]);
  std::fprintf(stderr, "%-10s %10.4f %10.4f\n", r.foreground_only ? "mean(fg)" : "mean", r.mean_dice, r.mean_iou);
  std::fprintf(stderr, "accuracy %.4f  precision %.4f  recall %.4f\n", r.accuracy, r.precision, r.recall);
  std::fprintf(stderr, "hausdorff %.3f px (%zu empty)  rad %.4f (%zu undefined)  images %zu\n", r.hausdorff,
               r.hausdorff_empty, r.rad, r.rad_undefined, r.images);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

// ---------------------------------------------------------------------------

int cmd_train(const Options& o) {
  RunConfig cfg = load_run_config(require(o.config, "--config", "train"));
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out = o.out;
  if (cfg.manifest.empty()) throw ValueError("run config has no manifest");
  if (!fs::exists(cfg.manifest)) throw IoError("missing manifest " + cfg.manifest);
  const DatasetManifest manifest = load_manifest(cfg.manifest);

  LmNet<float> net = o.weights.empty() ? LmNet<float>(cfg.model, cfg.seed)
                                       : load_weights<float>(o.weights, cfg.model);
  if (net.is_fused()) throw ValueError("cannot train a fused checkpoint");
  std::optional<fs::path> ckpt;
  if (!cfg.out.empty()) {
    ckpt = cfg.out;
    if (ckpt->has_parent_path()) fs::create_directories(ckpt->parent_path());
  }
  emit({{"event", "config"}, {"run", cfg}});
  const TrainResult r = train(net, cfg, manifest, ckpt, emit);

  json done{{"event", "done"}, {"best_epoch", r.best_epoch}, {"best_val_mean_dice", r.best_val_mean_dice}};
  if (ckpt) done["checkpoint"] = ckpt->string();
  const auto test = load_split<float>(manifest, Split::test, net.config().input_h, net.config().input_w);
  if (!test.empty()) done["test"] = report_json(evaluate(net, test, o.foreground_only));
  emit(done);
  return kExitOk;
}

int cmd_fuse(const Options& o) {
  const fs::path in = require(o.weights, "--weights", "fuse");
  const fs::path out = require(o.out, "--out", "fuse");
  return with_checkpoint(in, [&](auto& net) {
    using T = typename std::decay_t<decltype(net)>::value_type;
    if (net.is_fused()) {
      emit({{"event", "warning"}, {"message", "checkpoint is already fused; nothing to do"}});
      if (fs::absolute(in) != fs::absolute(out)) write_file_bytes(out, read_file_bytes(in));
      return kExitOk;
    }
    net.set_mode(Mode::eval);
    LmNet<T> fused = fuse_model(net);
    std::mt19937_64 rng(o.seed.value_or(0));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double worst = 0;
    bool masks_equal = true;
    const auto& c = net.config();
    for (std::size_t p = 0; p < o.probes; ++p) {
      Tensor<T> x({1, 3, c.input_h, c.input_w});
      for (auto& v : x.data()) v = static_cast<T>(unit(rng));
      const Tensor<T> a = net.predict_logits(x), b = fused.predict_logits(x);
      worst = std::max(worst, static_cast<double>(max_abs_diff(a, b)));
      masks_equal = masks_equal && argmax_masks(a)[0] == argmax_masks(b)[0];
    }
    save_weights(fused, out);
    emit({{"event", "fused"},
          {"out", out.string()},
          {"probes", o.probes},
          {"max_abs_deviation", worst},
          {"argmax_identical", masks_equal}});
    return kExitOk;
  });
}

int cmd_infer(const Options& o) {
  const fs::path image_path = require(o.image, "--image", "infer");
  const fs::path out = require(o.out, "--out", "infer");
  return with_checkpoint(require(o.weights, "--weights", "infer"), [&](auto& net) {
    using T = typename std::decay_t<decltype(net)>::value_type;
    if (!fs::exists(image_path)) throw IoError("missing image " + image_path.string());
    const Image8 img = read_image_rgb(image_path);
    const auto& c = net.config();
    Tensor<T> x = resize_image(image_to_tensor<T>(img), c.input_h, c.input_w);
    if (!net.is_fused()) net.set_mode(Mode::eval);
    const Tensor<T> logits = net.predict_logits(x.reshape({1, 3, c.input_h, c.input_w}));
    const SegmentationMask m = resize_mask(argmax_masks(logits)[0], img.height, img.width);
    Image8 idx{m.height, m.width, 1, std::vector<std::uint8_t>(m.size())};
    std::size_t fg = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      idx.pixels[i] = static_cast<std::uint8_t>(m.labels[i]);
      fg += m.labels[i] != 0;
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_palette_png(out, idx, default_palette(c.num_classes));
    emit({{"event", "infer"},
          {"image", image_path.string()},
          {"out", out.string()},
          {"height", m.height},
          {"width", m.width},
          {"foreground_fraction", static_cast<double>(fg) / static_cast<double>(m.size())}});
    return kExitOk;
  });
}

// A mask file is mapped through the palette when every value is a palette
// key; otherwise its values are taken as class indices directly (the form
// `infer` writes).
SegmentationMask read_labels(const fs::path& path, const std::map<int, int>& palette, std::size_t classes) {
  if (!fs::exists(path)) throw IoError("missing mask " + path.string());
  const Image8 v = read_mask_values(path);
  bool all_keys = true;
  for (auto p : v.pixels) all_keys = all_keys && palette.count(p);
  if (all_keys) return map_mask(v, palette, path.string());
  SegmentationMask m(v.height, v.width);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (v.pixels[i] >= classes)
      throw ValueError(path.string() + ": value " + std::to_string(v.pixels[i]) +
                       " is neither a palette key nor a class index");
    m.labels[i] = v.pixels[i];
  }
  return m;
}

int cmd_eval(const Options& o) {
  std::string manifest_path = o.manifest;
  if (manifest_path.empty() && !o.config.empty()) manifest_path = load_run_config(o.config).manifest;

  MetricsReport report;
  if (!o.pred.empty() || !o.ref.empty()) {
    std::map<int, int> palette{{0, 0}, {255, 1}};
    if (!manifest_path.empty()) palette = load_manifest(manifest_path).palette;
    std::size_t classes = 2;
    for (const auto& [k, v] : palette) classes = std::max<std::size_t>(classes, static_cast<std::size_t>(v) + 1);
    const SegmentationMask pred = read_labels(require(o.pred, "--pred", "eval"), palette, classes);
    const SegmentationMask ref = read_labels(require(o.ref, "--ref", "eval"), palette, classes);
    MetricsAccumulator acc(classes, o.foreground_only);
    acc.add(pred, ref);
    report = acc.report();
  } else {
    require(manifest_path, "--manifest (or --config with a manifest)", "eval");
    if (!fs::exists(manifest_path)) throw IoError("missing manifest " + manifest_path);
    const DatasetManifest m = load_manifest(manifest_path);
    const Split split = parse_split(o.split);
    report = with_checkpoint(require(o.weights, "--weights", "eval"), [&](auto& net) {
      using T = typename std::decay_t<decltype(net)>::value_type;
      const auto samples = load_split<T>(m, split, net.config().input_h, net.config().input_w);
      if (samples.empty()) throw ValueError(std::string("split '") + split_name(split) + "' is empty");
      return evaluate(net, samples, o.foreground_only);
    });
  }
  if (!o.out.empty()) write_text(o.out, report_json(report).dump(2) + "\n");
  emit({{"event", "eval"}, {"report", report_json(report)}});
  print_table(report);
  return kExitOk;
}

int cmd_gradcheck(const Options& o) {
  const std::uint64_t seed = o.seed.value_or(7);
  bool ok = true;
  auto run = [&](const GradCase& c) {
    const GradCaseResult r = run_grad_case(c, seed);
    ok = ok && r.report.passed;
    emit({{"event", "gradcheck"},
          {"case", r.name},
          {"checked", r.report.checked},
          {"refined", r.report.refined},
          {"max_rel_error", r.report.max_rel_error},
          {"tolerance", r.tolerance},
          {"passed", r.report.passed}});
  };
  for (const auto& c : primitive_grad_cases(seed)) run(c);
  run(network_grad_case(seed));
  emit({{"event", "gradcheck_done"}, {"passed", ok}});
  return ok ? kExitOk : kExitValidation;
}

int cmd_cost(const Options& o) {
  LmNetConfig cfg;
  if (!o.weights.empty()) {
    if (!fs::exists(o.weights)) throw IoError("missing weights file " + o.weights);
    cfg = parse_lmw_header(read_file_bytes(o.weights)).config;
  } else if (!o.config.empty()) {
    cfg = model_config_from(o.config);
  }
  LmNet<float> net(cfg, o.seed.value_or(0));
  net.set_mode(Mode::eval);
  const CostReport unfused = count_cost(net);
  const CostReport fused = count_cost(fuse_model(net));
  emit({{"event", "cost"},
        {"unit", o.flops_unit},
        {"input", {1, 3, cfg.input_h, cfg.input_w}},
        {"unfused", cost_json(unfused, o.flops_unit)},
        {"fused", cost_json(fused, o.flops_unit)}});
  return kExitOk;
}

int cmd_synth(const Options& o) {
  SynthConfig sc;
  sc.n = o.n;
  sc.size = o.size;
  sc.seed = o.seed.value_or(0);
  const fs::path dir = require(o.out, "--out", "synth");
  const DatasetManifest m = synth_shapes(sc, dir);
  emit({{"event", "synth"},
        {"manifest", (dir / "manifest.json").string()},
        {"n", m.entries.size()},
        {"size", sc.size},
        {"train", m.indices(Split::train).size()},
        {"val", m.indices(Split::val).size()},
        {"test", m.indices(Split::test).size()}});
  return kExitOk;
}

int fail(int code, const std::string& kind, const std::string& message) {
  emit({{"event", "error"}, {"kind", kind}, {"message", message}, {"exit_code", code}});
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LM-Net segmentation: train, fuse, infer, evaluate"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "JSON run or model config");
  app.add_option("--seed", o.seed, "RNG seed (overrides the config)");
  app.add_option("--weights", o.weights, "LMW checkpoint");
  app.add_option("--out", o.out, "output path");
  app.add_option("--flops-unit", o.flops_unit, "cost unit")->check(CLI::IsMember({"macs", "flops2x"}));
  app.add_flag("--foreground-only", o.foreground_only, "average dice/iou over foreground classes only");

  app.add_subcommand("train", "train from a run config; writes the best checkpoint");
  auto* fuse = app.add_subcommand("fuse", "merge multi-branch convolutions into single kernels");
  fuse->add_option("--probes", o.probes, "random inputs used to report the deviation");
  auto* infer = app.add_subcommand("infer", "predict a palette mask PNG for one image");
  infer->add_option("--image", o.image, "input image");
  auto* eval = app.add_subcommand("eval", "metrics for a checkpoint on a split, or for one pred/ref pair");
  eval->add_option("--manifest", o.manifest, "dataset manifest");
  eval->add_option("--split", o.split, "train, val or test");
  eval->add_option("--pred", o.pred, "predicted mask");
  eval->add_option("--ref", o.ref, "reference mask");
  app.add_subcommand("gradcheck", "finite-difference checks of every primitive and a tiny network");
  app.add_subcommand("cost", "parameters and MACs, unfused and fused");
  auto* synth = app.add_subcommand("synth", "write a synthetic shapes dataset");
  synth->add_option("--n", o.n, "number of images");
  synth->add_option("--size", o.size, "image side");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitValidation, "usage", e.what());
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "train") return cmd_train(o);
    if (cmd == "fuse") return cmd_fuse(o);
    if (cmd == "infer") return cmd_infer(o);
    if (cmd == "eval") return cmd_eval(o);
    if (cmd == "gradcheck") return cmd_gradcheck(o);
    if (cmd == "cost") return cmd_cost(o);
    if (cmd == "synth") return cmd_synth(o);
  } catch (const IoError& e) {
    return fail(kExitIo, "io", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kExitIo, "io", e.what());
  } catch (const Error& e) {
    return fail(kExitValidation, "validation", e.what());
  } catch (const json::exception& e) {
    return fail(kExitValidation, "validation", e.what());
  } catch (const std::exception& e) {
    return fail(kExitInternal, "internal", e.what());
  }
  return fail(kExitValidation, "usage", "unknown command " + cmd);
}
