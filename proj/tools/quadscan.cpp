// quadscan: command-line driver for the quadtree-scan state-space library.
//
// Subcommands:
//   selftest          run every module's invariant suite
//   train             train the Micro variant on the synthetic quadrant task
//   bench scan        time scan kernels vs a naive attention reference
//   export-partition  dump per-block partition decisions for one image
//   perm              print a scan permutation as JSON
//   flops             parameter/FLOP accounting per model variant

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "quadscan/bench.hpp"
#include "quadscan/checkpoint.hpp"
#include "quadscan/selftest.hpp"
#include "quadscan/train.hpp"

namespace fs = std::filesystem;
using namespace quadscan;
using nlohmann::json;

namespace {

int cmd_selftest(const std::string& inject_fault) {
  bool perm_fault = inject_fault == "perm-cache";
  if (!inject_fault.empty() && !perm_fault) {
    std::cerr << "unknown fault: " << inject_fault << " (expected perm-cache)\n";
    return 2;
  }
  return run_selftest(std::cout, perm_fault);
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              long long seed_override) {
  json cfg_json = json::object();
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    check(bool(is), "cannot open config: " + config_path);
    cfg_json = json::parse(is);
  }
  VariantConfig cfg = config_from_json(cfg_json);
  if (seed_override >= 0) cfg.seed = std::uint64_t(seed_override);

  TrainOptions opt;
  opt.steps = cfg_json.value("steps", opt.steps);
  opt.batch = cfg_json.value("batch", opt.batch);
  opt.lr = cfg_json.value("lr", opt.lr);
  opt.optimizer = cfg_json.value("optimizer", opt.optimizer);
  opt.n_train = cfg_json.value("n_train", opt.n_train);
  opt.n_eval = cfg_json.value("n_eval", opt.n_eval);

  check(cfg.image_size == 32 && cfg.num_classes == 4,
        "train: the synthetic task needs a micro-style config (32x32, 4 classes)");
  fs::create_directories(out_dir);

  Model<float> model = build_variant<float>(cfg);
  std::cout << "variant " << cfg.name << ", " << model.parameter_count()
            << " parameters, seed " << cfg.seed << "\n";
  auto train_set = gen_synthetic(opt.n_train, train_data_seed(cfg.seed));
  auto eval_set = gen_synthetic(opt.n_eval, eval_data_seed(cfg.seed));
  TrainReport rep = train(model, opt, train_set, eval_set, cfg.seed);

  save_checkpoint(model, out_dir + "/checkpoint.qckpt");
  json jr;
  jr["initial_loss"] = rep.initial_loss;
  jr["final_loss"] = rep.final_loss;
  jr["eval_accuracy"] = rep.eval_accuracy;
  jr["quadrant_agreement"] = rep.quadrant_agreement;
  jr["wall_seconds"] = rep.wall_seconds;
  jr["steps"] = rep.steps;
  jr["step_losses"] = rep.step_losses;
  jr["eval_quadrant_decisions"] = rep.eval_quadrant_decisions;
  std::ofstream os(out_dir + "/report.json");
  os << jr.dump(2) << "\n";
  std::cout << "initial loss " << rep.initial_loss << ", final loss "
            << rep.final_loss << ", eval accuracy " << rep.eval_accuracy
            << ", quadrant agreement " << rep.quadrant_agreement << ", wall "
            << rep.wall_seconds << " s\n";
  std::cout << "checkpoint: " << out_dir << "/checkpoint.qckpt\n";
  return 0;
}

int cmd_bench(const std::string& lengths_csv, int reps, const std::string& out) {
  std::vector<int> lengths;
  std::stringstream ss(lengths_csv);
  std::string item;
  while (std::getline(ss, item, ',')) lengths.push_back(std::stoi(item));
  BenchResult res = bench_scan(lengths, reps);
  json rows = json::array();
  std::printf("%10s %16s %16s %16s\n", "L", "sequential_ns", "parallel_ns",
              "attention_ns");
  for (const auto& r : res.rows) {
    std::printf("%10d %16.0f %16.0f %16.0f\n", r.length, r.sequential_ns,
                r.parallel_ns, r.attention_ns);
    rows.push_back({{"length", r.length},
                    {"sequential_ns", r.sequential_ns},
                    {"parallel_ns", r.parallel_ns},
                    {"attention_ns", r.attention_ns}});
  }
  std::printf("log-log slopes: sequential %.3f, parallel %.3f, attention %.3f\n",
              res.sequential_slope, res.parallel_slope, res.attention_slope);
  std::printf("timed outputs identical to untimed: %s\n",
              res.numerics_ok ? "yes" : "NO");
  if (!out.empty()) {
    json j;
    j["rows"] = rows;
    j["sequential_slope"] = res.sequential_slope;
    j["parallel_slope"] = res.parallel_slope;
    j["attention_slope"] = res.attention_slope;
    j["numerics_ok"] = res.numerics_ok;
    std::ofstream os(out);
    os << j.dump(2) << "\n";
  }
  return res.numerics_ok ? 0 : 1;
}

int cmd_export_partition(const std::string& ckpt, const std::string& image_path,
                         const std::string& out_dir) {
  Model<float> model = load_checkpoint(ckpt);
  int w = 0, h = 0;
  std::vector<unsigned char> px = load_pgm(image_path, w, h);
  check(w == model.cfg.image_size && h == model.cfg.image_size,
        "export-partition: image must be " + std::to_string(model.cfg.image_size) +
            "x" + std::to_string(model.cfg.image_size));
  // gray [0,255] -> [-2, 2], replicated across the three channels
  Tensor<float> img = Tensor<float>::zeros({h, w, 3});
  for (int i = 0; i < h * w; ++i) {
    float v = (float(px[static_cast<size_t>(i)]) / 255.0f - 0.5f) * 4.0f;
    for (int c = 0; c < 3; ++c)
      img.param_data()[static_cast<size_t>(i * 3 + c)] = v;
  }
  std::vector<QuadDecision<float>> decisions;
  Tensor<float> logits =
      forward_classify(model, img, RunMode::eval, nullptr, &decisions);
  fs::create_directories(out_dir);
  json j;
  j["checkpoint"] = ckpt;
  j["image"] = image_path;
  j["logits"] = logits.vals();
  json blocks = json::array();
  for (size_t i = 0; i < decisions.size(); ++i) {
    const auto& d = decisions[i];
    json b;
    b["block"] = i;
    b["quadrant"] = d.quadrant;
    b["scores"] = std::vector<float>(d.scores.begin(), d.scores.end());
    b["height"] = d.height;
    b["width"] = d.width;
    std::string map_name = "block" + std::to_string(i) + "_scores.pgm";
    b["score_map"] = map_name;
    std::vector<unsigned char> gray(d.score_map.size());
    for (size_t k = 0; k < d.score_map.size(); ++k) {
      float v = std::min(1.0f, std::max(0.0f, d.score_map[k]));
      gray[k] = (unsigned char)std::lround(v * 255.0f);
    }
    save_pgm(out_dir + "/" + map_name, gray, d.width, d.height);
    blocks.push_back(b);
  }
  j["blocks"] = blocks;
  std::ofstream os(out_dir + "/partition.json");
  os << j.dump(2) << "\n";
  std::cout << "wrote " << decisions.size() << " block records to " << out_dir
            << "\n";
  return 0;
}

int cmd_perm(int height, int width, const std::string& kind, bool dump) {
  ScanKind k;
  if (kind == "coarse")
    k = ScanKind::coarse_quad;
  else if (kind == "fine")
    k = ScanKind::fine_quad;
  else if (kind == "raster")
    k = ScanKind::raster;
  else {
    std::cerr << "unknown kind: " << kind << " (coarse|fine|raster)\n";
    return 2;
  }
  auto p = PermutationCache::get(height, width, k);
  if (dump) {
    json j = p->forward;
    std::cout << j.dump() << "\n";
  } else {
    std::cout << "kind " << scan_kind_name(p->kind) << ", grid " << height << "x"
              << width << ", length " << p->length << "\n";
  }
  return 0;
}

int cmd_flops(const std::string& variant) {
  VariantConfig cfg = VariantConfig::by_name(variant);
  Model<float> m = build_variant<float>(cfg);
  FlopReport rep = count_params_flops(m, cfg.image_size, cfg.image_size);
  json j;
  j["variant"] = cfg.name;
  j["input"] = cfg.image_size;
  j["params"] = rep.params;
  j["flops_multadd_x2"] = rep.flops;
  j["macs"] = rep.macs();
  j["token_op_flops"] = rep.token_op_flops;
  j["attention_reference_flops_14x14x384"] = rep.attention_reference_flops;
  struct Ref {
    const char* name;
    double params_m, gmacs;
  };
  for (const Ref& r : {Ref{"lite", 5.47, 0.82}, Ref{"tiny", 10.32, 2.07},
                       Ref{"small", 31.25, 5.51}, Ref{"base", 50.6, 9.30}}) {
    if (cfg.name == r.name) {
      j["published_params_m"] = r.params_m;
      j["published_gmacs"] = r.gmacs;
      j["params_deviation"] = (double(rep.params) / 1e6 - r.params_m) / r.params_m;
      j["gmacs_deviation"] = (double(rep.macs()) / 1e9 - r.gmacs) / r.gmacs;
    }
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quadtree-scan state-space toolkit"};
  app.require_subcommand(1);

  auto* selftest = app.add_subcommand("selftest", "run invariant suites");
  std::string inject_fault;
  selftest->add_option("--inject-fault", inject_fault,
                       "corrupt a subsystem first (perm-cache)");

  auto* train_cmd = app.add_subcommand("train", "train on the synthetic task");
  std::string config_path, out_dir = "out";
  long long seed_override = -1;
  train_cmd->add_option("--config", config_path, "JSON config");
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--seed", seed_override, "override config seed");

  auto* bench = app.add_subcommand("bench", "benchmarks");
  auto* bench_scan_cmd = bench->add_subcommand("scan", "scan kernel timing");
  std::string lengths = "1024,4096,16384,65536", bench_out;
  int reps = 9;
  bench_scan_cmd->add_option("--lengths", lengths, "comma-separated lengths");
  bench_scan_cmd->add_option("--reps", reps, "timing repetitions (median)");
  bench_scan_cmd->add_option("--out", bench_out, "write JSON results here");

  auto* export_cmd =
      app.add_subcommand("export-partition", "partition decisions for an image");
  std::string ckpt, image_path, export_out = "partition_out";
  export_cmd->add_option("--checkpoint", ckpt)->required();
  export_cmd->add_option("--image", image_path, "PGM (P5) image")->required();
  export_cmd->add_option("--out", export_out, "output directory");

  auto* perm_cmd = app.add_subcommand("perm", "print a scan permutation");
  int height = 8, width = 8;
  std::string kind = "coarse";
  bool dump = false;
  perm_cmd->add_option("--height", height)->required();
  perm_cmd->add_option("--width", width)->required();
  perm_cmd->add_option("--kind", kind, "coarse|fine|raster");
  perm_cmd->add_flag("--dump", dump, "print the forward array as JSON");

  auto* flops_cmd = app.add_subcommand("flops", "parameter/FLOP accounting");
  std::string variant = "lite";
  flops_cmd->add_option("--variant", variant, "lite|tiny|small|base|micro");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*selftest) return cmd_selftest(inject_fault);
    if (*train_cmd) return cmd_train(config_path, out_dir, seed_override);
    if (*bench_scan_cmd) return cmd_bench(lengths, reps, bench_out);
    if (*bench) {
      std::cerr << "bench requires a subcommand (scan)\n";
      return 2;
    }
    if (*export_cmd) return cmd_export_partition(ckpt, image_path, export_out);
    if (*perm_cmd) return cmd_perm(height, width, kind, dump);
    if (*flops_cmd) return cmd_flops(variant);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
