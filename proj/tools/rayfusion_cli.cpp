// rayfusion: scene generation, training, evaluation, sweeps, ablations and
// reports over one JSON run configuration.
//
// Results go to $RAYFUSION_OUTPUT_ROOT/<output_dir> (the current directory
// when the variable is unset).
//
// Exit codes: 0 success, 2 configuration or usage error, 3 data error,
// 4 numeric failure, 5 a report check failed, 1 anything else.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rayfusion/pipeline.hpp"

using namespace rayfusion;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4, kCheckFailed = 5 };

struct Options {
  std::string config_path;
  bool force = false;
  int epochs = -1;
  int workers = -1;
  std::string variant = "full";
  std::vector<std::string> variants;
  bool resume = false;
  bool noise = true, delay = true;
};

RunConfig load_config(const Options& o) {
  RunConfig cfg = benchmark_config();
  if (!o.config_path.empty()) {
    std::ifstream is(o.config_path);
    if (!is) throw ConfigError("cannot read config '" + o.config_path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    cfg = parse_run_config(ss.str());
  }
  if (o.epochs >= 0) cfg.train.epochs = static_cast<std::size_t>(o.epochs);
  if (o.workers >= 0) cfg.workers = static_cast<std::size_t>(o.workers);
  cfg.validate();
  return cfg;
}

RunPaths run_paths(const RunConfig& cfg) {
  const char* env = std::getenv("RAYFUSION_OUTPUT_ROOT");
  const fs::path base = env && *env ? fs::path(env) : fs::current_path();
  return {base / cfg.output_dir};
}

int report_checks(const std::string& what, const std::vector<Check>& checks) {
  for (const auto& c : checks) std::cout << what << " check " << c.name << ": " << (c.pass ? "pass" : "FAIL") << " (" << c.detail << ")\n";
  return all_pass(checks) ? kOk : kCheckFailed;
}

int cmd_gen(const Options& o) {
  const RunConfig cfg = load_config(o);
  const RunPaths paths = run_paths(cfg);
  fs::create_directories(paths.root);
  gen_scenes(cfg, paths, o.force);
  write_text(paths.root / "config.json", to_json(cfg).dump(2) + "\n");
  for (int s = 0; s < 3; ++s) std::cout << kSplitNames[s] << ": " << split_size(cfg, s) << " scenes in " << paths.scenes(s) << "\n";
  return kOk;
}

int cmd_train(const Options& o) {
  const RunConfig base = load_config(o);
  const RunPaths paths = run_paths(base);
  const RunConfig cfg = variant_config(base, o.variant);
  const auto train = load_split(cfg, paths, kTrainSplit);
  const auto val = load_split(cfg, paths, kValSplit);
  train_variant(cfg, o.variant, train, val, paths, o.force, o.resume, &std::cerr);
  std::cout << "checkpoint: " << paths.checkpoint(o.variant) << "\nmetrics: " << paths.metrics(o.variant) << "\n";
  return kOk;
}

int cmd_eval(const Options& o) {
  const RunConfig base = load_config(o);
  const RunPaths paths = run_paths(base);
  const RunConfig cfg = variant_config(base, o.variant);
  const auto model = load_model(cfg, paths.checkpoint(o.variant));
  const auto test = load_split(cfg, paths, kTestSplit);
  prepare_dir(paths.eval(o.variant), o.force);
  const EvalResult r = evaluate(*model, test, cfg.train.align, cfg.workers);
  const auto checks = write_eval(r, paths.eval(o.variant));
  std::cout << o.variant << ": AP50 " << num_str(r.ap.ap50) << "  AP70 " << num_str(r.ap.ap70) << "\n";
  return report_checks("eval", checks);
}

int cmd_sweep(const Options& o) {
  const RunConfig base = load_config(o);
  const RunPaths paths = run_paths(base);
  const RunConfig cfg = variant_config(base, o.variant);
  const auto model = load_model(cfg, paths.checkpoint(o.variant));
  const auto test = load_split(cfg, paths, kTestSplit);
  prepare_dir(paths.sweep(o.variant), o.force);
  const auto checks = run_sweeps(cfg, *model, test, paths.sweep(o.variant), o.noise, o.delay);
  std::cout << "sweep tables in " << paths.sweep(o.variant) << "\n";
  return report_checks("sweep", checks);
}

int cmd_ablate(const Options& o) {
  const RunConfig base = load_config(o);
  const RunPaths paths = run_paths(base);
  const auto variants = o.variants.empty() ? base.eval.ablation_variants : o.variants;
  for (const auto& v : variants) variant_config(base, v);  // reject unknown names before any work
  prepare_dir(paths.ablate(), o.force);
  const auto train = load_split(base, paths, kTrainSplit);
  const auto val = load_split(base, paths, kValSplit);
  const auto test = load_split(base, paths, kTestSplit);
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    const RunConfig cfg = variant_config(base, v);
    const fs::path ckpt = paths.checkpoint(v);
    std::unique_ptr<RayFusionModel> model;
    if (!o.force && fs::exists(ckpt) && checkpoint_epoch(ckpt) == cfg.train.epochs) {
      std::cerr << v << ": reusing " << ckpt << "\n";
      model = load_model(cfg, ckpt);
    } else {
      model = train_variant(cfg, v, train, val, paths, true, false, &std::cerr);
    }
    rows.push_back(ablation_row(cfg, v, *model, test));
    std::cout << v << ": AP50 " << num_str(rows.back().eval.ap.ap50) << "  AP70 " << num_str(rows.back().eval.ap.ap70) << "\n";
  }
  return report_checks("ablate", write_ablation(rows, base, paths.ablate()));
}

int cmd_report(const Options& o) {
  const RunConfig cfg = load_config(o);
  const RunPaths paths = run_paths(cfg);
  prepare_dir(paths.report(), o.force);
  std::vector<Check> checks = write_comm(cfg, paths.report());

  // Collect the tables and checks other commands left behind.
  std::ostringstream md;
  md << "# Run report: " << cfg.output_dir << "\n\n";
  std::vector<fs::path> files;
  for (const char* sub : {"eval", "sweep", "ablate", "report"}) {
    const fs::path dir = paths.root / sub;
    if (!fs::exists(dir)) continue;
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".csv" && e.path().filename().string().rfind("pr_", 0) != 0)
        files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream is(f);
    std::stringstream ss;
    ss << is.rdbuf();
    md << "## " << fs::relative(f, paths.root).string() << "\n\n```\n" << ss.str() << "```\n\n";
    if (f.filename() == "checks.csv" && f.parent_path() != paths.report()) {
      std::string line;
      std::getline(ss.seekg(0), line);
      while (std::getline(ss, line)) {
        const auto a = line.find(','), b = line.find(',', a + 1);
        if (a == std::string::npos || b == std::string::npos) continue;
        checks.push_back({fs::relative(f.parent_path(), paths.root).string() + ":" + line.substr(0, a),
                          line.substr(a + 1, b - a - 1) == "pass", line.substr(b + 2, line.size() - b - 3)});
      }
    }
  }
  write_text(paths.report() / "report.md", md.str());
  std::cout << "report: " << paths.report() / "report.md" << "\n";
  return report_checks("report", checks);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rayfusion: collaborative detection experiments"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config_path, "JSON run config (default: the built-in benchmark)")->check(CLI::ExistingFile);
    sub->add_flag("-f,--force", o.force, "overwrite existing outputs");
    sub->add_option("-j,--workers", o.workers, "worker threads (0: one per processor)")->check(CLI::NonNegativeNumber);
  };
  auto* gen = app.add_subcommand("gen", "generate train/val/test scene files");
  common(gen);
  auto* train = app.add_subcommand("train", "train one variant");
  common(train);
  train->add_option("--variant", o.variant, "model variant")->capture_default_str();
  train->add_option("--epochs", o.epochs, "override the configured epoch count")->check(CLI::NonNegativeNumber);
  train->add_flag("--resume", o.resume, "continue from the variant's checkpoint");
  auto* eval = app.add_subcommand("eval", "AP tables and precision-recall curves on the test split");
  common(eval);
  eval->add_option("--variant", o.variant, "model variant")->capture_default_str();
  auto* sweep = app.add_subcommand("sweep", "pose-noise and latency sweeps on the test split");
  common(sweep);
  sweep->add_option("--variant", o.variant, "model variant")->capture_default_str();
  bool no_noise = false, no_delay = false;
  sweep->add_flag("--no-noise", no_noise, "skip the pose-noise sweep");
  sweep->add_flag("--no-delay", no_delay, "skip the latency sweep");
  auto* ablate = app.add_subcommand("ablate", "train (or reuse) and evaluate each variant");
  common(ablate);
  ablate->add_option("--variants", o.variants, "variants (default: the config's list)")->delimiter(',');
  ablate->add_option("--epochs", o.epochs, "override the configured epoch count")->check(CLI::NonNegativeNumber);
  auto* report = app.add_subcommand("report", "communication cost tables and a summary of earlier outputs");
  common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  o.noise = !no_noise;
  o.delay = !no_delay;

  try {
    if (gen->parsed()) return cmd_gen(o);
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o);
    if (sweep->parsed()) return cmd_sweep(o);
    if (ablate->parsed()) return cmd_ablate(o);
    if (report->parsed()) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const OutputExistsError& e) {
    std::cerr << "refusing: " << e.what() << "\n";
    return kConfig;
  } catch (const NonFiniteLossError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n" << e.dump() << "\n";
    return kNumeric;
  } catch (const UndefinedApError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ParseError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
