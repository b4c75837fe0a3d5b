#pragma once

// Experiment pipeline shared by the command-line tool and the acceptance
// run: dataset splits, training with logs, evaluation reports and the
// directional checks embedded in them.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "rayfusion/config.hpp"
#include "rayfusion/eval.hpp"
#include "rayfusion/io.hpp"
#include "rayfusion/parallel.hpp"
#include "rayfusion/plot.hpp"
#include "rayfusion/train.hpp"

namespace rayfusion {

/// Refusal to overwrite existing results without --force.
class OutputExistsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kSplitNames[3] = {"train", "val", "test"};
inline constexpr int kTrainSplit = 0, kValSplit = 1, kTestSplit = 2;

inline std::size_t split_size(const RunConfig& cfg, int split) {
  return split == kTrainSplit ? cfg.splits.train : split == kValSplit ? cfg.splits.val : cfg.splits.test;
}

inline SceneConfig split_scene_config(const RunConfig& cfg, int split, std::size_t i) {
  SceneConfig s = cfg.scene;
  s.seed = cfg.scene_seed(split, i);
  return s;
}

/// Generates a split in memory. A non-negative `delay_s` overrides the
/// collaborator delay of every scene.
inline std::vector<FusionSample> build_split(const RunConfig& cfg, int split, double delay_s = -1.0) {
  std::vector<FusionSample> out(split_size(cfg, split));
  parallel_for(out.size(), cfg.workers, [&](std::size_t i) {
    SceneConfig s = split_scene_config(cfg, split, i);
    if (delay_s >= 0.0) s.collab_delay_s = delay_s;
    out[i] = make_sample(generate_scene(s), cfg.sample);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Output layout

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path scenes(int split) const { return root / "scenes" / kSplitNames[split]; }
  std::filesystem::path model(const std::string& variant) const { return root / "models" / variant; }
  std::filesystem::path checkpoint(const std::string& variant) const { return model(variant) / "checkpoint.rfck"; }
  std::filesystem::path metrics(const std::string& variant) const { return model(variant) / "metrics.jsonl"; }
  std::filesystem::path timings(const std::string& variant) const { return model(variant) / "timings.jsonl"; }
  std::filesystem::path eval(const std::string& variant) const { return root / "eval" / variant; }
  std::filesystem::path sweep(const std::string& variant) const { return root / "sweep" / variant; }
  std::filesystem::path ablate() const { return root / "ablate"; }
  std::filesystem::path report() const { return root / "report"; }
};

inline void write_text(const std::filesystem::path& file, const std::string& text) {
  std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + file.string() + "'");
  os << text;
}

inline void append_line(const std::filesystem::path& file, const std::string& line) {
  std::ofstream os(file, std::ios::binary | std::ios::app);
  if (!os) throw std::runtime_error("cannot append to '" + file.string() + "'");
  os << line << '\n';
}

/// Creates `dir`, or refuses when it already holds files and `force` is off.
inline void prepare_dir(const std::filesystem::path& dir, bool force) {
  if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir)) {
    if (!force) throw OutputExistsError("'" + dir.string() + "' already exists; pass --force to overwrite");
    std::filesystem::remove_all(dir);
  }
  std::filesystem::create_directories(dir);
}

// ---------------------------------------------------------------------------
// Directional checks embedded in reports

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline std::string checks_csv(const std::vector<Check>& checks) {
  CsvTable t({"check", "result", "detail"});
  for (const auto& c : checks) t.row({c.name, c.pass ? "pass" : "fail", "\"" + c.detail + "\""});
  return t.str();
}

inline bool all_pass(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

inline std::string num_str(double v) { return CsvTable::num(v); }

// ---------------------------------------------------------------------------
// Scene files

inline void gen_scenes(const RunConfig& cfg, const RunPaths& paths, bool force) {
  const std::filesystem::path dir = paths.root / "scenes";
  prepare_dir(dir, force);
  for (int split = 0; split < 3; ++split) {
    std::filesystem::create_directories(paths.scenes(split));
    parallel_for(split_size(cfg, split), cfg.workers, [&](std::size_t i) {
      const SceneConfig s = split_scene_config(cfg, split, i);
      write_scene(paths.scenes(split), generate_scene(s, cfg.write_depth_maps), s, cfg.write_depth_maps);
    });
  }
}

/// Reads a split written by gen_scenes; the file set must match the config.
inline std::vector<FusionSample> load_split(const RunConfig& cfg, const RunPaths& paths, int split) {
  std::vector<FusionSample> out(split_size(cfg, split));
  parallel_for(out.size(), cfg.workers, [&](std::size_t i) {
    const std::filesystem::path file = paths.scenes(split) / scene_file_name(cfg.scene_seed(split, i));
    if (!std::filesystem::exists(file)) throw DataError("missing scene file '" + file.string() + "' (run gen first)");
    LoadedScene loaded = read_scene(file);
    if (scene_config_to_json(loaded.config) != scene_config_to_json(cfg.scene))
      throw DataError("scene file '" + file.string() + "' was generated with a different scene config");
    out[i] = make_sample(loaded.scene, cfg.sample);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Training

inline RunConfig variant_config(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  apply_variant(c, variant);
  return c;
}

inline std::string metrics_line(const EpochRecord& r) {
  Json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["regression"] = r.regression;
  j["focal"] = r.focal;
  j["total"] = r.total;
  j["val_ap50"] = r.val_ap50;
  j["val_ap70"] = r.val_ap70;
  return j.dump();
}

inline std::unique_ptr<RayFusionModel> load_model(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  if (!std::filesystem::exists(checkpoint)) throw DataError("missing checkpoint '" + checkpoint.string() + "' (run train first)");
  auto model = std::make_unique<RayFusionModel>(cfg.model);
  load_params(model->params(), decode_checkpoint(read_file(checkpoint.string())));
  return model;
}

inline std::size_t checkpoint_epoch(const std::filesystem::path& checkpoint) {
  for (const auto& r : decode_checkpoint(read_file(checkpoint.string())))
    if (r.name == "meta/epoch") return static_cast<std::size_t>(r.values.at(0));
  return 0;
}

/// Trains one variant, writing the checkpoint after every epoch, one
/// metrics line per epoch and wall times to a separate file. With
/// `resume` an existing checkpoint is continued and the logs appended.
inline std::unique_ptr<RayFusionModel> train_variant(const RunConfig& cfg, const std::string& variant,
                                                     const std::vector<FusionSample>& train, const std::vector<FusionSample>& val,
                                                     const RunPaths& paths, bool force, bool resume,
                                                     std::ostream* log = nullptr) {
  const std::filesystem::path ckpt = paths.checkpoint(variant);
  auto model = std::make_unique<RayFusionModel>(cfg.model);
  Trainer trainer(*model, cfg.train);
  if (resume && std::filesystem::exists(ckpt)) {
    trainer.restore(decode_checkpoint(read_file(ckpt.string())));
  } else {
    prepare_dir(paths.model(variant), force);
    write_text(paths.metrics(variant), "");
    write_text(paths.timings(variant), "");
  }
  write_file(ckpt.string(), encode_checkpoint(trainer.checkpoint()));
  trainer.run(train, val, [&](const EpochRecord& r) {
    append_line(paths.metrics(variant), metrics_line(r));
    append_line(paths.timings(variant), Json{{"epoch", r.epoch}, {"wall_s", r.wall_s}}.dump());
    write_file(ckpt.string(), encode_checkpoint(trainer.checkpoint()));
    if (log)
      *log << variant << " epoch " << r.epoch + 1 << "/" << cfg.train.epochs << "  loss " << r.total << "  lr " << r.lr
           << "  " << r.wall_s << " s\n";
  });
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  ApPair ap;
  PRCurve pr50, pr70;
};

inline EvalResult evaluate(const RayFusionModel& model, const std::vector<FusionSample>& samples, const AlignConfig& align,
                           std::size_t workers) {
  const auto frames = run_frames(model, samples, align, 0.0, 0, workers);
  EvalResult r;
  r.pr50 = average_precision(frames, 0.5);
  r.pr70 = average_precision(frames, 0.7);
  r.ap = {r.pr50.ap, r.pr70.ap};
  return r;
}

inline std::string pr_csv(const PRCurve& c) {
  CsvTable t({"rank", "recall", "precision", "envelope"});
  std::vector<double> env(c.points.size());
  double run = 0.0;
  for (std::size_t i = c.points.size(); i-- > 0;) env[i] = run = std::max(run, c.points[i].precision);
  for (std::size_t i = 0; i < c.points.size(); ++i)
    t.row({std::to_string(i + 1), num_str(c.points[i].recall), num_str(c.points[i].precision), num_str(env[i])});
  return t.str();
}

inline Series pr_series(const std::string& name, const PRCurve& c) {
  Series s{name, {}, {}};
  double run = 0.0;
  std::vector<double> env(c.points.size());
  for (std::size_t i = c.points.size(); i-- > 0;) env[i] = run = std::max(run, c.points[i].precision);
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    s.x.push_back(c.points[i].recall);
    s.y.push_back(env[i]);
  }
  return s;
}

/// Largest shortfall of `a`'s precision envelope below `b`'s over the
/// recall levels both curves reach (positive means `a` is lower).
inline double max_precision_shortfall(const PRCurve& a, const PRCurve& b, std::size_t grid = 101) {
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < grid; ++k) {
    const double r = static_cast<double>(k) / static_cast<double>(grid - 1);
    const double pa = envelope_at(a, r), pb = envelope_at(b, r);
    if (pa < 0.0 || pb < 0.0) continue;
    worst = std::max(worst, pb - pa);
  }
  return worst;
}

inline std::vector<Check> write_eval(const EvalResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  CsvTable ap({"iou", "ap"});
  ap.row({"0.50", num_str(r.ap.ap50)});
  ap.row({"0.70", num_str(r.ap.ap70)});
  write_text(dir / "ap.csv", ap.str());
  write_text(dir / "pr_iou50.csv", pr_csv(r.pr50));
  write_text(dir / "pr_iou70.csv", pr_csv(r.pr70));
  write_text(dir / "pr.svg", svg_line_plot("Precision-recall", "recall", "precision",
                                           {pr_series("IoU 0.50", r.pr50), pr_series("IoU 0.70", r.pr70)}));
  std::vector<Check> checks{{"ap70_not_above_ap50", r.ap.ap70 <= r.ap.ap50,
                             "AP70 " + num_str(r.ap.ap70) + " vs AP50 " + num_str(r.ap.ap50)}};
  write_text(dir / "checks.csv", checks_csv(checks));
  return checks;
}

// ---------------------------------------------------------------------------
// Sweeps

inline std::string noise_csv(const std::vector<SweepRow>& rows) {
  CsvTable t({"sigma_m", "ap50_mean", "ap50_sd", "ap70_mean", "ap70_sd"});
  for (const auto& r : rows) t.row({num_str(r.x), num_str(r.ap50_mean), num_str(r.ap50_sd), num_str(r.ap70_mean), num_str(r.ap70_sd)});
  return t.str();
}

inline std::string delay_csv(const std::vector<DelayRow>& rows) {
  CsvTable t({"delay_ms", "sta_ap50", "sta_ap70", "no_sta_ap50", "no_sta_ap70"});
  for (const auto& r : rows)
    t.row({num_str(r.delay_ms), num_str(r.with_sta.ap50), num_str(r.with_sta.ap70), num_str(r.without_sta.ap50),
           num_str(r.without_sta.ap70)});
  return t.str();
}

inline std::vector<Check> noise_checks(const std::string& label, const std::vector<SweepRow>& rows) {
  if (rows.size() < 2) return {};
  const auto& lo = *std::min_element(rows.begin(), rows.end(), [](auto& a, auto& b) { return a.x < b.x; });
  const auto& hi = *std::max_element(rows.begin(), rows.end(), [](auto& a, auto& b) { return a.x < b.x; });
  return {{label + "noise_does_not_help", hi.ap70_mean <= lo.ap70_mean,
           "AP70 " + num_str(hi.ap70_mean) + " at sigma " + num_str(hi.x) + " vs " + num_str(lo.ap70_mean) + " at sigma " + num_str(lo.x)}};
}

inline std::vector<Check> delay_checks(const std::vector<DelayRow>& rows) {
  if (rows.empty()) return {};
  const auto& hi = *std::max_element(rows.begin(), rows.end(), [](auto& a, auto& b) { return a.delay_ms < b.delay_ms; });
  return {{"sta_not_worse_at_max_delay", hi.with_sta.ap70 >= hi.without_sta.ap70,
           "AP70 with STA " + num_str(hi.with_sta.ap70) + " vs without " + num_str(hi.without_sta.ap70) + " at " +
               num_str(hi.delay_ms) + " ms"}};
}

inline std::vector<Check> run_sweeps(const RunConfig& cfg, const RayFusionModel& model, const std::vector<FusionSample>& test,
                                     const std::filesystem::path& dir, bool noise, bool delay) {
  std::filesystem::create_directories(dir);
  std::vector<Check> checks;
  if (noise) {
    const auto rows = noise_sweep(model, test, cfg.train.align, cfg.eval.noise_sigmas, cfg.eval.noise_seeds, cfg.workers);
    write_text(dir / "noise.csv", noise_csv(rows));
    Series a{"AP50", {}, {}}, b{"AP70", {}, {}};
    for (const auto& r : rows) {
      a.x.push_back(r.x), a.y.push_back(r.ap50_mean);
      b.x.push_back(r.x), b.y.push_back(r.ap70_mean);
    }
    write_text(dir / "noise.svg", svg_line_plot("Pose noise", "translation noise sigma (m)", "AP", {a, b}));
    const auto c = noise_checks("", rows);
    checks.insert(checks.end(), c.begin(), c.end());
  }
  if (delay) {
    const auto rows = delay_sweep(model, [&](double d) { return build_split(cfg, kTestSplit, d); }, cfg.train.align,
                                  cfg.eval.delays_ms, cfg.workers);
    write_text(dir / "delay.csv", delay_csv(rows));
    Series on{"AP70 with STA", {}, {}}, off{"AP70 without STA", {}, {}};
    for (const auto& r : rows) {
      on.x.push_back(r.delay_ms), on.y.push_back(r.with_sta.ap70);
      off.x.push_back(r.delay_ms), off.y.push_back(r.without_sta.ap70);
    }
    write_text(dir / "delay.svg", svg_line_plot("Latency", "delay (ms)", "AP70", {on, off}));
    const auto c = delay_checks(rows);
    checks.insert(checks.end(), c.begin(), c.end());
  }
  write_text(dir / "checks.csv", checks_csv(checks));
  return checks;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string variant;
  EvalResult eval;
  double ap70_clean = 0.0;  // sigma 0 mean over noise seeds
  double ap70_noisy = 0.0;  // largest sigma, mean over noise seeds
};

inline std::vector<Check> ablation_checks(const std::vector<AblationRow>& rows) {
  const auto find = [&](const std::string& v) -> const AblationRow* {
    for (const auto& r : rows)
      if (r.variant == v) return &r;
    return nullptr;
  };
  std::vector<Check> checks;
  const AblationRow* full = find("full");
  const AblationRow* noroe = find("no-roe");
  const AblationRow* ifa = find("ifa");
  if (full && noroe) {
    const double d = full->eval.ap.ap70 - noroe->eval.ap.ap70;
    checks.push_back({"roe_gain_ap70", d >= 0.01, "full - no-roe AP70 = " + num_str(d) + " (need >= 0.010)"});
    const double s = max_precision_shortfall(full->eval.pr70, noroe->eval.pr70);
    checks.push_back({"roe_precision_dominance", s <= 0.02, "max precision shortfall of full vs no-roe = " + num_str(s) + " (need <= 0.020)"});
  }
  if (full && ifa) {
    const double d = full->eval.ap.ap70 - ifa->eval.ap.ap70;
    checks.push_back({"pwa_gain_ap70", d >= 0.005, "full - ifa AP70 = " + num_str(d) + " (need >= 0.005)"});
    const double df = full->ap70_clean - full->ap70_noisy, di = ifa->ap70_clean - ifa->ap70_noisy;
    checks.push_back({"pwa_noise_drop", df <= di, "AP70 drop full " + num_str(df) + " vs ifa " + num_str(di)});
  }
  for (const auto& r : rows)
    checks.push_back({r.variant + ":noise_does_not_help", r.ap70_noisy <= r.ap70_clean,
                      "AP70 " + num_str(r.ap70_noisy) + " noisy vs " + num_str(r.ap70_clean) + " clean"});
  return checks;
}

inline AblationRow ablation_row(const RunConfig& cfg, const std::string& variant, const RayFusionModel& model,
                                const std::vector<FusionSample>& test) {
  AblationRow row;
  row.variant = variant;
  row.eval = evaluate(model, test, cfg.train.align, cfg.workers);
  const double lo = *std::min_element(cfg.eval.noise_sigmas.begin(), cfg.eval.noise_sigmas.end());
  const double hi = *std::max_element(cfg.eval.noise_sigmas.begin(), cfg.eval.noise_sigmas.end());
  const auto sweep = noise_sweep(model, test, cfg.train.align, {lo, hi}, cfg.eval.noise_seeds, cfg.workers);
  row.ap70_clean = sweep.front().ap70_mean;
  row.ap70_noisy = sweep.back().ap70_mean;
  return row;
}

inline std::vector<Check> write_ablation(const std::vector<AblationRow>& rows, const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const double hi = *std::max_element(cfg.eval.noise_sigmas.begin(), cfg.eval.noise_sigmas.end());
  CsvTable t({"variant", "ap50", "ap70", "ap70_sigma0", "ap70_sigma" + num_str(hi)});
  std::vector<Series> pr;
  for (const auto& r : rows) {
    t.row({r.variant, num_str(r.eval.ap.ap50), num_str(r.eval.ap.ap70), num_str(r.ap70_clean), num_str(r.ap70_noisy)});
    write_text(dir / ("pr_iou70_" + r.variant + ".csv"), pr_csv(r.eval.pr70));
    pr.push_back(pr_series(r.variant, r.eval.pr70));
  }
  write_text(dir / "ablation.csv", t.str());
  write_text(dir / "pr_iou70.svg", svg_line_plot("Precision-recall at IoU 0.70", "recall", "precision", pr));
  const auto checks = ablation_checks(rows);
  write_text(dir / "checks.csv", checks_csv(checks));
  return checks;
}

// ---------------------------------------------------------------------------
// Communication report

inline std::vector<Check> write_comm(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t C = cfg.model.rdpe.channels, D = cfg.model.rdpe.bins.count, K = cfg.model.rdpe.cameras;
  const CommReport rep = comm_report(cfg.eval.comm_m, C, D, K);
  CsvTable t({"m", "bytes", "kib"});
  Series s{"message bytes", {}, {}};
  for (const auto& r : rep.rows) {
    t.row({std::to_string(r.m), std::to_string(r.bytes), num_str(static_cast<double>(r.bytes) / 1024.0)});
    s.x.push_back(static_cast<double>(r.m));
    s.y.push_back(static_cast<double>(r.bytes));
  }
  write_text(dir / "comm.csv", t.str());
  write_text(dir / "comm.svg", svg_line_plot("Communication cost", "instances per message (M)", "bytes", {s}));
  const double ratio = payload_ratio(200, 5, C, D, K);
  std::vector<Check> checks{
      {"bytes_affine_in_m", rep.max_residual == 0.0,
       "slope " + num_str(rep.slope) + " B/instance, intercept " + num_str(rep.intercept) + " B, max residual " + num_str(rep.max_residual)},
      {"payload_ratio_200_to_5", std::fabs(ratio - 40.0) < 1e-12 && std::fabs(ratio - 40.09) / 40.09 < 0.005,
       "ratio " + num_str(ratio)}};
  write_text(dir / "checks.csv", checks_csv(checks));
  return checks;
}

}  // namespace rayfusion
