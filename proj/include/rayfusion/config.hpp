#pragma once

// Versioned JSON run configuration. Every section is read strictly:
// unknown keys and wrong types are configuration errors.

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rayfusion/eval.hpp"
#include "rayfusion/model.hpp"
#include "rayfusion/scene.hpp"
#include "rayfusion/train.hpp"

namespace rayfusion {

using Json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kRunConfigVersion = 1;

struct SplitConfig {
  std::size_t train = 500;
  std::size_t val = 0;
  std::size_t test = 100;
  // Scene seeds of split s are seed_base + s * split_stride + i.
  std::uint64_t seed_base = 1000;
  std::uint64_t split_stride = 1000000;
};

struct EvalConfig {
  std::vector<double> iou_thresholds{0.5, 0.7};
  std::vector<double> noise_sigmas{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  std::vector<double> delays_ms{0.0, 100.0, 200.0, 300.0, 400.0, 500.0};
  std::vector<std::uint64_t> noise_seeds{1, 2, 3};
  std::vector<std::string> ablation_variants{"full", "no-roe", "no-re", "no-oe", "no-hf", "ifa", "no-sta"};
  std::vector<std::size_t> comm_m{5, 10, 25, 50, 100, 200};
};

struct RunConfig {
  int version = kRunConfigVersion;
  SceneConfig scene;
  SampleConfig sample;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  SplitConfig splits;
  std::string output_dir = "run";
  bool write_depth_maps = false;  // scene files get a depth sidecar; otherwise depth is rebuilt on load
  std::size_t workers = 0;        // 0: hardware concurrency

  void validate() const {
    if (version != kRunConfigVersion) throw ConfigError("unsupported config version " + std::to_string(version));
    try {
      scene.validate();
      model.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (static_cast<std::size_t>(scene.cameras_per_agent) != model.rdpe.cameras)
      throw ConfigError("scene cameras_per_agent differs from model kappa");
    if (static_cast<std::size_t>(scene.features.channels) != model.rdpe.channels)
      throw ConfigError("scene feature channels differ from model C");
    if (scene.bins.count != model.rdpe.bins.count || scene.bins.d_min != model.rdpe.bins.d_min ||
        scene.bins.d_max != model.rdpe.bins.d_max)
      throw ConfigError("scene depth bins differ from model depth bins");
    if (sample.ego_instances < 1 || sample.message_instances < 1) throw ConfigError("N and M must be >= 1");
    if (train.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(train.lr > 0.0) || train.lr_min < 0.0) throw ConfigError("learning rates must be positive");
    for (double t : eval.iou_thresholds)
      if (!(t > 0.0 && t < 1.0)) throw ConfigError("IoU thresholds must lie in (0,1)");
    for (double s : eval.noise_sigmas)
      if (s < 0.0) throw ConfigError("noise sigmas must be >= 0");
    for (double d : eval.delays_ms)
      if (d < 0.0) throw ConfigError("delays must be >= 0");
    if (eval.noise_seeds.empty()) throw ConfigError("need at least one noise seed");
    const std::size_t largest = std::max({splits.train, splits.val, splits.test});
    if (largest > splits.split_stride) throw ConfigError("split sizes exceed split_stride; seed ranges would overlap");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }

  /// Seed of scene `i` in split 0 (train), 1 (val) or 2 (test).
  std::uint64_t scene_seed(int split, std::size_t i) const {
    return splits.seed_base + static_cast<std::uint64_t>(split) * splits.split_stride + i;
  }
};

/// Model/alignment changes for a named ablation variant.
inline void apply_variant(RunConfig& cfg, const std::string& variant) {
  if (variant == "full") return;
  if (variant == "no-roe") {
    cfg.model.rdpe.use_roe = false;
  } else if (variant == "no-re") {
    cfg.model.rdpe.use_ray_encoding = false;
  } else if (variant == "no-oe") {
    cfg.model.rdpe.use_occupancy = false;
  } else if (variant == "no-hf") {
    cfg.model.rdpe.high_frequency = false;
  } else if (variant == "ifa") {
    cfg.model.fusion.radii = {1e6};
  } else if (variant == "no-sta") {
    cfg.train.align.motion_compensation = false;
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
}

namespace detail {

/// Reads keys from one JSON object and rejects anything left over.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  template <class F>
  void section(const char* key, F&& read) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it != j_.end()) read(*it, path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key " + path_ + "." + k);
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Json bins_json(const DepthBins& b) { return {{"count", b.count}, {"d_min", b.d_min}, {"d_max", b.d_max}}; }

inline void read_bins(const Json& j, const std::string& path, DepthBins& b) {
  StrictObject o(j, path);
  o.get("count", b.count);
  o.get("d_min", b.d_min);
  o.get("d_max", b.d_max);
  o.finish();
}

}  // namespace detail

inline Json scene_config_to_json(const SceneConfig& s) {
  const auto& a = s.ambiguity;
  const auto& f = s.features;
  return {{"num_agents", s.num_agents},
          {"cameras_per_agent", s.cameras_per_agent},
          {"num_vehicles", s.num_vehicles},
          {"extent", s.extent},
          {"collab_min_distance", s.collab_min_distance},
          {"collab_max_distance", s.collab_max_distance},
          {"comm_range", s.comm_range},
          {"width_range", s.width_range},
          {"height_range", s.height_range},
          {"length_range", s.length_range},
          {"speed_range", s.speed_range},
          {"agent_speed_range", s.agent_speed_range},
          {"collab_delay_s", s.collab_delay_s},
          {"timestamp", s.timestamp},
          {"image_width", s.image_width},
          {"image_height", s.image_height},
          {"hfov", s.hfov},
          {"camera_spread", s.camera_spread},
          {"camera_height", s.camera_height},
          {"bins", detail::bins_json(s.bins)},
          {"depth_blur_bins", s.depth_blur_bins},
          {"ambiguity",
           {{"duplicate_rate", a.duplicate_rate},
            {"along_ray_sigma", a.along_ray_sigma},
            {"lateral_sigma", a.lateral_sigma},
            {"duplicate_offset_min", a.duplicate_offset_min},
            {"duplicate_offset_max", a.duplicate_offset_max},
            {"yaw_sigma", a.yaw_sigma},
            {"size_sigma", a.size_sigma},
            {"velocity_sigma", a.velocity_sigma},
            {"tp_confidence_min", a.tp_confidence_min},
            {"tp_confidence_max", a.tp_confidence_max},
            {"dup_confidence_min", a.dup_confidence_min},
            {"dup_confidence_max", a.dup_confidence_max},
            {"max_range", a.max_range}}},
          {"features",
           {{"channels", f.channels},
            {"appearance_dim", f.appearance_dim},
            {"noise_sigma", f.noise_sigma},
            {"position_scale", f.position_scale},
            {"velocity_scale", f.velocity_scale}}}};
}

inline Json to_json(const RunConfig& c) {
  const auto& r = c.model.rdpe;
  const auto& fu = c.model.fusion;
  const auto& t = c.train;
  Json j;
  j["version"] = c.version;
  j["output_dir"] = c.output_dir;
  j["write_depth_maps"] = c.write_depth_maps;
  j["workers"] = c.workers;
  j["scene"] = scene_config_to_json(c.scene);
  j["sample"] = {{"ego_instances", c.sample.ego_instances},
                 {"message_instances", c.sample.message_instances},
                 {"through_wire", c.sample.through_wire},
                 {"observed_gt_only", c.sample.observed_gt_only}};
  j["model"] = {{"seed", c.model.seed},
                {"dedup_iou", c.model.dedup_iou},
                {"rdpe",
                 {{"channels", r.channels},
                  {"cameras", r.cameras},
                  {"bins", detail::bins_json(r.bins)},
                  {"octaves_origin", r.octaves_origin},
                  {"octaves_direction", r.octaves_direction},
                  {"origin_scale", r.origin_scale},
                  {"delay_scale", r.delay_scale},
                  {"anchor_position_scale", r.anchor_position_scale},
                  {"anchor_velocity_scale", r.anchor_velocity_scale},
                  {"depth_scale", r.depth_scale},
                  {"cos_floor", r.cos_floor},
                  {"use_roe", r.use_roe},
                  {"use_ray_encoding", r.use_ray_encoding},
                  {"use_occupancy", r.use_occupancy},
                  {"high_frequency", r.high_frequency}}},
                {"fusion",
                 {{"channels", fu.channels},
                  {"radii", fu.radii},
                  {"global_branch_weights", fu.global_branch_weights},
                  {"ffn_multiplier", fu.ffn_multiplier},
                  {"logit_prior", fu.logit_prior},
                  {"attention_residual", fu.attention_residual}}}};
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"lr", t.lr},
                {"lr_min", t.lr_min},
                {"grad_clip", t.grad_clip},
                {"seed", t.seed},
                {"validate_each_epoch", t.validate_each_epoch},
                {"adam",
                 {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}, {"weight_decay", t.adam.weight_decay}}},
                {"match",
                 {{"lambda_cls", t.match.lambda_cls},
                  {"lambda_box", t.match.lambda_box},
                  {"max_center_distance", t.match.max_center_distance}}},
                {"focal", {{"alpha", t.focal.alpha}, {"gamma", t.focal.gamma}, {"eps", t.focal.eps}}},
                {"loss", {{"regression", t.loss.regression}, {"classification", t.loss.classification}}},
                {"align",
                 {{"motion_compensation", t.align.motion_compensation},
                  {"velocity_rotate_only", t.align.velocity_rotate_only},
                  {"pad_ego_to", t.align.pad_ego_to}}}};
  j["eval"] = {{"iou_thresholds", c.eval.iou_thresholds},
               {"noise_sigmas", c.eval.noise_sigmas},
               {"delays_ms", c.eval.delays_ms},
               {"noise_seeds", c.eval.noise_seeds},
               {"ablation_variants", c.eval.ablation_variants},
               {"comm_m", c.eval.comm_m}};
  j["splits"] = {{"train", c.splits.train},
                 {"val", c.splits.val},
                 {"test", c.splits.test},
                 {"seed_base", c.splits.seed_base},
                 {"split_stride", c.splits.split_stride}};
  return j;
}

inline void read_scene_config(const Json& js, const std::string& p, SceneConfig& s) {
  using detail::StrictObject;
  StrictObject o(js, p);
  o.get("num_agents", s.num_agents);
  o.get("cameras_per_agent", s.cameras_per_agent);
  o.get("num_vehicles", s.num_vehicles);
  o.get("extent", s.extent);
  o.get("collab_min_distance", s.collab_min_distance);
  o.get("collab_max_distance", s.collab_max_distance);
  o.get("comm_range", s.comm_range);
  o.get("width_range", s.width_range);
  o.get("height_range", s.height_range);
  o.get("length_range", s.length_range);
  o.get("speed_range", s.speed_range);
  o.get("agent_speed_range", s.agent_speed_range);
  o.get("collab_delay_s", s.collab_delay_s);
  o.get("timestamp", s.timestamp);
  o.get("image_width", s.image_width);
  o.get("image_height", s.image_height);
  o.get("hfov", s.hfov);
  o.get("camera_spread", s.camera_spread);
  o.get("camera_height", s.camera_height);
  o.section("bins", [&](const Json& jb, const std::string& pb) { detail::read_bins(jb, pb, s.bins); });
  o.get("depth_blur_bins", s.depth_blur_bins);
  o.section("ambiguity", [&](const Json& ja, const std::string& pa) {
    auto& a = s.ambiguity;
    StrictObject q(ja, pa);
    q.get("duplicate_rate", a.duplicate_rate);
    q.get("along_ray_sigma", a.along_ray_sigma);
    q.get("lateral_sigma", a.lateral_sigma);
    q.get("duplicate_offset_min", a.duplicate_offset_min);
    q.get("duplicate_offset_max", a.duplicate_offset_max);
    q.get("yaw_sigma", a.yaw_sigma);
    q.get("size_sigma", a.size_sigma);
    q.get("velocity_sigma", a.velocity_sigma);
    q.get("tp_confidence_min", a.tp_confidence_min);
    q.get("tp_confidence_max", a.tp_confidence_max);
    q.get("dup_confidence_min", a.dup_confidence_min);
    q.get("dup_confidence_max", a.dup_confidence_max);
    q.get("max_range", a.max_range);
    q.finish();
  });
  o.section("features", [&](const Json& jf, const std::string& pf) {
    auto& f = s.features;
    StrictObject q(jf, pf);
    q.get("channels", f.channels);
    q.get("appearance_dim", f.appearance_dim);
    q.get("noise_sigma", f.noise_sigma);
    q.get("position_scale", f.position_scale);
    q.get("velocity_scale", f.velocity_scale);
    q.finish();
  });
  o.finish();
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig run_config_from_json(const Json& j) {
  using detail::StrictObject;
  RunConfig c;
  StrictObject root(j, "config");
  root.get("version", c.version);
  if (c.version != kRunConfigVersion) throw ConfigError("unsupported config version " + std::to_string(c.version));
  root.get("output_dir", c.output_dir);
  root.get("write_depth_maps", c.write_depth_maps);
  root.get("workers", c.workers);
  root.section("scene", [&](const Json& js, const std::string& p) { read_scene_config(js, p, c.scene); });
  root.section("sample", [&](const Json& js, const std::string& p) {
    StrictObject o(js, p);
    o.get("ego_instances", c.sample.ego_instances);
    o.get("message_instances", c.sample.message_instances);
    o.get("through_wire", c.sample.through_wire);
    o.get("observed_gt_only", c.sample.observed_gt_only);
    o.finish();
  });
  root.section("model", [&](const Json& js, const std::string& p) {
    StrictObject o(js, p);
    o.get("seed", c.model.seed);
    o.get("dedup_iou", c.model.dedup_iou);
    o.section("rdpe", [&](const Json& jr, const std::string& pr) {
      auto& r = c.model.rdpe;
      StrictObject q(jr, pr);
      q.get("channels", r.channels);
      q.get("cameras", r.cameras);
      q.section("bins", [&](const Json& jb, const std::string& pb) { detail::read_bins(jb, pb, r.bins); });
      q.get("octaves_origin", r.octaves_origin);
      q.get("octaves_direction", r.octaves_direction);
      q.get("origin_scale", r.origin_scale);
      q.get("delay_scale", r.delay_scale);
      q.get("anchor_position_scale", r.anchor_position_scale);
      q.get("anchor_velocity_scale", r.anchor_velocity_scale);
      q.get("depth_scale", r.depth_scale);
      q.get("cos_floor", r.cos_floor);
      q.get("use_roe", r.use_roe);
      q.get("use_ray_encoding", r.use_ray_encoding);
      q.get("use_occupancy", r.use_occupancy);
      q.get("high_frequency", r.high_frequency);
      q.finish();
    });
    o.section("fusion", [&](const Json& jf, const std::string& pf) {
      auto& f = c.model.fusion;
      StrictObject q(jf, pf);
      q.get("channels", f.channels);
      q.get("radii", f.radii);
      q.get("global_branch_weights", f.global_branch_weights);
      q.get("ffn_multiplier", f.ffn_multiplier);
      q.get("logit_prior", f.logit_prior);
      q.get("attention_residual", f.attention_residual);
      q.finish();
    });
    o.finish();
  });
  root.section("train", [&](const Json& js, const std::string& p) {
    auto& t = c.train;
    StrictObject o(js, p);
    o.get("epochs", t.epochs);
    o.get("batch_size", t.batch_size);
    o.get("lr", t.lr);
    o.get("lr_min", t.lr_min);
    o.get("grad_clip", t.grad_clip);
    o.get("seed", t.seed);
    o.get("validate_each_epoch", t.validate_each_epoch);
    o.section("adam", [&](const Json& ja, const std::string& pa) {
      StrictObject q(ja, pa);
      q.get("beta1", t.adam.beta1);
      q.get("beta2", t.adam.beta2);
      q.get("eps", t.adam.eps);
      q.get("weight_decay", t.adam.weight_decay);
      q.finish();
    });
    o.section("match", [&](const Json& jm, const std::string& pm) {
      StrictObject q(jm, pm);
      q.get("lambda_cls", t.match.lambda_cls);
      q.get("lambda_box", t.match.lambda_box);
      q.get("max_center_distance", t.match.max_center_distance);
      q.finish();
    });
    o.section("focal", [&](const Json& jf, const std::string& pf) {
      StrictObject q(jf, pf);
      q.get("alpha", t.focal.alpha);
      q.get("gamma", t.focal.gamma);
      q.get("eps", t.focal.eps);
      q.finish();
    });
    o.section("loss", [&](const Json& jl, const std::string& pl) {
      StrictObject q(jl, pl);
      q.get("regression", t.loss.regression);
      q.get("classification", t.loss.classification);
      q.finish();
    });
    o.section("align", [&](const Json& ja, const std::string& pa) {
      StrictObject q(ja, pa);
      q.get("motion_compensation", t.align.motion_compensation);
      q.get("velocity_rotate_only", t.align.velocity_rotate_only);
      q.get("pad_ego_to", t.align.pad_ego_to);
      q.finish();
    });
    o.finish();
  });
  root.section("eval", [&](const Json& je, const std::string& p) {
    StrictObject o(je, p);
    o.get("iou_thresholds", c.eval.iou_thresholds);
    o.get("noise_sigmas", c.eval.noise_sigmas);
    o.get("delays_ms", c.eval.delays_ms);
    o.get("noise_seeds", c.eval.noise_seeds);
    o.get("ablation_variants", c.eval.ablation_variants);
    o.get("comm_m", c.eval.comm_m);
    o.finish();
  });
  root.section("splits", [&](const Json& js, const std::string& p) {
    StrictObject o(js, p);
    o.get("train", c.splits.train);
    o.get("val", c.splits.val);
    o.get("test", c.splits.test);
    o.get("seed_base", c.splits.seed_base);
    o.get("split_stride", c.splits.split_stride);
    o.finish();
  });
  root.finish();
  c.validate();
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

/// The fixed desk-scale benchmark configuration.
inline RunConfig benchmark_config() {
  RunConfig c;
  c.train.align.velocity_rotate_only = true;
  return c;
}

}  // namespace rayfusion
