#pragma once

// Synthetic multi-agent driving scenes: ground-truth vehicles, agent camera
// rigs, rasterized categorical depth maps and emulated single-agent camera
// detections that scatter along the viewing ray.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "rayfusion/geometry.hpp"
#include "rayfusion/rng.hpp"

namespace rayfusion {

class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kAnchorDim = 11;

/// [x, y, z, ln w, ln h, ln l, sin yaw, cos yaw, vx, vy, vz]
struct Anchor {
  std::array<double, kAnchorDim> v{};

  static Anchor from_box(const Box3D& b) {
    return {{b.center.x(), b.center.y(), b.center.z(), std::log(b.w()), std::log(b.h()), std::log(b.l()),
             std::sin(b.yaw), std::cos(b.yaw), b.velocity.x(), b.velocity.y(), b.velocity.z()}};
  }

  Box3D to_box() const {
    Box3D b;
    b.center = position();
    b.size = Vec3(std::exp(v[3]), std::exp(v[4]), std::exp(v[5]));
    b.yaw = std::atan2(v[6], v[7]);
    b.velocity = velocity();
    return b;
  }

  Vec3 position() const { return {v[0], v[1], v[2]}; }
  Vec3 velocity() const { return {v[8], v[9], v[10]}; }
  void set_position(const Vec3& p) { v[0] = p.x(), v[1] = p.y(), v[2] = p.z(); }
  void set_velocity(const Vec3& u) { v[8] = u.x(), v[9] = u.y(), v[10] = u.z(); }

  bool is_valid(double tol = 1e-6) const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    for (int i = 3; i < 6; ++i)
      if (!std::isfinite(std::exp(v[static_cast<std::size_t>(i)])) || !(std::exp(v[static_cast<std::size_t>(i)]) > 0.0))
        return false;
    return std::fabs(v[6] * v[6] + v[7] * v[7] - 1.0) < tol;
  }
};

struct AmbiguityConfig {
  double duplicate_rate = 1.0;       // Poisson mean of along-ray false positives per instance
  double along_ray_sigma = 0.8;      // m, true-positive depth error
  double lateral_sigma = 0.1;        // m, perpendicular to the ray
  double duplicate_offset_min = 3.0; // m along the ray
  double duplicate_offset_max = 12.0;
  double yaw_sigma = 0.03;
  double size_sigma = 0.0;           // log-size noise
  double velocity_sigma = 0.0;
  double tp_confidence_min = 0.3;
  double tp_confidence_max = 1.0;
  double dup_confidence_min = 0.25;
  double dup_confidence_max = 0.95;
  double max_range = 55.0;           // m, detection range along the ray
};

struct FeatureConfig {
  int channels = 64;        // C
  int appearance_dim = 32;
  double noise_sigma = 0.5;
  double position_scale = 1.0 / 50.0;
  double velocity_scale = 1.0 / 10.0;
};

/// Number of leading feature channels carrying the detector's box guess
/// and confidence.
inline constexpr int kFeatureHeader = static_cast<int>(kAnchorDim) + 1;

struct SceneConfig {
  std::uint64_t seed = 0;
  int num_agents = 3;  // ego plus collaborators
  int cameras_per_agent = 2;
  int num_vehicles = 14;
  double extent = 40.0;  // half-width of the square vehicle area, m
  double collab_min_distance = 10.0;
  double collab_max_distance = 35.0;
  double comm_range = 70.0;
  std::array<double, 2> width_range{1.7, 2.1};
  std::array<double, 2> height_range{1.4, 1.8};
  std::array<double, 2> length_range{3.9, 5.0};
  std::array<double, 2> speed_range{0.0, 10.0};
  std::array<double, 2> agent_speed_range{0.0, 8.0};
  double collab_delay_s = 0.0;
  double timestamp = 100.0;  // ego time t
  int image_width = 96;
  int image_height = 32;
  double hfov = 2.0 * std::numbers::pi / 3.0;
  double camera_spread = 1.2;  // yaw step between adjacent cameras, rad; 0 spaces them evenly around the agent
  double camera_height = 1.6;
  DepthBins bins{32, 0.5, 60.5};
  double depth_blur_bins = 0.6;
  AmbiguityConfig ambiguity;
  FeatureConfig features;

  void validate() const {
    if (num_agents < 2 || num_agents > 5) throw std::invalid_argument("num_agents must be in [2, 5]");
    if (cameras_per_agent < 1) throw std::invalid_argument("cameras_per_agent must be >= 1");
    if (num_vehicles < 0) throw std::invalid_argument("num_vehicles must be >= 0");
    if (!(extent > 0.0) || extent > 51.2) throw std::invalid_argument("extent must lie within the 51.2 m perception range");
    if (collab_max_distance > comm_range || collab_min_distance > collab_max_distance)
      throw std::invalid_argument("collaborator distances must satisfy min <= max <= communication range");
    if (collab_delay_s < 0.0) throw std::invalid_argument("collab_delay_s must be >= 0");
    if (depth_blur_bins < 0.0) throw std::invalid_argument("depth_blur_bins must be >= 0");
    if (features.channels < kFeatureHeader + features.appearance_dim)
      throw std::invalid_argument("feature channels too small for header plus appearance token");
    bins.validate();
  }
};

struct GroundTruth {
  std::vector<Box3D> boxes;  // world frame at the ego timestamp
  std::vector<int> ids;
  std::vector<std::vector<double>> appearance;

  /// Indices of boxes with a true-positive detection from some agent.
  std::vector<std::size_t> observed;
};

struct Detection {
  Anchor anchor;
  double confidence = 0.0;
  std::vector<double> feature;
  int source = -1;            // ground-truth index that produced it (emulator metadata)
  bool true_positive = false;
};

struct AgentFrame {
  int id = 0;
  Pose pose;  // agent -> world at the observation time
  std::vector<CameraModel> rig;
  std::vector<DepthMap> depth_maps;
  std::vector<Detection> detections;  // agent frame
  double timestamp() const { return pose.timestamp; }
};

struct Scene {
  std::uint64_t seed = 0;
  double timestamp = 0.0;
  GroundTruth gt;
  std::vector<AgentFrame> agents;  // agent 0 is the ego
};

// ---------------------------------------------------------------------------

/// Nearest box hit per pixel: z-depth in camera coordinates and box index
/// (-1 for background).
struct RasterBuffer {
  int width = 0, height = 0;
  std::vector<double> depth;
  std::vector<int> id;
  double depth_at(int row, int col) const { return depth[static_cast<std::size_t>(row * width + col)]; }
  int id_at(int row, int col) const { return id[static_cast<std::size_t>(row * width + col)]; }
};

inline RasterBuffer rasterize(const CameraModel& cam, const Pose& agent_pose, const std::vector<Box3D>& boxes) {
  RasterBuffer buf;
  buf.width = cam.width;
  buf.height = cam.height;
  const std::size_t npx = static_cast<std::size_t>(cam.width) * static_cast<std::size_t>(cam.height);
  buf.depth.assign(npx, std::numeric_limits<double>::infinity());
  buf.id.assign(npx, -1);
  const Pose cw = camera_world_pose(cam, agent_pose);

  struct Local {
    int index;
    Mat3 rt;  // world -> box rotation
    Vec3 origin;
    Vec3 half;
  };
  std::vector<Local> cand;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box3D& b = boxes[i];
    bool ahead = false;
    for (const auto& c : b.corners()) ahead = ahead || cw.inverse_apply(c).z() > 0.0;
    if (!ahead) continue;
    const Mat3 rt = rot_z(b.yaw).transpose();
    cand.push_back({static_cast<int>(i), rt, rt * (cw.translation - b.center), Vec3(0.5 * b.l(), 0.5 * b.w(), 0.5 * b.h())});
  }
  if (cand.empty()) return buf;
  const Mat3 kinv = cam.intrinsics.inverse();
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) {
      const Vec3 dir_world = cw.rotation * (kinv * Vec3(c, r, 1.0));  // camera z component is 1
      double best = std::numeric_limits<double>::infinity();
      int best_id = -1;
      for (const auto& b : cand) {
        const Vec3 d = b.rt * dir_world;
        double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
        bool miss = false;
        for (int k = 0; k < 3 && !miss; ++k) {
          if (std::fabs(d[k]) < 1e-12) {
            miss = std::fabs(b.origin[k]) > b.half[k];
            continue;
          }
          double ta = (-b.half[k] - b.origin[k]) / d[k];
          double tb = (b.half[k] - b.origin[k]) / d[k];
          if (ta > tb) std::swap(ta, tb);
          t0 = std::max(t0, ta);
          t1 = std::min(t1, tb);
          miss = t0 > t1;
        }
        if (miss || t0 <= 0.0) continue;
        if (t0 < best) {
          best = t0;
          best_id = b.index;
        }
      }
      const std::size_t px = static_cast<std::size_t>(r * cam.width + c);
      buf.depth[px] = best;
      buf.id[px] = best_id;
    }
  return buf;
}

namespace detail {

inline constexpr double kBackgroundTail = 0.05;

inline void depth_bump(double* out, int bins, double pos, double sigma, double tail) {
  if (sigma <= 0.0) {
    const int k = std::clamp(static_cast<int>(std::lround(pos)), 0, bins - 1);
    for (int i = 0; i < bins; ++i) out[i] = i == k ? 1.0 : 0.0;
    return;
  }
  double total = 0.0;
  for (int i = 0; i < bins; ++i) {
    const double z = (i - pos) / sigma;
    out[i] = std::exp(-0.5 * z * z);
    total += out[i];
  }
  for (int i = 0; i < bins; ++i) out[i] = (1.0 - tail) * out[i] / total + tail / bins;
}

}  // namespace detail

inline DepthMap depth_map_from_raster(const CameraModel& cam, int camera_index, const RasterBuffer& raster,
                                      double blur_bins) {
  const int nb = cam.bins.count;
  DepthMap map(camera_index, cam.height, cam.width, nb);
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) {
      const double z = raster.depth_at(r, c);
      if (std::isfinite(z)) {
        const double pos = (z - cam.bins.d_min) / cam.bins.width() - 0.5;
        detail::depth_bump(map.at(r, c), nb, pos, blur_bins, 0.0);
      } else {
        detail::depth_bump(map.at(r, c), nb, nb - 1, blur_bins, blur_bins > 0.0 ? detail::kBackgroundTail : 0.0);
      }
    }
  return map;
}

/// Per-pixel categorical depth: a Gaussian bump (width in bins) at the
/// nearest box surface, or at the far bin for background pixels.
inline DepthMap synthesize_depth_map(const CameraModel& cam, const Pose& agent_pose, const GroundTruth& gt,
                                     double blur_bins, int camera_index = 0) {
  if (blur_bins < 0.0) throw std::invalid_argument("blur must be >= 0");
  return depth_map_from_raster(cam, camera_index, rasterize(cam, agent_pose, gt.boxes), blur_bins);
}

/// Box expressed in an agent frame (planar agents).
inline Box3D box_to_local(const Box3D& b, const Pose& agent_pose) {
  Box3D out = b;
  out.center = agent_pose.inverse_apply(b.center);
  out.velocity = agent_pose.rotation.transpose() * b.velocity;
  const Vec3 heading = agent_pose.rotation.transpose() * Vec3(std::cos(b.yaw), std::sin(b.yaw), 0.0);
  out.yaw = std::atan2(heading.y(), heading.x());
  return out;
}

inline std::vector<double> detection_feature(const Anchor& a, double confidence, const std::vector<double>& token,
                                             const FeatureConfig& fc, Rng& rng) {
  std::vector<double> f(static_cast<std::size_t>(fc.channels), 0.0);
  for (std::size_t i = 0; i < kAnchorDim; ++i) f[i] = a.v[i];
  for (int i = 0; i < 3; ++i) {
    f[static_cast<std::size_t>(i)] *= fc.position_scale;
    f[static_cast<std::size_t>(8 + i)] *= fc.velocity_scale;
  }
  f[kAnchorDim] = confidence;
  for (int i = 0; i < fc.appearance_dim; ++i)
    f[static_cast<std::size_t>(kFeatureHeader + i)] = token[static_cast<std::size_t>(i)] + rng.normal(0.0, fc.noise_sigma);
  return f;
}

namespace detail {

struct Visibility {
  int camera = -1;
  double axis_angle = 0.0;
};

inline bool in_any_view(const std::vector<CameraModel>& rig, const Vec3& p_local) {
  for (const auto& cam : rig)
    if (project_point(cam, Pose{}, p_local).in_view) return true;
  return false;
}

}  // namespace detail

/// Detector emulation for one agent. Boxes are world-frame at the agent's
/// observation time; outputs are agent-frame. `rasters` holds one buffer per
/// camera (for occlusion tests).
inline std::vector<Detection> emulate_detections(const std::vector<CameraModel>& rig, const Pose& agent_pose,
                                                 const GroundTruth& gt, const std::vector<Box3D>& boxes_at_obs,
                                                 const std::vector<RasterBuffer>& rasters,
                                                 const AmbiguityConfig& amb, const FeatureConfig& fc, Rng& rng) {
  std::vector<Detection> out;
  const Vec3 up = Vec3::UnitZ();
  for (std::size_t i = 0; i < boxes_at_obs.size(); ++i) {
    const Box3D local = box_to_local(boxes_at_obs[i], agent_pose);
    detail::Visibility vis;
    for (std::size_t k = 0; k < rig.size(); ++k) {
      const Projection pr = project_point(rig[k], Pose{}, local.center);
      if (!pr.in_view) continue;
      const Ray ray = ray_to_instance(rig[k], Pose{}, local.center);
      if ((local.center - ray.origin).norm() > amb.max_range) continue;
      const int col = static_cast<int>(std::lround(pr.pixel.x()));
      const int row = static_cast<int>(std::lround(pr.pixel.y()));
      if (rasters[k].id_at(row, col) != static_cast<int>(i)) continue;
      if (vis.camera < 0 || ray.axis_angle < vis.axis_angle) vis = {static_cast<int>(k), ray.axis_angle};
    }
    if (vis.camera < 0) continue;

    const CameraModel& cam = rig[static_cast<std::size_t>(vis.camera)];
    const Vec3 o = cam.extrinsic.translation;
    const Vec3 u = (local.center - o).normalized();
    Vec3 e1 = u.cross(up);
    e1 = e1.norm() > 1e-9 ? e1.normalized() : Vec3::UnitX();
    const Vec3 e2 = e1.cross(u);
    const double range = (local.center - o).norm();
    const auto& token = gt.appearance[i];

    auto emit = [&](const Vec3& center, double confidence, bool is_tp) {
      Box3D b = local;
      b.center = center;
      b.yaw = local.yaw + (amb.yaw_sigma > 0.0 ? rng.normal(0.0, amb.yaw_sigma) : 0.0);
      if (amb.size_sigma > 0.0)
        for (int k = 0; k < 3; ++k) b.size[k] = std::exp(std::log(b.size[k]) + rng.normal(0.0, amb.size_sigma));
      if (amb.velocity_sigma > 0.0) {
        b.velocity.x() += rng.normal(0.0, amb.velocity_sigma);
        b.velocity.y() += rng.normal(0.0, amb.velocity_sigma);
      }
      Detection d;
      d.anchor = Anchor::from_box(b);
      d.confidence = confidence;
      d.feature = detection_feature(d.anchor, confidence, token, fc, rng);
      d.source = static_cast<int>(i);
      d.true_positive = is_tp;
      out.push_back(std::move(d));
    };
    auto lateral = [&]() {
      if (amb.lateral_sigma <= 0.0) return Vec3(Vec3::Zero());
      return Vec3(rng.normal(0.0, amb.lateral_sigma) * e1 + rng.normal(0.0, amb.lateral_sigma) * e2);
    };

    Vec3 tp = local.center;
    for (int attempt = 0; attempt < 8; ++attempt) {
      const double along = amb.along_ray_sigma > 0.0 ? rng.normal(0.0, amb.along_ray_sigma) : 0.0;
      const Vec3 cand = local.center + along * u + lateral();
      if (detail::in_any_view(rig, cand)) {
        tp = cand;
        break;
      }
    }
    emit(tp, rng.uniform(amb.tp_confidence_min, amb.tp_confidence_max), true);

    const int dups = rng.poisson(amb.duplicate_rate);
    for (int k = 0; k < dups; ++k) {
      double s = rng.uniform(amb.duplicate_offset_min, amb.duplicate_offset_max);
      if (rng.uniform() < 0.5 && range - s > 2.0) s = -s;
      emit(local.center + s * u + lateral(), rng.uniform(amb.dup_confidence_min, amb.dup_confidence_max), false);
    }
  }
  return out;
}

inline std::vector<CameraModel> make_rig(const SceneConfig& cfg) {
  std::vector<CameraModel> rig;
  const int n = cfg.cameras_per_agent;
  for (int k = 0; k < n; ++k) {
    const double yaw = cfg.camera_spread > 0.0 ? cfg.camera_spread * (k - 0.5 * (n - 1)) : 2.0 * std::numbers::pi * k / n;
    rig.push_back(CameraModel::mounted(yaw, cfg.hfov, cfg.image_width, cfg.image_height, cfg.camera_height, cfg.bins));
  }
  return rig;
}

/// Deterministic in `cfg` (including its seed). Ego is agent 0, located at
/// the world origin. Collaborators observe the world at t - collab_delay_s.
inline Scene generate_scene(const SceneConfig& cfg, bool keep_depth_maps = true) {
  cfg.validate();
  Scene scene;
  scene.seed = cfg.seed;
  scene.timestamp = cfg.timestamp;
  Rng layout(named_seed(cfg.seed, "layout"));
  constexpr double pi = std::numbers::pi;

  struct AgentState {
    double x, y, yaw, speed;
  };
  std::vector<AgentState> agents;
  agents.push_back({0.0, 0.0, layout.uniform(-pi, pi), layout.uniform(cfg.agent_speed_range[0], cfg.agent_speed_range[1])});
  for (int j = 1; j < cfg.num_agents; ++j) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double r = layout.uniform(cfg.collab_min_distance, cfg.collab_max_distance);
      const double th = layout.uniform(-pi, pi);
      const AgentState a{r * std::cos(th), r * std::sin(th), layout.uniform(-pi, pi),
                         layout.uniform(cfg.agent_speed_range[0], cfg.agent_speed_range[1])};
      placed = true;
      for (const auto& o : agents) placed = placed && std::hypot(a.x - o.x, a.y - o.y) > 8.0;
      if (placed) agents.push_back(a);
    }
    if (!placed) throw CapacityError("could not place collaborator " + std::to_string(j));
  }

  for (int i = 0; i < cfg.num_vehicles; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
      Box3D b;
      const double w = layout.uniform(cfg.width_range[0], cfg.width_range[1]);
      const double h = layout.uniform(cfg.height_range[0], cfg.height_range[1]);
      const double l = layout.uniform(cfg.length_range[0], cfg.length_range[1]);
      b.size = Vec3(w, h, l);
      b.center = Vec3(layout.uniform(-cfg.extent, cfg.extent), layout.uniform(-cfg.extent, cfg.extent), 0.5 * h);
      b.yaw = layout.uniform(-pi, pi);
      const double speed = layout.uniform(cfg.speed_range[0], cfg.speed_range[1]);
      b.velocity = Vec3(speed * std::cos(b.yaw), speed * std::sin(b.yaw), 0.0);
      placed = true;
      for (const auto& a : agents) placed = placed && std::hypot(b.center.x() - a.x, b.center.y() - a.y) > 4.5;
      for (const auto& o : scene.gt.boxes) placed = placed && rotated_bev_iou(b, o) == 0.0;
      if (placed) {
        scene.gt.boxes.push_back(b);
        scene.gt.ids.push_back(i);
      }
    }
    if (!placed) throw CapacityError("could not place vehicle " + std::to_string(i) + " without overlap");
  }
  for (std::size_t i = 0; i < scene.gt.boxes.size(); ++i) {
    std::vector<double> token(static_cast<std::size_t>(cfg.features.appearance_dim));
    for (auto& v : token) v = layout.normal();
    scene.gt.appearance.push_back(std::move(token));
  }

  const auto rig = make_rig(cfg);
  for (int j = 0; j < cfg.num_agents; ++j) {
    const auto& st = agents[static_cast<std::size_t>(j)];
    const double delay = j == 0 ? 0.0 : cfg.collab_delay_s;
    AgentFrame frame;
    frame.id = j;
    frame.pose = Pose::planar(st.x - st.speed * std::cos(st.yaw) * delay, st.y - st.speed * std::sin(st.yaw) * delay,
                              st.yaw, 0.0, cfg.timestamp - delay);
    frame.rig = rig;
    std::vector<Box3D> boxes = scene.gt.boxes;
    for (auto& b : boxes) b.center -= b.velocity * delay;
    std::vector<RasterBuffer> rasters;
    for (std::size_t k = 0; k < rig.size(); ++k) {
      rasters.push_back(rasterize(rig[k], frame.pose, boxes));
      if (keep_depth_maps)
        frame.depth_maps.push_back(depth_map_from_raster(rig[k], static_cast<int>(k), rasters.back(), cfg.depth_blur_bins));
    }
    Rng rng(named_seed(cfg.seed, "agent" + std::to_string(j)));
    frame.detections = emulate_detections(rig, frame.pose, scene.gt, boxes, rasters, cfg.ambiguity, cfg.features, rng);
    scene.agents.push_back(std::move(frame));
  }
  std::vector<bool> seen(scene.gt.boxes.size(), false);
  for (const auto& a : scene.agents)
    for (const auto& d : a.detections)
      if (d.true_positive) seen[static_cast<std::size_t>(d.source)] = true;
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (seen[i]) scene.gt.observed.push_back(i);
  return scene;
}

/// Recomputes an agent's depth maps from the ground truth (they are a pure
/// function of the boxes, the pose and the blur).
inline void rebuild_depth_maps(AgentFrame& frame, const GroundTruth& gt, double scene_time, double blur_bins) {
  const double delay = scene_time - frame.timestamp();
  std::vector<Box3D> boxes = gt.boxes;
  for (auto& b : boxes) b.center -= b.velocity * delay;
  frame.depth_maps.clear();
  for (std::size_t k = 0; k < frame.rig.size(); ++k)
    frame.depth_maps.push_back(
        depth_map_from_raster(frame.rig[k], static_cast<int>(k), rasterize(frame.rig[k], frame.pose, boxes), blur_bins));
}

}  // namespace rayfusion
