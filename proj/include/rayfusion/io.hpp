#pragma once

// Scene files: versioned JSON with ground truth, poses, rigs and
// detections. Depth maps go to an optional sidecar of little-endian f32
// (header: magic, version, map count, then H, W, D per map); without a
// sidecar they are rebuilt from the ground truth on load.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rayfusion/binio.hpp"
#include "rayfusion/config.hpp"
#include "rayfusion/nn.hpp"
#include "rayfusion/scene.hpp"

namespace rayfusion {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kSceneFileVersion = 1;
inline constexpr std::string_view kDepthMagic = "RFDM";
inline constexpr std::uint16_t kDepthVersion = 1;

namespace detail {

inline Json vec_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline Vec3 json_vec(const Json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Json mat_json(const Mat3& m) {
  Json a = Json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}

inline Mat3 json_mat(const Json& j) {
  if (!j.is_array() || j.size() != 9) throw DataError("expected a row-major 3x3 matrix");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j[static_cast<std::size_t>(r * 3 + c)].get<double>();
  return m;
}

inline Json pose_json(const Pose& p) {
  return {{"rotation", mat_json(p.rotation)}, {"translation", vec_json(p.translation)}, {"timestamp", p.timestamp}};
}

inline Pose json_pose(const Json& j) {
  return {json_mat(j.at("rotation")), json_vec(j.at("translation")), j.at("timestamp").get<double>()};
}

inline Json box_json(const Box3D& b) {
  return {{"center", vec_json(b.center)}, {"size", vec_json(b.size)}, {"yaw", b.yaw}, {"velocity", vec_json(b.velocity)}};
}

inline Box3D json_box(const Json& j) {
  Box3D b;
  b.center = json_vec(j.at("center"));
  b.size = json_vec(j.at("size"));
  b.yaw = j.at("yaw").get<double>();
  b.velocity = json_vec(j.at("velocity"));
  return b;
}

}  // namespace detail

inline Json scene_to_json(const Scene& scene, const SceneConfig& cfg, const std::string& depth_sidecar = {}) {
  using namespace detail;
  Json j;
  j["format"] = "rayfusion-scene";
  j["version"] = kSceneFileVersion;
  j["seed"] = scene.seed;
  j["timestamp"] = scene.timestamp;
  j["config"] = scene_config_to_json(cfg);
  Json boxes = Json::array();
  for (const auto& b : scene.gt.boxes) boxes.push_back(box_json(b));
  j["gt"] = {{"boxes", boxes}, {"ids", scene.gt.ids}, {"appearance", scene.gt.appearance}, {"observed", scene.gt.observed}};
  Json agents = Json::array();
  for (const auto& a : scene.agents) {
    Json rig = Json::array();
    for (const auto& cam : a.rig)
      rig.push_back({{"intrinsics", mat_json(cam.intrinsics)},
                     {"extrinsic", pose_json(cam.extrinsic)},
                     {"width", cam.width},
                     {"height", cam.height},
                     {"bins", detail::bins_json(cam.bins)}});
    Json dets = Json::array();
    for (const auto& d : a.detections)
      dets.push_back({{"anchor", d.anchor.v},
                      {"confidence", d.confidence},
                      {"feature", d.feature},
                      {"source", d.source},
                      {"true_positive", d.true_positive}});
    agents.push_back({{"id", a.id}, {"pose", pose_json(a.pose)}, {"rig", rig}, {"detections", dets}});
  }
  j["agents"] = agents;
  j["depth_sidecar"] = depth_sidecar.empty() ? Json() : Json(depth_sidecar);
  return j;
}

inline std::vector<std::uint8_t> encode_depth_maps(const Scene& scene) {
  ByteWriter w;
  w.put_bytes(kDepthMagic);
  w.put_u16(kDepthVersion);
  std::uint32_t count = 0;
  for (const auto& a : scene.agents) count += static_cast<std::uint32_t>(a.depth_maps.size());
  w.put_u32(count);
  for (const auto& a : scene.agents)
    for (const auto& m : a.depth_maps) {
      w.put_u32(static_cast<std::uint32_t>(m.height));
      w.put_u32(static_cast<std::uint32_t>(m.width));
      w.put_u32(static_cast<std::uint32_t>(m.bins));
      for (double p : m.probs) w.put_f32(static_cast<float>(p));
    }
  return w.take();
}

/// Fills the agents' depth maps from a sidecar buffer (agent-major,
/// camera-minor order).
inline void decode_depth_maps(const std::vector<std::uint8_t>& bytes, Scene& scene) {
  ByteReader r(bytes.data(), bytes.size());
  if (r.get_string(kDepthMagic.size()) != kDepthMagic) throw BadMagicError("not a depth sidecar");
  if (const auto v = r.get_u16(); v != kDepthVersion) throw VersionError("unsupported depth sidecar version " + std::to_string(v));
  const std::uint32_t count = r.get_u32();
  std::uint32_t expected = 0;
  for (const auto& a : scene.agents) expected += static_cast<std::uint32_t>(a.rig.size());
  if (count != expected) throw DataError("depth sidecar holds " + std::to_string(count) + " maps, scene needs " + std::to_string(expected));
  for (auto& a : scene.agents) {
    a.depth_maps.clear();
    for (std::size_t k = 0; k < a.rig.size(); ++k) {
      const int h = static_cast<int>(r.get_u32()), w = static_cast<int>(r.get_u32()), d = static_cast<int>(r.get_u32());
      if (h != a.rig[k].height || w != a.rig[k].width || d != a.rig[k].bins.count)
        throw DataError("depth map shape does not match its camera");
      DepthMap m(static_cast<int>(k), h, w, d);
      for (auto& p : m.probs) p = r.get_f32();
      a.depth_maps.push_back(std::move(m));
    }
  }
  if (r.remaining() != 0) throw DataError("trailing bytes after depth maps");
}

struct LoadedScene {
  Scene scene;
  SceneConfig config;
};

/// `sidecar_dir` resolves a relative sidecar name.
inline LoadedScene scene_from_json(const Json& j, const std::filesystem::path& sidecar_dir = {}) {
  using namespace detail;
  LoadedScene out;
  try {
    if (j.at("format").get<std::string>() != "rayfusion-scene") throw DataError("not a scene file");
    if (const int v = j.at("version").get<int>(); v != kSceneFileVersion)
      throw DataError("unsupported scene file version " + std::to_string(v));
    Scene& s = out.scene;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.timestamp = j.at("timestamp").get<double>();
    read_scene_config(j.at("config"), "scene.config", out.config);
    out.config.seed = s.seed;
    const Json& gt = j.at("gt");
    for (const auto& b : gt.at("boxes")) s.gt.boxes.push_back(json_box(b));
    s.gt.ids = gt.at("ids").get<std::vector<int>>();
    s.gt.appearance = gt.at("appearance").get<std::vector<std::vector<double>>>();
    s.gt.observed = gt.at("observed").get<std::vector<std::size_t>>();
    for (const auto& ja : j.at("agents")) {
      AgentFrame a;
      a.id = ja.at("id").get<int>();
      a.pose = json_pose(ja.at("pose"));
      for (const auto& jc : ja.at("rig")) {
        CameraModel cam;
        cam.intrinsics = json_mat(jc.at("intrinsics"));
        cam.extrinsic = json_pose(jc.at("extrinsic"));
        cam.width = jc.at("width").get<int>();
        cam.height = jc.at("height").get<int>();
        read_bins(jc.at("bins"), "camera.bins", cam.bins);
        a.rig.push_back(cam);
      }
      for (const auto& jd : ja.at("detections")) {
        Detection d;
        const auto v = jd.at("anchor").get<std::vector<double>>();
        if (v.size() != kAnchorDim) throw DataError("anchor must have 11 components");
        std::copy(v.begin(), v.end(), d.anchor.v.begin());
        d.confidence = jd.at("confidence").get<double>();
        d.feature = jd.at("feature").get<std::vector<double>>();
        d.source = jd.at("source").get<int>();
        d.true_positive = jd.at("true_positive").get<bool>();
        a.detections.push_back(std::move(d));
      }
      s.agents.push_back(std::move(a));
    }
    if (s.agents.empty()) throw DataError("scene has no agents");
    const Json& side = j.at("depth_sidecar");
    if (side.is_string()) {
      decode_depth_maps(read_file((sidecar_dir / side.get<std::string>()).string()), s);
    } else {
      for (auto& a : s.agents) rebuild_depth_maps(a, s.gt, s.timestamp, out.config.depth_blur_bins);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed scene file: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("scene config: ") + e.what());
  }
  return out;
}

inline std::string scene_file_name(std::uint64_t seed) { return "scene_" + std::to_string(seed) + ".json"; }

/// Writes `<dir>/scene_<seed>.json` (and `.depth` when requested).
inline void write_scene(const std::filesystem::path& dir, const Scene& scene, const SceneConfig& cfg, bool with_depth) {
  const std::string base = "scene_" + std::to_string(scene.seed);
  std::string sidecar;
  if (with_depth) {
    sidecar = base + ".depth";
    write_file((dir / sidecar).string(), encode_depth_maps(scene));
  }
  const std::string text = scene_to_json(scene, cfg, sidecar).dump(1) + "\n";
  write_file((dir / (base + ".json")).string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline LoadedScene read_scene(const std::filesystem::path& file) {
  const auto bytes = read_file(file.string());
  Json j;
  try {
    j = Json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(file.string() + ": " + e.what());
  }
  return scene_from_json(j, file.parent_path());
}

}  // namespace rayfusion
