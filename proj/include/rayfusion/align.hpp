#pragma once

// Spatial-temporal alignment of received instances into the ego frame at
// the ego timestamp, and merging with the ego's own instances.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "rayfusion/geometry.hpp"
#include "rayfusion/message.hpp"

namespace rayfusion {

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AlignedInstance {
  std::vector<double> feature;
  Anchor anchor;
  std::vector<RayObservation> rays;
  double delay = 0.0;  // t - tau, seconds
  int source_agent = 0;
  double confidence = 0.0;
  bool valid = true;  // false for padding slots
};

struct MergedSet {
  std::vector<AlignedInstance> instances;  // ego first, then collaborators by id
  double timestamp = 0.0;

  std::size_t valid_count() const {
    return static_cast<std::size_t>(
        std::count_if(instances.begin(), instances.end(), [](const AlignedInstance& a) { return a.valid; }));
  }
};

struct AlignConfig {
  bool motion_compensation = true;    // instance motion over t - tau
  bool velocity_rotate_only = false;  // false: velocity gets R v + T as well
  std::size_t pad_ego_to = 0;         // pad ego instances with invalid slots up to this count
};

/// Position advanced by velocity * (t - tau).
inline Anchor compensate_instance_motion(const Anchor& anchor, double t, double tau) {
  if (t < tau) throw ContractError("negative delay: ego time precedes collaborator time");
  Anchor out = anchor;
  const double dt = t - tau;
  for (int i = 0; i < 3; ++i) out.v[static_cast<std::size_t>(i)] += anchor.v[static_cast<std::size_t>(8 + i)] * dt;
  return out;
}

inline Anchor compensate_ego_motion(const Anchor& anchor, const Mat3& R, const Vec3& T, bool velocity_rotate_only = false) {
  Anchor out = anchor;
  out.set_position(R * anchor.position() + T);
  out.set_velocity(velocity_rotate_only ? Vec3(R * anchor.velocity()) : Vec3(R * anchor.velocity() + T));
  const Vec3 heading = R * Vec3(anchor.v[7], anchor.v[6], 0.0);
  const double n = heading.head<2>().norm();
  if (n < 1e-6) throw GeometryError("yaw vector degenerates under the rotation");
  out.v[6] = heading.y() / n;
  out.v[7] = heading.x() / n;
  return out;
}

/// Origins move rigidly, directions rotate only; occupancy is untouched.
inline std::vector<RayObservation> align_rays(const std::vector<RayObservation>& rays, const Mat3& R, const Vec3& T) {
  std::vector<RayObservation> out = rays;
  for (auto& obs : out) {
    obs.ray.origin = R * obs.ray.origin + T;
    obs.ray.direction = (R * obs.ray.direction).normalized();
  }
  return out;
}

/// Nearest proper rotation for a rotation that went through 32-bit storage.
inline Pose orthonormalized(const Pose& p, double tol = 1e-4) {
  if (!p.is_valid(tol)) throw GeometryError("pose rotation is not orthonormal");
  Pose out = p;
  out.rotation = Eigen::Quaterniond(p.rotation).normalized().toRotationMatrix();
  return out;
}

inline MergedSet align_and_merge(const std::vector<InstanceMessage>& ego, const std::vector<CollabMessage>& received,
                                 const Pose& ego_pose, double t, const AlignConfig& cfg = {}) {
  MergedSet merged;
  merged.timestamp = t;
  for (const auto& inst : ego) merged.instances.push_back({inst.feature, inst.anchor, inst.rays, 0.0, 0, inst.confidence, true});
  if (merged.instances.size() < cfg.pad_ego_to) {
    AlignedInstance pad;
    pad.valid = false;
    if (!ego.empty()) {
      pad.feature.assign(ego.front().feature.size(), 0.0);
      pad.rays = ego.front().rays;
      for (auto& obs : pad.rays) {
        obs.visible = false;
        std::fill(obs.rho.begin(), obs.rho.end(), 0.0);
      }
    }
    pad.anchor.v[7] = 1.0;
    merged.instances.resize(cfg.pad_ego_to, pad);
  }

  std::vector<std::size_t> order(received.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return received[a].agent_id < received[b].agent_id; });
  const Pose ego_ok = orthonormalized(ego_pose);
  for (std::size_t idx : order) {
    const CollabMessage& msg = received[idx];
    const RigidTransform tf = transform_pose_chain(orthonormalized(msg.pose), ego_ok);
    const double delay = t - msg.timestamp;
    if (delay < 0.0) throw ContractError("message from agent " + std::to_string(msg.agent_id) + " is from the future");
    for (const auto& inst : msg.instances) {
      Anchor a = cfg.motion_compensation ? compensate_instance_motion(inst.anchor, t, msg.timestamp) : inst.anchor;
      a = compensate_ego_motion(a, tf.rotation, tf.translation, cfg.velocity_rotate_only);
      merged.instances.push_back(
          {inst.feature, a, align_rays(inst.rays, tf.rotation, tf.translation), delay, msg.agent_id, inst.confidence, true});
    }
  }
  return merged;
}

}  // namespace rayfusion
