#pragma once

// Collaborative messages: per-instance features, anchors and per-camera ray
// occupancy, top-M selection, and the versioned little-endian wire format.
//
// Wire layout (version 1):
//   header   "RFMS" u16 version, u16 C, u16 D, u16 kappa, u32 agent id,
//            f64 timestamp, 12 x f32 pose (rotation row-major, translation),
//            u32 instance count                                   = 76 bytes
//   instance f32 confidence, 11 x f32 anchor, C x f16 feature,
//            kappa x { u8 visible, 3 x f32 origin, 3 x f32 direction,
//                      f32 axis angle, D x f16 occupancy }
//   => 4 + 44 + 2C + kappa * (1 + 28 + 2D) bytes per instance.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "rayfusion/binio.hpp"
#include "rayfusion/geometry.hpp"
#include "rayfusion/scene.hpp"
#include "rayfusion/tensor.hpp"

namespace rayfusion {

struct RayObservation {
  Ray ray;
  std::vector<double> rho;  // D bins; all zero when not visible
  int camera = 0;
  bool visible = false;
};

struct InstanceMessage {
  std::vector<double> feature;
  Anchor anchor;
  std::vector<RayObservation> rays;  // one slot per camera
  double confidence = 0.0;
};

struct CollabMessage {
  int agent_id = 0;
  Pose pose;
  double timestamp = 0.0;
  std::vector<InstanceMessage> instances;  // descending confidence
};

/// Per-camera projection of the anchor center onto that camera's depth map.
/// The anchor is in the frame's agent coordinates.
inline std::vector<RayObservation> compute_ray_occupancy(const AgentFrame& frame, const Anchor& anchor) {
  if (frame.depth_maps.size() != frame.rig.size())
    throw std::invalid_argument("agent frame needs one depth map per camera");
  std::vector<RayObservation> out;
  const Vec3 p = anchor.position();
  for (std::size_t k = 0; k < frame.rig.size(); ++k) {
    const CameraModel& cam = frame.rig[k];
    RayObservation obs;
    obs.camera = static_cast<int>(k);
    const Projection pr = project_point(cam, Pose{}, p);
    if ((p - cam.extrinsic.translation).norm() > kMinRayLength) obs.ray = ray_to_instance(cam, Pose{}, p);
    obs.visible = pr.in_view;
    if (obs.visible)
      obs.rho = bilinear_sample(frame.depth_maps[k], pr.pixel);
    else
      obs.rho.assign(static_cast<std::size_t>(cam.bins.count), 0.0);
    out.push_back(std::move(obs));
  }
  return out;
}

/// Top-`max_instances` detections by confidence (ties keep detection order).
inline CollabMessage build_message(const AgentFrame& frame, std::size_t max_instances) {
  if (max_instances < 1) throw std::invalid_argument("message size M must be >= 1");
  std::vector<std::size_t> order(frame.detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return frame.detections[a].confidence > frame.detections[b].confidence;
  });
  if (order.size() > max_instances) order.resize(max_instances);
  CollabMessage msg;
  msg.agent_id = frame.id;
  msg.pose = frame.pose;
  msg.timestamp = frame.timestamp();
  for (std::size_t i : order) {
    const Detection& d = frame.detections[i];
    msg.instances.push_back({d.feature, d.anchor, compute_ray_occupancy(frame, d.anchor), d.confidence});
  }
  return msg;
}

// ---------------------------------------------------------------------------
// Wire format

inline constexpr std::string_view kMessageMagic = "RFMS";
inline constexpr std::uint16_t kMessageVersion = 1;
inline constexpr std::size_t kMessageHeaderBytes = 4 + 2 + 2 + 2 + 2 + 4 + 8 + 48 + 4;

inline std::size_t instance_wire_bytes(std::size_t channels, std::size_t bins, std::size_t cameras) {
  return 4 + 4 * kAnchorDim + 2 * channels + cameras * (1 + 28 + 2 * bins);
}

inline std::size_t message_wire_bytes(std::size_t channels, std::size_t bins, std::size_t cameras, std::size_t count) {
  return kMessageHeaderBytes + count * instance_wire_bytes(channels, bins, cameras);
}

inline void put_half(ByteWriter& w, double v) {
  w.put_u16(Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(static_cast<float>(v))));
}
inline double get_half(ByteReader& r) {
  return static_cast<double>(static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(r.get_u16())));
}

/// Rounds a value through the wire's 16-bit float.
inline double quantize_half(double v) { return static_cast<double>(static_cast<float>(Eigen::half(static_cast<float>(v)))); }

inline std::vector<std::uint8_t> serialize(const CollabMessage& msg) {
  std::size_t channels = 0, cameras = 0, bins = 0;
  if (!msg.instances.empty()) {
    channels = msg.instances.front().feature.size();
    cameras = msg.instances.front().rays.size();
    bins = cameras ? msg.instances.front().rays.front().rho.size() : 0;
  }
  ByteWriter w;
  w.bytes().reserve(message_wire_bytes(channels, bins, cameras, msg.instances.size()));
  w.put_bytes(kMessageMagic);
  w.put_u16(kMessageVersion);
  w.put_u16(static_cast<std::uint16_t>(channels));
  w.put_u16(static_cast<std::uint16_t>(bins));
  w.put_u16(static_cast<std::uint16_t>(cameras));
  w.put_u32(static_cast<std::uint32_t>(msg.agent_id));
  w.put_f64(msg.timestamp);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) w.put_f32(static_cast<float>(msg.pose.rotation(r, c)));
  for (int i = 0; i < 3; ++i) w.put_f32(static_cast<float>(msg.pose.translation[i]));
  w.put_u32(static_cast<std::uint32_t>(msg.instances.size()));
  for (const auto& inst : msg.instances) {
    if (inst.feature.size() != channels)
      throw DimensionError("instance feature has " + std::to_string(inst.feature.size()) + " channels, header says " +
                           std::to_string(channels));
    if (inst.rays.size() != cameras) throw DimensionError("instance camera count differs from header");
    w.put_f32(static_cast<float>(inst.confidence));
    for (double v : inst.anchor.v) w.put_f32(static_cast<float>(v));
    for (double v : inst.feature) put_half(w, v);
    for (const auto& obs : inst.rays) {
      if (obs.rho.size() != bins) throw DimensionError("occupancy vector length differs from header D");
      w.put_u8(obs.visible ? 1 : 0);
      for (int i = 0; i < 3; ++i) w.put_f32(static_cast<float>(obs.ray.origin[i]));
      for (int i = 0; i < 3; ++i) w.put_f32(static_cast<float>(obs.ray.direction[i]));
      w.put_f32(static_cast<float>(obs.ray.axis_angle));
      for (double v : obs.rho) put_half(w, v);
    }
  }
  return w.take();
}

/// Inverse of serialize. Visible occupancy vectors are renormalized after
/// dequantization; every 32-bit field is reproduced exactly.
inline CollabMessage deserialize(const std::uint8_t* data, std::size_t size) {
  ByteReader r(data, size);
  if (r.get_string(4) != kMessageMagic) throw BadMagicError("not a collaborative message (bad magic)");
  if (const auto v = r.get_u16(); v != kMessageVersion)
    throw VersionError("unsupported message version " + std::to_string(v));
  const std::size_t channels = r.get_u16(), bins = r.get_u16(), cameras = r.get_u16();
  CollabMessage msg;
  msg.agent_id = static_cast<int>(r.get_u32());
  msg.timestamp = r.get_f64();
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 3; ++c) msg.pose.rotation(i, c) = r.get_f32();
  for (int i = 0; i < 3; ++i) msg.pose.translation[i] = r.get_f32();
  msg.pose.timestamp = msg.timestamp;
  const std::size_t count = r.get_u32();
  if (r.remaining() != count * instance_wire_bytes(channels, bins, cameras)) {
    if (r.remaining() < count * instance_wire_bytes(channels, bins, cameras))
      throw TruncationError("message truncated: " + std::to_string(count) + " instances announced");
    throw ParseError("trailing bytes after message payload");
  }
  msg.instances.resize(count);
  for (auto& inst : msg.instances) {
    inst.confidence = r.get_f32();
    for (auto& v : inst.anchor.v) v = r.get_f32();
    inst.feature.resize(channels);
    for (auto& v : inst.feature) v = get_half(r);
    inst.rays.resize(cameras);
    for (std::size_t k = 0; k < cameras; ++k) {
      auto& obs = inst.rays[k];
      obs.camera = static_cast<int>(k);
      obs.visible = r.get_u8() != 0;
      for (int i = 0; i < 3; ++i) obs.ray.origin[i] = r.get_f32();
      for (int i = 0; i < 3; ++i) obs.ray.direction[i] = r.get_f32();
      obs.ray.axis_angle = r.get_f32();
      obs.rho.resize(bins);
      double total = 0.0;
      for (auto& v : obs.rho) total += (v = get_half(r));
      if (obs.visible && total > 0.0)
        for (auto& v : obs.rho) v /= total;
    }
  }
  return msg;
}

inline CollabMessage deserialize(const std::vector<std::uint8_t>& bytes) { return deserialize(bytes.data(), bytes.size()); }

// Capture files: "RFCP", u16 version, then (u32 length, message bytes)*.
inline constexpr std::string_view kCaptureMagic = "RFCP";
inline constexpr std::uint16_t kCaptureVersion = 1;

inline std::vector<std::uint8_t> encode_capture(const std::vector<CollabMessage>& messages) {
  ByteWriter w;
  w.put_bytes(kCaptureMagic);
  w.put_u16(kCaptureVersion);
  for (const auto& m : messages) {
    auto bytes = serialize(m);
    w.put_u32(static_cast<std::uint32_t>(bytes.size()));
    w.put_bytes(bytes);
  }
  return w.take();
}

inline std::vector<CollabMessage> decode_capture(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.get_string(4) != kCaptureMagic) throw BadMagicError("not a capture file (bad magic)");
  if (const auto v = r.get_u16(); v != kCaptureVersion)
    throw VersionError("unsupported capture version " + std::to_string(v));
  std::vector<CollabMessage> out;
  while (r.remaining() > 0) {
    const std::size_t len = r.get_u32();
    const std::uint8_t* p = r.skip(len);
    out.push_back(deserialize(p, len));
  }
  return out;
}

}  // namespace rayfusion
