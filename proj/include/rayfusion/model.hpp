#pragma once

// The trainable stack (ray-driven encoder, aggregator, head) and the
// per-scene sample it consumes.

#include <cstdint>
#include <vector>

#include "rayfusion/align.hpp"
#include "rayfusion/fusion.hpp"
#include "rayfusion/message.hpp"
#include "rayfusion/nn.hpp"
#include "rayfusion/rdpe.hpp"
#include "rayfusion/rng.hpp"
#include "rayfusion/scene.hpp"

namespace rayfusion {

struct SampleConfig {
  std::size_t ego_instances = 64;      // N
  std::size_t message_instances = 32;  // M
  bool through_wire = true;            // received messages go through serialize/deserialize
  bool observed_gt_only = true;        // drop ground truth no agent detected
};

/// Everything the fusion stack needs from one scene, with depth maps
/// already reduced to per-instance occupancy.
struct FusionSample {
  std::uint64_t seed = 0;
  double timestamp = 0.0;
  Pose ego_pose;
  std::vector<InstanceMessage> ego;
  std::vector<CollabMessage> received;
  std::vector<Box3D> gt;  // ego frame at the ego timestamp
};

inline FusionSample make_sample(const Scene& scene, const SampleConfig& cfg) {
  if (scene.agents.empty()) throw std::invalid_argument("scene has no agents");
  FusionSample s;
  s.seed = scene.seed;
  s.timestamp = scene.timestamp;
  const AgentFrame& ego = scene.agents.front();
  s.ego_pose = ego.pose;
  s.ego = build_message(ego, cfg.ego_instances).instances;
  for (std::size_t j = 1; j < scene.agents.size(); ++j) {
    CollabMessage msg = build_message(scene.agents[j], cfg.message_instances);
    s.received.push_back(cfg.through_wire ? deserialize(serialize(msg)) : std::move(msg));
  }
  if (cfg.observed_gt_only) {
    for (std::size_t i : scene.gt.observed) s.gt.push_back(box_to_local(scene.gt.boxes[i], ego.pose));
  } else {
    for (const auto& b : scene.gt.boxes) s.gt.push_back(box_to_local(b, ego.pose));
  }
  return s;
}

/// Copy of the received messages with N(0, sigma^2) added to each
/// translation axis of every collaborator pose.
inline std::vector<CollabMessage> perturb_poses(const std::vector<CollabMessage>& received, double sigma, Rng& rng) {
  std::vector<CollabMessage> out = received;
  if (sigma <= 0.0) return out;
  for (auto& m : out)
    for (int i = 0; i < 3; ++i) m.pose.translation[i] += rng.normal(0.0, sigma);
  return out;
}

inline MergedSet merge_sample(const FusionSample& s, const AlignConfig& cfg, const std::vector<CollabMessage>* received = nullptr) {
  return align_and_merge(s.ego, received ? *received : s.received, s.ego_pose, s.timestamp, cfg);
}

struct ModelConfig {
  RdpeConfig rdpe;
  FusionConfig fusion;
  std::uint64_t seed = 0;
  double dedup_iou = 0.15;

  void validate() const {
    fusion.validate();
    if (rdpe.channels != fusion.channels) throw std::invalid_argument("rdpe and fusion channel counts differ");
    rdpe.bins.validate();
  }
};

struct ModelOutput {
  std::vector<std::size_t> rows;  // merged-set indices of the valid instances
  std::vector<Anchor> anchors;
  Tensor head;        // [n x 12]
  Tensor prediction;  // anchor encoding + deltas, [n x 11]
  Tensor logits;      // [n x 1]
};

class RayFusionModel {
 public:
  explicit RayFusionModel(const ModelConfig& cfg) : cfg_(cfg), store_(cfg.seed) {
    cfg.validate();
    rdpe_ = RayDrivenEncoder(store_, cfg.rdpe);
    fusion_ = InstanceAggregator(store_, cfg.fusion);
  }
  RayFusionModel(const RayFusionModel&) = delete;
  RayFusionModel& operator=(const RayFusionModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const RayDrivenEncoder& rdpe() const { return rdpe_; }
  const InstanceAggregator& fusion() const { return fusion_; }

  /// Forward over the valid rows of a merged set.
  ModelOutput forward(const MergedSet& merged) const {
    ModelOutput out;
    std::vector<const AlignedInstance*> inst;
    std::vector<Vec3> positions;
    std::vector<double> features, anchors;
    const std::size_t C = cfg_.rdpe.channels;
    for (std::size_t i = 0; i < merged.instances.size(); ++i) {
      const AlignedInstance& a = merged.instances[i];
      if (!a.valid) continue;
      if (a.feature.size() != C)
        throw DimensionError("instance feature width " + std::to_string(a.feature.size()) + " differs from C=" + std::to_string(C));
      out.rows.push_back(i);
      out.anchors.push_back(a.anchor);
      inst.push_back(&a);
      positions.push_back(a.anchor.position());
      features.insert(features.end(), a.feature.begin(), a.feature.end());
      anchors.insert(anchors.end(), a.anchor.v.begin(), a.anchor.v.end());
    }
    const std::size_t n = inst.size();
    if (n == 0) return out;
    const Tensor anchor_t = Tensor::from({n, kAnchorDim}, std::move(anchors));
    const PositionalEncoding pe = rdpe_.positional_encoding(inst, anchor_t);
    const Tensor input = concat({Tensor::from({n, C}, std::move(features)), pe.pe});
    const Tensor fused = fusion_.forward(input, positions, std::vector<bool>(n, true));
    out.head = fusion_.head(fused);
    out.prediction = add(anchor_t, slice_last(out.head, 0, kAnchorDim));
    out.logits = slice_last(out.head, kAnchorDim, kAnchorDim + 1);
    return out;
  }

  /// Decoded boxes for every valid row, before suppression.
  std::vector<ScoredBox> detect(const MergedSet& merged) const {
    NoGradGuard guard;
    const ModelOutput out = forward(merged);
    if (out.rows.empty()) return {};
    auto boxes = detection_head_decode(out.head, out.anchors);
    for (auto& b : boxes) b.row = out.rows[b.row];
    return boxes;
  }

  std::vector<ScoredBox> predict(const MergedSet& merged) const { return deduplicate(detect(merged), cfg_.dedup_iou); }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  RayDrivenEncoder rdpe_;
  InstanceAggregator fusion_;
};

}  // namespace rayfusion
