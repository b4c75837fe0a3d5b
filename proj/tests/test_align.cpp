#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "rayfusion/align.hpp"

using namespace rayfusion;
using std::numbers::pi;

namespace {

Anchor make_anchor(const Vec3& p, double yaw, const Vec3& v = Vec3::Zero()) {
  Box3D b;
  b.center = p;
  b.size = Vec3(1.8, 1.5, 4.5);
  b.yaw = yaw;
  b.velocity = v;
  return Anchor::from_box(b);
}

InstanceMessage instance(const Anchor& a, Rng& rng) {
  InstanceMessage m;
  m.anchor = a;
  m.confidence = rng.uniform();
  m.feature.resize(8);
  for (auto& f : m.feature) f = rng.normal();
  RayObservation obs;
  obs.ray.origin = Vec3(0.1, 0, 1.6);
  obs.ray.direction = (a.position() - obs.ray.origin).normalized();
  obs.visible = true;
  obs.rho.assign(4, 0.25);
  m.rays = {obs};
  return m;
}

CollabMessage message(int id, const Pose& pose, double stamp, std::vector<InstanceMessage> inst) {
  CollabMessage m;
  m.agent_id = id;
  m.pose = pose;
  m.pose.timestamp = stamp;
  m.timestamp = stamp;
  m.instances = std::move(inst);
  return m;
}

}  // namespace

TEST(InstanceMotion, Examples) {
  const Anchor a = make_anchor(Vec3(1, 2, 0.7), 0.4, Vec3(1, 0, 0));
  EXPECT_EQ(compensate_instance_motion(a, 5.0, 5.0).v, a.v);
  const Anchor b = compensate_instance_motion(a, 5.1, 5.0);
  EXPECT_NEAR(b.v[0], 1.1, 1e-12);
  EXPECT_EQ(b.v[1], 2.0);
  const Anchor c = compensate_instance_motion(make_anchor(Vec3(0, 0, 0), 0, Vec3(2, -3, 0)), 1.5, 1.0);
  EXPECT_DOUBLE_EQ(c.v[0], 1.0);
  EXPECT_DOUBLE_EQ(c.v[1], -1.5);
  EXPECT_THROW(compensate_instance_motion(a, 1.0, 1.5), ContractError);
}

TEST(EgoMotion, IdentityAndQuarterTurn) {
  const Anchor a = make_anchor(Vec3(3, -1, 0.8), 0.0, Vec3(2, 1, 0));
  EXPECT_EQ(compensate_ego_motion(a, Mat3::Identity(), Vec3::Zero()).v, a.v);
  const Anchor r = compensate_ego_motion(a, rot_z(pi / 2), Vec3::Zero(), true);
  EXPECT_NEAR(r.to_box().yaw, pi / 2, 1e-12);
  EXPECT_LT((r.position() - Vec3(1, 3, 0.8)).norm(), 1e-12);
  EXPECT_LT((r.velocity() - Vec3(-1, 2, 0)).norm(), 1e-12);
}

TEST(EgoMotion, VelocityTranslationTermIsOptional) {
  const Anchor a = make_anchor(Vec3(0, 0, 0), 0.0, Vec3(2, 1, 0));
  const Vec3 T(5, 6, 0);
  EXPECT_LT((compensate_ego_motion(a, Mat3::Identity(), T, false).velocity() - Vec3(7, 7, 0)).norm(), 1e-12);
  EXPECT_LT((compensate_ego_motion(a, Mat3::Identity(), T, true).velocity() - Vec3(2, 1, 0)).norm(), 1e-12);
}

TEST(EgoMotion, CornersMatchRigidTransform) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Anchor a = make_anchor(Vec3(rng.uniform(-20, 20), rng.uniform(-20, 20), 0.8), rng.uniform(-pi, pi));
    const Mat3 R = rot_z(rng.uniform(-pi, pi));
    const Vec3 T(rng.uniform(-9, 9), rng.uniform(-9, 9), 0);
    const Anchor b = compensate_ego_motion(a, R, T);
    EXPECT_NEAR(b.v[6] * b.v[6] + b.v[7] * b.v[7], 1.0, 1e-12);
    const auto ca = a.to_box().corners(), cb = b.to_box().corners();
    // Corner order follows the box axes, so corners map one-to-one.
    for (std::size_t k = 0; k < 8; ++k) EXPECT_LT((R * ca[k] + T - cb[k]).norm(), 1e-9);
  }
}

TEST(AlignRays, IdentityNormAndIncidence) {
  Rng rng(2);
  InstanceMessage m = instance(make_anchor(Vec3(10, 3, 0.8), 0.2), rng);
  const auto same = align_rays(m.rays, Mat3::Identity(), Vec3::Zero());
  EXPECT_EQ(same[0].ray.origin, m.rays[0].ray.origin);
  EXPECT_LT((same[0].ray.direction - m.rays[0].ray.direction).norm(), 1e-15);
  for (int i = 0; i < 100; ++i) {
    const Mat3 R = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized().toRotationMatrix();
    const Vec3 T(rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-9, 9));
    const auto out = align_rays(m.rays, R, T);
    EXPECT_NEAR(out[0].ray.direction.norm(), 1.0, 1e-14);
    EXPECT_EQ(out[0].rho, m.rays[0].rho);
    const double lambda = rng.uniform(0, 30);
    const Vec3 q = R * (m.rays[0].ray.origin + lambda * m.rays[0].ray.direction) + T;
    const Vec3 w = q - out[0].ray.origin;
    EXPECT_LT((w - w.dot(out[0].ray.direction) * out[0].ray.direction).norm(), 1e-9);
  }
}

TEST(Merge, NoCollaboratorsKeepsEgo) {
  Rng rng(3);
  const std::vector<InstanceMessage> ego{instance(make_anchor(Vec3(5, 0, 0.8), 0.1), rng)};
  const MergedSet m = align_and_merge(ego, {}, Pose::planar(1, 2, 0.3, 0, 10), 10.0);
  ASSERT_EQ(m.instances.size(), 1u);
  EXPECT_EQ(m.instances[0].anchor.v, ego[0].anchor.v);
  EXPECT_EQ(m.instances[0].delay, 0.0);
}

TEST(Merge, IdenticalPoseZeroDelayIsIdentity) {
  Rng rng(4);
  const Pose pose = Pose::planar(4, -7, 1.1, 0, 20);
  std::vector<InstanceMessage> sent;
  for (int i = 0; i < 10; ++i)
    sent.push_back(instance(make_anchor(Vec3(rng.uniform(-20, 20), rng.uniform(-20, 20), 0.8), rng.uniform(-pi, pi),
                                        Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), 0)),
                            rng));
  const MergedSet m = align_and_merge({}, {message(1, pose, 20, sent)}, pose, 20.0);
  ASSERT_EQ(m.instances.size(), sent.size());
  for (std::size_t i = 0; i < sent.size(); ++i) {
    for (std::size_t k = 0; k < kAnchorDim; ++k) EXPECT_NEAR(m.instances[i].anchor.v[k], sent[i].anchor.v[k], 1e-12);
    EXPECT_EQ(m.instances[i].feature, sent[i].feature);
    EXPECT_EQ(m.instances[i].source_agent, 1);
  }
}

TEST(Merge, ConstantVelocityRecoveredAfterDelay) {
  Rng rng(5);
  const double t = 50.0, tau = 49.5;
  const Pose ego = Pose::planar(0, 0, 0.3, 0, t);
  const Pose collab = Pose::planar(12, -5, -1.2, 0, tau);
  AlignConfig cfg;
  cfg.velocity_rotate_only = true;
  for (int i = 0; i < 50; ++i) {
    Box3D truth;  // world frame at t
    truth.center = Vec3(rng.uniform(-30, 30), rng.uniform(-30, 30), 0.8);
    truth.size = Vec3(1.8, 1.5, 4.5);
    truth.yaw = rng.uniform(-pi, pi);
    truth.velocity = Vec3(rng.uniform(-10, 10), rng.uniform(-10, 10), 0);
    Box3D then = truth;
    then.center -= truth.velocity * (t - tau);
    const Anchor seen = Anchor::from_box(box_to_local(then, collab));
    const MergedSet m = align_and_merge({}, {message(2, collab, tau, {instance(seen, rng)})}, ego, t, cfg);
    const Box3D want = box_to_local(truth, ego);
    EXPECT_LT((m.instances[0].anchor.position() - want.center).norm(), 1e-9);
    EXPECT_LT((m.instances[0].anchor.velocity() - want.velocity).norm(), 1e-9);
    EXPECT_NEAR(m.instances[0].delay, 0.5, 1e-12);
  }
}

TEST(Merge, ChainThroughIntermediateFrameCommutes) {
  Rng rng(6);
  const Pose a = Pose::planar(10, 3, 0.7, 0, 5), b = Pose::planar(-4, 8, -2.1, 0, 5), c = Pose::planar(1, -6, 2.9, 0, 5);
  std::vector<InstanceMessage> sent;
  for (int i = 0; i < 5; ++i) sent.push_back(instance(make_anchor(Vec3(rng.uniform(-20, 20), rng.uniform(-20, 20), 0.8), rng.uniform(-pi, pi)), rng));
  const MergedSet in_b = align_and_merge({}, {message(1, a, 5, sent)}, b, 5.0);
  std::vector<InstanceMessage> relay;
  for (const auto& x : in_b.instances) relay.push_back({x.feature, x.anchor, x.rays, x.confidence});
  const MergedSet via_b = align_and_merge({}, {message(2, b, 5, relay)}, c, 5.0);
  const MergedSet direct = align_and_merge({}, {message(1, a, 5, sent)}, c, 5.0);
  for (std::size_t i = 0; i < sent.size(); ++i) {
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(via_b.instances[i].anchor.v[k], direct.instances[i].anchor.v[k], 1e-9);
    EXPECT_LT((via_b.instances[i].rays[0].ray.origin - direct.instances[i].rays[0].ray.origin).norm(), 1e-9);
  }
}

TEST(Merge, OrderedByAgentIdAndPadded) {
  Rng rng(7);
  const Pose p = Pose::planar(0, 0, 0, 0, 3);
  const auto i1 = instance(make_anchor(Vec3(1, 0, 0.8), 0), rng), i2 = instance(make_anchor(Vec3(2, 0, 0.8), 0), rng);
  AlignConfig cfg;
  cfg.pad_ego_to = 4;
  const MergedSet m = align_and_merge({i1}, {message(3, p, 3, {i2}), message(1, p, 3, {i1})}, p, 3.0, cfg);
  ASSERT_EQ(m.instances.size(), 6u);
  EXPECT_EQ(m.valid_count(), 3u);
  for (int k = 1; k < 4; ++k) {
    EXPECT_FALSE(m.instances[static_cast<std::size_t>(k)].valid);
    EXPECT_FALSE(m.instances[static_cast<std::size_t>(k)].rays[0].visible);
  }
  EXPECT_EQ(m.instances[4].source_agent, 1);
  EXPECT_EQ(m.instances[5].source_agent, 3);
}

TEST(Merge, FutureMessageRejected) {
  Rng rng(8);
  const Pose p = Pose::planar(0, 0, 0, 0, 3);
  EXPECT_THROW(align_and_merge({}, {message(1, p, 4.0, {instance(make_anchor(Vec3(1, 0, 0), 0), rng)})}, p, 3.0),
               ContractError);
}
