#pragma once

// Rigid transforms, pinhole projection, camera rays, depth-map sampling and
// rotated bird's-eye-view box overlap.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace rayfusion {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

class GeometryError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline Mat3 rot_z(double yaw) {
  return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
}

/// Maps local coordinates into the parent frame: x_parent = R x_local + t.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double timestamp = 0.0;

  static Pose planar(double x, double y, double yaw, double z = 0.0, double stamp = 0.0) {
    return {rot_z(yaw), Vec3(x, y, z), stamp};
  }

  bool is_valid(double tol = 1e-9) const {
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho < tol && std::fabs(rotation.determinant() - 1.0) < tol && translation.allFinite();
  }

  void validate() const {
    if (!is_valid()) throw GeometryError("pose rotation is not orthonormal with det +1");
  }

  Vec3 apply(const Vec3& local) const { return rotation * local + translation; }
  Vec3 inverse_apply(const Vec3& parent) const { return rotation.transpose() * (parent - translation); }
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

/// (R, T) with x_dst = R x_src + T, for two world-frame poses.
inline RigidTransform transform_pose_chain(const Pose& src, const Pose& dst) {
  src.validate();
  dst.validate();
  RigidTransform out;
  out.rotation = dst.rotation.transpose() * src.rotation;
  out.translation = dst.rotation.transpose() * (src.translation - dst.translation);
  return out;
}

struct DepthBins {
  int count = 32;
  double d_min = 0.5;
  double d_max = 60.5;

  double width() const { return (d_max - d_min) / count; }
  double center(int i) const { return d_min + (i + 0.5) * width(); }
  std::vector<double> centers() const {
    std::vector<double> c(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) c[static_cast<std::size_t>(i)] = center(i);
    return c;
  }
  void validate() const {
    if (count < 2 || !(d_min > 0.0) || !(d_max > d_min))
      throw std::invalid_argument("depth bins need D >= 2 and 0 < d_min < d_max");
  }
};

/// Pinhole camera. The extrinsic maps camera coordinates (x right, y down,
/// z forward) into the agent frame.
struct CameraModel {
  Mat3 intrinsics = Mat3::Identity();
  Pose extrinsic;
  int width = 0;
  int height = 0;
  DepthBins bins;

  double fx() const { return intrinsics(0, 0); }
  double fy() const { return intrinsics(1, 1); }
  double cx() const { return intrinsics(0, 2); }
  double cy() const { return intrinsics(1, 2); }

  void validate() const {
    if (!(fx() > 0.0) || !(fy() > 0.0)) throw std::invalid_argument("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw std::invalid_argument("camera image size must be positive");
    bins.validate();
    extrinsic.validate();
  }

  /// Horizontal camera looking along agent-frame heading `mount_yaw`, with a
  /// horizontal field of view of `hfov` radians.
  static CameraModel mounted(double mount_yaw, double hfov, int width, int height, double mount_height,
                             DepthBins bins) {
    CameraModel cam;
    const double f = 0.5 * width / std::tan(0.5 * hfov);
    cam.intrinsics << f, 0.0, 0.5 * (width - 1), 0.0, f, 0.5 * (height - 1), 0.0, 0.0, 1.0;
    const Vec3 forward(std::cos(mount_yaw), std::sin(mount_yaw), 0.0);
    const Vec3 right(std::sin(mount_yaw), -std::cos(mount_yaw), 0.0);
    const Vec3 down(0.0, 0.0, -1.0);
    cam.extrinsic.rotation.col(0) = right;
    cam.extrinsic.rotation.col(1) = down;
    cam.extrinsic.rotation.col(2) = forward;
    cam.extrinsic.translation = Vec3(0.0, 0.0, mount_height);
    cam.width = width;
    cam.height = height;
    cam.bins = bins;
    return cam;
  }
};

/// Camera pose in the parent of `agent_pose` (usually world).
inline Pose camera_world_pose(const CameraModel& cam, const Pose& agent_pose) {
  return {agent_pose.rotation * cam.extrinsic.rotation, agent_pose.apply(cam.extrinsic.translation),
          agent_pose.timestamp};
}

struct Projection {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool in_view = false;
  bool degenerate = false;
};

inline constexpr double kDegenerateDepth = 1e-9;

inline Projection project_point(const CameraModel& cam, const Pose& agent_pose, const Vec3& p_world) {
  Projection out;
  const Vec3 p_cam = cam.extrinsic.inverse_apply(agent_pose.inverse_apply(p_world));
  out.depth = p_cam.z();
  if (std::fabs(out.depth) <= kDegenerateDepth) {
    out.degenerate = true;
    return out;
  }
  const Vec3 h = cam.intrinsics * (p_cam / out.depth);
  out.pixel = h.head<2>();
  out.in_view = out.depth > 0.0 && out.pixel.x() >= 0.0 && out.pixel.x() <= cam.width - 1 &&
                out.pixel.y() >= 0.0 && out.pixel.y() <= cam.height - 1;
  return out;
}

/// Per-pixel categorical depth distributions, row-major [H x W x D].
struct DepthMap {
  int camera = 0;
  int height = 0;
  int width = 0;
  int bins = 0;
  std::vector<double> probs;

  DepthMap() = default;
  DepthMap(int cam, int h, int w, int d)
      : camera(cam), height(h), width(w), bins(d),
        probs(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(d), 0.0) {}

  std::size_t offset(int row, int col) const {
    return (static_cast<std::size_t>(row) * static_cast<std::size_t>(width) + static_cast<std::size_t>(col)) *
           static_cast<std::size_t>(bins);
  }
  const double* at(int row, int col) const { return probs.data() + offset(row, col); }
  double* at(int row, int col) { return probs.data() + offset(row, col); }
};

/// Bilinear interpolation of the four neighbouring distributions. Pixels
/// outside the image clamp to the border; the result is renormalized.
inline std::vector<double> bilinear_sample(const DepthMap& map, const Vec2& pixel) {
  const double x = std::clamp(pixel.x(), 0.0, static_cast<double>(map.width - 1));
  const double y = std::clamp(pixel.y(), 0.0, static_cast<double>(map.height - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, map.width - 1);
  const int y1 = std::min(y0 + 1, map.height - 1);
  const double fx = x - x0, fy = y - y0;
  const double w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy), w10 = (1 - fx) * fy, w11 = fx * fy;
  std::vector<double> out(static_cast<std::size_t>(map.bins));
  const double* a = map.at(y0, x0);
  const double* b = map.at(y0, x1);
  const double* c = map.at(y1, x0);
  const double* d = map.at(y1, x1);
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = w00 * a[i] + w01 * b[i] + w10 * c[i] + w11 * d[i];
    total += out[i];
  }
  if (total > 0.0)
    for (auto& v : out) v /= total;
  return out;
}

/// r(lambda) = origin + lambda * direction, plus the angle to the optical axis.
struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitX();
  double axis_angle = 0.0;
};

inline constexpr double kMinRayLength = 1e-6;

inline Ray ray_to_instance(const CameraModel& cam, const Pose& agent_pose, const Vec3& center_world) {
  const Pose cam_world = camera_world_pose(cam, agent_pose);
  Ray ray;
  ray.origin = cam_world.translation;
  const Vec3 d = center_world - ray.origin;
  const double len = d.norm();
  if (!(len > kMinRayLength)) throw GeometryError("instance center coincides with the camera origin");
  ray.direction = d / len;
  const Vec3 axis = cam_world.rotation.col(2);
  ray.axis_angle = std::acos(std::clamp(ray.direction.dot(axis), -1.0, 1.0));
  return ray;
}

struct RayPairResult {
  Vec3 midpoint;
  double gap;
};

/// Closest approach of two infinite lines.
inline RayPairResult nearest_point_two_rays(const Ray& r1, const Ray& r2) {
  const Vec3& u = r1.direction;
  const Vec3& v = r2.direction;
  if (u.cross(v).norm() < 1e-9) throw GeometryError("rays are parallel");
  const Vec3 w0 = r1.origin - r2.origin;
  const double a = u.dot(u), b = u.dot(v), c = v.dot(v), d = u.dot(w0), e = v.dot(w0);
  const double den = a * c - b * b;
  const double s = (b * e - c * d) / den;
  const double t = (a * e - b * d) / den;
  const Vec3 p1 = r1.origin + s * u;
  const Vec3 p2 = r2.origin + t * v;
  return {0.5 * (p1 + p2), (p1 - p2).norm()};
}

/// Oriented vehicle box; the length axis follows yaw, the z axis is up.
struct Box3D {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();  // (w, h, l)
  double yaw = 0.0;
  Vec3 velocity = Vec3::Zero();

  double w() const { return size.x(); }
  double h() const { return size.y(); }
  double l() const { return size.z(); }

  /// Ground-plane footprint, counter-clockwise.
  std::array<Vec2, 4> footprint() const {
    const Vec2 fwd(std::cos(yaw), std::sin(yaw));
    const Vec2 left(-std::sin(yaw), std::cos(yaw));
    const Vec2 c = center.head<2>();
    const Vec2 a = 0.5 * l() * fwd, b = 0.5 * w() * left;
    return {c + a - b, c + a + b, c - a + b, c - a - b};
  }

  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> out;
    const Mat3 r = rot_z(yaw);
    int k = 0;
    for (double sx : {-0.5, 0.5})
      for (double sy : {-0.5, 0.5})
        for (double sz : {-0.5, 0.5}) out[static_cast<std::size_t>(k++)] = center + r * Vec3(sx * l(), sy * w(), sz * h());
    return out;
  }
};

namespace detail {

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline double polygon_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) a += cross2(poly[i], poly[(i + 1) % poly.size()]);
  return 0.5 * std::fabs(a);
}

/// Sutherland-Hodgman clip of `subject` by the convex CCW polygon `clip`.
inline std::vector<Vec2> clip_convex(std::vector<Vec2> subject, const std::array<Vec2, 4>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % clip.size()];
    auto inside = [&](const Vec2& p) { return cross2(b - a, p - a) >= 0.0; };
    std::vector<Vec2> out;
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2& cur = subject[i];
      const Vec2& prev = subject[(i + subject.size() - 1) % subject.size()];
      const bool in_cur = inside(cur), in_prev = inside(prev);
      if (in_cur != in_prev) {
        const Vec2 d = cur - prev;
        const double t = cross2(b - a, a - prev) / cross2(b - a, d);
        out.push_back(prev + t * d);
      }
      if (in_cur) out.push_back(cur);
    }
    subject = std::move(out);
  }
  return subject;
}

}  // namespace detail

/// Overlap of the two yawed w x l footprints in the ground plane.
inline double rotated_bev_iou(const Box3D& a, const Box3D& b) {
  const double area_a = a.w() * a.l(), area_b = b.w() * b.l();
  if (!(area_a > 0.0) || !(area_b > 0.0)) return 0.0;
  const double reach = 0.5 * (std::hypot(a.w(), a.l()) + std::hypot(b.w(), b.l()));
  if ((a.center.head<2>() - b.center.head<2>()).norm() > reach) return 0.0;
  const auto fa = a.footprint();
  const auto poly = detail::clip_convex({fa.begin(), fa.end()}, b.footprint());
  if (poly.size() < 3) return 0.0;
  const double inter = detail::polygon_area(poly);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

}  // namespace rayfusion
