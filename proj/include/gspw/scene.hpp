#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gspw/image.hpp"

namespace gspw {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Rotation quaternion stored scalar-first: (w, x, y, z). The on-disk order
/// matches this layout exactly.
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const;
  Quat normalized() const;
  Mat3 matrix() const;
  static Quat from_matrix(const Mat3& r);
  static Quat about_z(double angle);
  Quat operator*(const Quat& o) const;
  bool operator==(const Quat&) const = default;
};

/// One 3D Gaussian. Position in metres, world frame, z up.
struct Primitive {
  std::int64_t id = 0;
  Vec3 position = Vec3::Zero();
  Vec3 scale = Vec3::Constant(0.1);  // standard deviations (m)
  Quat rotation;
  double opacity = 1.0;
  Vec3 color = Vec3::Zero();
  std::vector<double> feature;

  bool operator==(const Primitive& o) const {
    return id == o.id && position == o.position && scale == o.scale &&
           rotation == o.rotation && opacity == o.opacity && color == o.color &&
           feature == o.feature;
  }
};

/// Pinhole camera. Looks along +Z of its own frame, image x right, y down.
/// world_to_camera maps X_cam = R(rotation) * X_world + translation.
struct Camera {
  int frame_index = 0;
  int width = 0;
  int height = 0;
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Quat rotation;
  Vec3 translation = Vec3::Zero();

  Vec3 to_camera(const Vec3& world) const;
  Vec3 to_world(const Vec3& cam) const;
  Vec3 center() const;
  /// World-frame unit direction through pixel (px, py).
  Vec3 ray_direction(double px, double py) const;

  /// Camera at `eye` looking at `target` with world +z as the up hint.
  static Camera look_at(int frame_index, int width, int height, double focal,
                        const Vec3& eye, const Vec3& target);

  bool operator==(const Camera& o) const {
    return frame_index == o.frame_index && width == o.width && height == o.height &&
           fx == o.fx && fy == o.fy && cx == o.cx && cy == o.cy &&
           rotation == o.rotation && translation == o.translation;
  }
};

/// Road-surface centreline, arc-length parameterised. Tangent and lateral are
/// stored per sample; lateral is horizontal and points left of travel.
struct GroundManifold {
  std::vector<Vec3> points;
  std::vector<double> arc;
  std::vector<Vec3> tangents;
  std::vector<Vec3> laterals;
  std::vector<double> heights;

  std::size_t size() const { return points.size(); }
  double length() const { return arc.empty() ? 0.0 : arc.back(); }
  bool operator==(const GroundManifold& o) const {
    return points == o.points && arc == o.arc && tangents == o.tangents &&
           laterals == o.laterals && heights == o.heights;
  }
};

struct Scene {
  static constexpr int kVersion = 1;

  int version = kVersion;
  int feature_dim = 0;
  std::vector<Primitive> primitives;
  std::vector<Camera> cameras;  // strictly increasing frame_index
  std::vector<Vec3> trajectory;
  std::optional<GroundManifold> manifold;
  nlohmann::json metadata = nlohmann::json::object();

  const Camera* camera_for_frame(int frame_index) const;
  /// Index into primitives by id; -1 when absent. Linear scan.
  std::int64_t find_primitive(std::int64_t id) const;
  std::int64_t max_id() const;

  bool operator==(const Scene& o) const {
    return version == o.version && feature_dim == o.feature_dim &&
           primitives == o.primitives && cameras == o.cameras &&
           trajectory == o.trajectory && manifold == o.manifold && metadata == o.metadata;
  }
};

struct FrameMask {
  int frame_index = 0;
  Mask bitmap;
};

/// Feature map of H' x W' x D, row-major, channel-interleaved.
struct FeatureMap {
  int frame_index = 0;
  Image data;  // channels == D
};

struct Violation {
  std::string kind;
  std::string message;
};

/// Every invariant breach in the scene; empty means valid.
std::vector<Violation> validate_scene(const Scene& scene);

}  // namespace gspw
