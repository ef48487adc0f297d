#include "gspw/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <unordered_set>

#include "gspw/error.hpp"

namespace gspw {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Format: return "format";
    case ErrorCode::UnsupportedVersion: return "unsupported-version";
    case ErrorCode::Validation: return "validation";
    case ErrorCode::Io: return "io";
    case ErrorCode::Config: return "config";
    case ErrorCode::DimensionMismatch: return "dimension-mismatch";
    case ErrorCode::NoCandidate: return "no-candidate";
    case ErrorCode::AffinityUndefined: return "affinity-undefined";
    case ErrorCode::StaleIndex: return "stale-index";
    case ErrorCode::ContractViolation: return "contract-violation";
    case ErrorCode::OutOfCorridor: return "out-of-corridor";
    case ErrorCode::Degenerate: return "degenerate";
    case ErrorCode::Infeasible: return "infeasible";
  }
  return "unknown";
}

double Quat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quat Quat::normalized() const {
  const double n = norm();
  return {w / n, x / n, y / n, z / n};
}

Mat3 Quat::matrix() const {
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Quat Quat::from_matrix(const Mat3& r) {
  const Eigen::Quaterniond q(r);
  Quat out{q.w(), q.x(), q.y(), q.z()};
  if (out.w < 0) out = {-out.w, -out.x, -out.y, -out.z};
  return out.normalized();
}

Quat Quat::about_z(double angle) {
  return {std::cos(angle / 2), 0.0, 0.0, std::sin(angle / 2)};
}

Quat Quat::operator*(const Quat& o) const {
  return {w * o.w - x * o.x - y * o.y - z * o.z, w * o.x + x * o.w + y * o.z - z * o.y,
          w * o.y - x * o.z + y * o.w + z * o.x, w * o.z + x * o.y - y * o.x + z * o.w};
}

Vec3 Camera::to_camera(const Vec3& world) const { return rotation.matrix() * world + translation; }

Vec3 Camera::to_world(const Vec3& cam) const {
  return rotation.matrix().transpose() * (cam - translation);
}

Vec3 Camera::center() const { return -(rotation.matrix().transpose() * translation); }

Vec3 Camera::ray_direction(double px, double py) const {
  const Vec3 d_cam((px - cx) / fx, (py - cy) / fy, 1.0);
  return (rotation.matrix().transpose() * d_cam).normalized();
}

Camera Camera::look_at(int frame_index, int width, int height, double focal, const Vec3& eye,
                       const Vec3& target) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(Vec3::UnitZ());
  if (right.norm() < 1e-9) right = Vec3::UnitX();
  right.normalize();
  const Vec3 down = forward.cross(right);
  Mat3 r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();
  Camera cam;
  cam.frame_index = frame_index;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = focal;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.rotation = Quat::from_matrix(r);
  cam.translation = -(cam.rotation.matrix() * eye);
  return cam;
}

const Camera* Scene::camera_for_frame(int frame_index) const {
  const auto it = std::lower_bound(
      cameras.begin(), cameras.end(), frame_index,
      [](const Camera& c, int f) { return c.frame_index < f; });
  if (it == cameras.end() || it->frame_index != frame_index) return nullptr;
  return &*it;
}

std::int64_t Scene::find_primitive(std::int64_t id) const {
  for (std::size_t i = 0; i < primitives.size(); ++i)
    if (primitives[i].id == id) return static_cast<std::int64_t>(i);
  return -1;
}

std::int64_t Scene::max_id() const {
  std::int64_t m = -1;
  for (const auto& p : primitives) m = std::max(m, p.id);
  return m;
}

namespace {

bool finite3(const Vec3& v) { return v.allFinite(); }

}  // namespace

std::vector<Violation> validate_scene(const Scene& scene) {
  std::vector<Violation> out;
  auto add = [&](std::string kind, std::string msg) {
    out.push_back({std::move(kind), std::move(msg)});
  };

  if (scene.version != Scene::kVersion)
    add("version", fmt::format("scene version {} (expected {})", scene.version, Scene::kVersion));
  if (scene.feature_dim < 0) add("feature_dim", "negative feature dimension");

  std::unordered_set<std::int64_t> ids;
  ids.reserve(scene.primitives.size());
  for (const auto& p : scene.primitives) {
    if (!ids.insert(p.id).second)
      add("duplicate_id", fmt::format("primitive id {} appears more than once", p.id));
    if (!finite3(p.position) || !finite3(p.scale) || !finite3(p.color) ||
        !std::isfinite(p.opacity) || !std::isfinite(p.rotation.w) ||
        !std::isfinite(p.rotation.x) || !std::isfinite(p.rotation.y) ||
        !std::isfinite(p.rotation.z))
      add("non_finite", fmt::format("primitive {} has non-finite attributes", p.id));
    if (std::abs(p.rotation.norm() - 1.0) > 1e-6)
      add("quaternion_norm",
          fmt::format("primitive {} rotation norm {} is not unit", p.id, p.rotation.norm()));
    for (int a = 0; a < 3; ++a) {
      if (!(p.scale[a] >= 1e-4 && p.scale[a] <= 1e3)) {
        add("scale_range", fmt::format("primitive {} scale[{}] = {} outside [1e-4, 1e3]", p.id,
                                       a, p.scale[a]));
        break;
      }
    }
    if (!(p.opacity >= 0.0 && p.opacity <= 1.0))
      add("opacity_range",
          fmt::format("primitive {} opacity {} outside [0,1]", p.id, p.opacity));
    for (int a = 0; a < 3; ++a) {
      if (!(p.color[a] >= 0.0 && p.color[a] <= 1.0)) {
        add("color_range", fmt::format("primitive {} colour outside [0,1]", p.id));
        break;
      }
    }
    if (static_cast<int>(p.feature.size()) != scene.feature_dim)
      add("feature_dim", fmt::format("primitive {} feature length {} != {}", p.id,
                                     p.feature.size(), scene.feature_dim));
    else if (!std::all_of(p.feature.begin(), p.feature.end(),
                          [](double f) { return std::isfinite(f); }))
      add("non_finite", fmt::format("primitive {} feature is non-finite", p.id));
  }

  for (std::size_t i = 0; i < scene.cameras.size(); ++i) {
    const auto& c = scene.cameras[i];
    if (i > 0 && c.frame_index <= scene.cameras[i - 1].frame_index)
      add("camera_order", fmt::format("camera frame {} not strictly increasing", c.frame_index));
    if (!(c.fx > 0 && c.fy > 0))
      add("camera_focal", fmt::format("camera frame {} has non-positive focal", c.frame_index));
    if (!(c.cx >= 0 && c.cx < c.width && c.cy >= 0 && c.cy < c.height))
      add("camera_principal",
          fmt::format("camera frame {} principal point outside image", c.frame_index));
    if (std::abs(c.rotation.norm() - 1.0) > 1e-6)
      add("quaternion_norm", fmt::format("camera frame {} rotation not unit", c.frame_index));
    if (!finite3(c.translation))
      add("non_finite", fmt::format("camera frame {} translation non-finite", c.frame_index));
  }

  for (const auto& t : scene.trajectory)
    if (!finite3(t)) {
      add("non_finite", "trajectory contains non-finite positions");
      break;
    }
  return out;
}

}  // namespace gspw
