#pragma once

#include <optional>

#include "gspw/scene.hpp"

namespace gspw {

inline constexpr double kCorridorHalfWidth = 50.0;  // metres

struct ManifoldOptions {
  double resample_step = 1.0;     // metres between centreline samples
  double height_radius = 1.5;     // horizontal radius of the local ground fit
};

/// Fits the road-surface centreline from the trajectory: horizontal path
/// resampled at a fixed step, each sample lifted to the local least-squares
/// plane through nearby primitives (falling back to the trajectory height when
/// no primitives are near).
GroundManifold fit_ground_manifold(const Scene& scene, const ManifoldOptions& opts = {});

struct Bev {
  double u = 0.0;  // arc length along the centreline (m)
  double v = 0.0;  // signed lateral offset, left of travel positive (m)
};

/// Closest-point BEV coordinates. Each centreline segment carries its own
/// orthonormal frame, so to_bev and from_bev are exact inverses for points
/// whose closest segment is unique. Points before the start or past the end
/// extrapolate along the first or last segment.
Bev to_bev(const Vec3& position, const GroundManifold& manifold);
/// Ground-surface point at (u, v): centreline point plus v along the lateral, at height h(u).
Vec3 from_bev(double u, double v, const GroundManifold& manifold);

/// Interpolated centreline height.
double ground_height(double u, const GroundManifold& manifold);
/// Heading (radians, about +z) of the centreline segment containing u.
double heading_at(double u, const GroundManifold& manifold);

/// First intersection of a ray with the road surface, if any within max_t.
std::optional<Vec3> intersect_ground(const Vec3& origin, const Vec3& direction,
                                     const GroundManifold& manifold, double max_t = 200.0);

}  // namespace gspw
