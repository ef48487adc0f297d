#include "gspw/manifold.hpp"

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "gspw/error.hpp"

namespace gspw {

namespace {

struct CellHash {
  std::size_t operator()(const std::pair<int, int>& c) const noexcept {
    return static_cast<std::size_t>(c.first) * 73856093u ^ static_cast<std::size_t>(c.second) * 19349663u;
  }
};

/// Horizontal bucket grid over primitive positions for radius queries.
class HorizontalGrid {
 public:
  HorizontalGrid(const std::vector<Primitive>& prims, double cell) : prims_(prims), cell_(cell) {
    for (std::size_t i = 0; i < prims.size(); ++i) buckets_[cell_of(prims[i].position)].push_back(i);
  }

  template <class Fn>
  void within(const Vec3& c, double radius, Fn&& fn) const {
    const int r = static_cast<int>(std::ceil(radius / cell_));
    const auto [cx, cy] = cell_of(c);
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        const auto it = buckets_.find({cx + dx, cy + dy});
        if (it == buckets_.end()) continue;
        for (std::size_t i : it->second) {
          const Vec3& p = prims_[i].position;
          if ((p.head<2>() - c.head<2>()).squaredNorm() <= radius * radius) fn(p);
        }
      }
  }

 private:
  std::pair<int, int> cell_of(const Vec3& p) const {
    return {static_cast<int>(std::floor(p.x() / cell_)), static_cast<int>(std::floor(p.y() / cell_))};
  }
  const std::vector<Primitive>& prims_;
  double cell_;
  std::unordered_map<std::pair<int, int>, std::vector<std::size_t>, CellHash> buckets_;
};

/// Height of the least-squares plane z = a + b dx + c dy through the points, at the centre.
std::optional<double> plane_height(const std::vector<Vec3>& pts, const Vec3& centre) {
  if (pts.size() < 3) return std::nullopt;
  Mat3 ata = Mat3::Zero();
  Vec3 atz = Vec3::Zero();
  for (const auto& p : pts) {
    const Vec3 row(1.0, p.x() - centre.x(), p.y() - centre.y());
    ata += row * row.transpose();
    atz += row * p.z();
  }
  // Normal matrix is symmetric PSD, so its eigenvalues are its singular values.
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(ata, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues()(0) < 1e-9 * std::max(1.0, eig.eigenvalues()(2))) return std::nullopt;
  return ata.ldlt().solve(atz)(0);
}

double fitted_height(const HorizontalGrid& grid, const Vec3& centre, double radius,
                     double fallback) {
  for (int attempt = 0; attempt < 4; ++attempt, radius *= 2.0) {
    std::vector<Vec3> pts;
    grid.within(centre, radius, [&](const Vec3& p) { pts.push_back(p); });
    if (pts.empty()) continue;
    auto h = plane_height(pts, centre);
    if (h) {
      // One trimming pass drops points far off the plane (kerbs, clutter).
      std::vector<Vec3> kept;
      for (const auto& p : pts)
        if (std::abs(p.z() - *h) < 0.3) kept.push_back(p);
      if (kept.size() != pts.size())
        if (auto h2 = plane_height(kept, centre)) h = h2;
      return *h;
    }
    double sum = 0.0;
    for (const auto& p : pts) sum += p.z();
    return sum / static_cast<double>(pts.size());
  }
  return fallback;
}

struct Segment {
  std::size_t i = 0;
  double tau = 0.0;  // position along the segment, may fall outside [0,1] at the ends
};

Vec2 horizontal_dir(const GroundManifold& m, std::size_t i) {
  return (m.points[i + 1].head<2>() - m.points[i].head<2>()).normalized();
}

Segment segment_for_u(double u, const GroundManifold& m) {
  const std::size_t n = m.size();
  if (n < 2) throw Error(ErrorCode::Degenerate, "manifold needs at least two samples");
  const auto it = std::upper_bound(m.arc.begin(), m.arc.end(), u);
  std::size_t i = it == m.arc.begin() ? 0 : static_cast<std::size_t>(it - m.arc.begin()) - 1;
  i = std::min(i, n - 2);
  return {i, (u - m.arc[i]) / (m.arc[i + 1] - m.arc[i])};
}

}  // namespace

GroundManifold fit_ground_manifold(const Scene& scene, const ManifoldOptions& opts) {
  const auto& traj = scene.trajectory;
  if (traj.size() < 2)
    throw Error(ErrorCode::Degenerate, "ground manifold needs a trajectory of at least 2 points");

  // Horizontal polyline with repeated points removed.
  std::vector<Vec3> path;
  for (const auto& p : traj)
    if (path.empty() || (p.head<2>() - path.back().head<2>()).norm() > 1e-9) path.push_back(p);
  std::vector<double> harc{0.0};
  for (std::size_t i = 1; i < path.size(); ++i)
    harc.push_back(harc.back() + (path[i].head<2>() - path[i - 1].head<2>()).norm());
  const double total = harc.back();
  if (path.size() < 2 || total < 1e-9)
    throw Error(ErrorCode::Degenerate, "trajectory has zero horizontal length");

  std::vector<double> stations;
  for (double s = 0.0; s < total - 1e-9; s += opts.resample_step) stations.push_back(s);
  stations.push_back(total);

  const HorizontalGrid grid(scene.primitives, std::max(opts.height_radius, 0.5));
  GroundManifold m;
  std::size_t seg = 0;
  for (double s : stations) {
    while (seg + 2 < path.size() && harc[seg + 1] < s) ++seg;
    const double t = std::clamp((s - harc[seg]) / (harc[seg + 1] - harc[seg]), 0.0, 1.0);
    Vec3 p = path[seg] + t * (path[seg + 1] - path[seg]);
    p.z() = fitted_height(grid, p, opts.height_radius, p.z());
    m.points.push_back(p);
  }

  m.arc.assign(m.points.size(), 0.0);
  for (std::size_t i = 1; i < m.points.size(); ++i)
    m.arc[i] = m.arc[i - 1] + (m.points[i] - m.points[i - 1]).norm();

  // Tangents from the derivative of the quadratic through three neighbouring
  // samples (one-sided at the ends), which stays accurate on curves and on the
  // shorter final segment.
  const std::size_t n = m.points.size();
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 t;
    if (n == 2) {
      t = m.points[1] - m.points[0];
    } else {
      const std::size_t c = std::clamp<std::size_t>(i, 1, n - 2);
      const double x0 = m.arc[c - 1], x1 = m.arc[c], x2 = m.arc[c + 1], x = m.arc[i];
      t = (2 * x - x1 - x2) / ((x0 - x1) * (x0 - x2)) * m.points[c - 1] +
          (2 * x - x0 - x2) / ((x1 - x0) * (x1 - x2)) * m.points[c] +
          (2 * x - x0 - x1) / ((x2 - x0) * (x2 - x1)) * m.points[c + 1];
    }
    t.normalize();
    m.tangents.push_back(t);
    m.laterals.push_back(Vec3::UnitZ().cross(t).normalized());
    m.heights.push_back(m.points[i].z());
  }
  return m;
}

Bev to_bev(const Vec3& position, const GroundManifold& m) {
  const std::size_t n = m.size();
  if (n < 2) throw Error(ErrorCode::Degenerate, "manifold needs at least two samples");
  const Vec2 q = position.head<2>();
  double best = std::numeric_limits<double>::infinity();
  Bev out;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Vec2 a = m.points[i].head<2>();
    const Vec2 d = m.points[i + 1].head<2>() - a;
    const double len = d.norm();
    const Vec2 dir = d / len;
    double tau = (q - a).dot(dir) / len;
    if (i > 0) tau = std::max(tau, 0.0);
    if (i + 2 < n) tau = std::min(tau, 1.0);
    const Vec2 foot = a + tau * d;
    const double dist2 = (q - foot).squaredNorm();
    if (dist2 < best) {
      best = dist2;
      const Vec2 normal(-dir.y(), dir.x());
      out.u = m.arc[i] + tau * (m.arc[i + 1] - m.arc[i]);
      out.v = (q - a).dot(normal);
    }
  }
  if (std::sqrt(best) > kCorridorHalfWidth)
    throw Error(ErrorCode::OutOfCorridor,
                fmt::format("point ({:.3f}, {:.3f}) is {:.1f} m from the centreline", position.x(),
                            position.y(), std::sqrt(best)));
  return out;
}

Vec3 from_bev(double u, double v, const GroundManifold& m) {
  const Segment s = segment_for_u(u, m);
  const Vec3 c = m.points[s.i] + s.tau * (m.points[s.i + 1] - m.points[s.i]);
  const Vec2 dir = horizontal_dir(m, s.i);
  return c + v * Vec3(-dir.y(), dir.x(), 0.0);
}

double ground_height(double u, const GroundManifold& m) {
  const Segment s = segment_for_u(u, m);
  return m.points[s.i].z() + s.tau * (m.points[s.i + 1].z() - m.points[s.i].z());
}

double heading_at(double u, const GroundManifold& m) {
  const Vec2 dir = horizontal_dir(m, segment_for_u(u, m).i);
  return std::atan2(dir.y(), dir.x());
}

std::optional<Vec3> intersect_ground(const Vec3& origin, const Vec3& direction,
                                     const GroundManifold& m, double max_t) {
  auto above = [&](double t) -> std::optional<double> {
    const Vec3 p = origin + t * direction;
    try {
      return p.z() - ground_height(to_bev(p, m).u, m);
    } catch (const Error&) {
      return std::nullopt;
    }
  };
  const double step = 0.5;
  double t0 = 0.05;
  auto f0 = above(t0);
  if (!f0 || *f0 <= 0.0) return std::nullopt;
  for (double t1 = t0 + step; t1 <= max_t; t0 = t1, t1 += step) {
    const auto f1 = above(t1);
    if (!f1) return std::nullopt;
    if (*f1 <= 0.0) {
      double lo = t0, hi = t1;
      for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        const auto fm = above(mid);
        if (fm && *fm > 0.0)
          lo = mid;
        else
          hi = mid;
      }
      return origin + hi * direction;
    }
  }
  return std::nullopt;
}

}  // namespace gspw
