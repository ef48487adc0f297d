#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gspw/image.hpp"
#include "gspw/scene.hpp"

namespace gspw {

inline constexpr double kNearPlane = 0.05;           // metres
inline constexpr double kCovarianceFloor = 0.05;     // px^2 added to the 2D covariance diagonal
inline constexpr double kSupportMahalanobis2 = 9.0;  // 3 sigma ellipse
inline constexpr double kMinTransmittance = 1e-4;
inline constexpr int kTileSize = 16;

struct ProjectedPoint {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool visible = false;
};

/// Pinhole projection. Visible iff camera-frame depth exceeds the near plane
/// and the pixel lies inside [-0.5, W-0.5) x [-0.5, H-0.5), i.e. it rounds to
/// an image pixel. Pixel centres sit at integer coordinates.
ProjectedPoint project_point(const Vec3& position, const Camera& camera);
/// Nearest pixel of a projected point (pixel centres at integer coordinates).
inline std::pair<int, int> rounded_pixel(const Vec2& p) {
  return {static_cast<int>(std::floor(p.x() + 0.5)), static_cast<int>(std::floor(p.y() + 0.5))};
}

std::vector<ProjectedPoint> project_points(std::span<const Vec3> positions, const Camera& camera);

struct Splat2D {
  std::int64_t primitive_id = 0;
  std::uint32_t index = 0;  // position in the rendered primitive list
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Identity();
  Mat2 conic = Mat2::Identity();  // inverse of cov2d
  double depth = 0.0;
  PixelRect bounds;  // pixels whose centres can fall inside the 3 sigma ellipse
};

/// Footprint of one primitive, or nullopt when it is behind the near plane or
/// its support misses the image.
std::optional<Splat2D> project_splat(const Primitive& p, std::uint32_t index, const Camera& camera);

/// Visible splats ordered front to back by (depth, primitive id).
std::vector<Splat2D> project_splats(std::span<const Primitive> prims, const Camera& camera);

enum Channel : unsigned {
  kRgb = 1u,
  kAlpha = 2u,
  kDepth = 4u,
  kFeature = 8u,
  kAllChannels = 15u,
};

/// Per-pixel compositing record in CSR layout: entries of pixel p occupy
/// [offsets[p], offsets[p+1]) in front-to-back order.
struct CompositeWeights {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> offsets;
  std::vector<std::uint32_t> prim;    // index into the rendered primitive list
  std::vector<double> weight;         // w_k = a_k T_k
  std::vector<double> transmittance;  // T_k before this splat
  std::vector<double> footprint;      // G_k
  std::uint64_t fingerprint = 0;

  bool empty() const { return offsets.empty(); }
};

struct RenderOutput {
  Image rgb;      // 3 channels
  Image alpha;    // 1 channel
  Image depth;    // 1 channel, metres, 0 where alpha is 0
  Image feature;  // D channels
  CompositeWeights weights;
};

struct RenderOptions {
  unsigned channels = kAllChannels;
  bool keep_weights = false;
  /// Restrict shading to this rectangle; other pixels stay zero.
  std::optional<PixelRect> roi;
};

/// Tiled front-to-back alpha compositing.
RenderOutput render(std::span<const Primitive> prims, int feature_dim, const Camera& camera,
                    const RenderOptions& opts = {});
RenderOutput render(const Scene& scene, const Camera& camera, const RenderOptions& opts = {});

/// Literal per-pixel loop over every splat; the reference the tiled path is tested against.
RenderOutput render_reference(std::span<const Primitive> prims, int feature_dim,
                              const Camera& camera, unsigned channels = kAllChannels);

/// Hash of everything a forward pass depends on; used to reject stale weights.
std::uint64_t render_fingerprint(std::span<const Primitive> prims, const Camera& camera);

/// dLoss/dOutput images for one backward pass. Any may be null.
struct Residuals {
  const Image* rgb = nullptr;
  const Image* feature = nullptr;
  const Image* depth = nullptr;
  const Image* alpha = nullptr;
};

struct PrimitiveGradients {
  std::vector<Vec3> color;
  std::vector<double> feature;  // n x D, row-major
  std::vector<double> opacity;

  void resize(std::size_t n, int feature_dim);
  void add(const PrimitiveGradients& o);
};

/// Backward pass through the compositing weights of `forward`, which must have
/// been rendered with keep_weights from exactly these primitives and camera.
/// Per-primitive sums run in a fixed pixel order, so results do not depend on
/// the thread count.
PrimitiveGradients render_gradients(std::span<const Primitive> prims, int feature_dim,
                                    const Camera& camera, const RenderOutput& forward,
                                    const Residuals& residuals, bool also_opacity);

enum class GradChannel { Rgb, Feature };

/// Single-channel convenience form.
PrimitiveGradients render_gradients(const Scene& scene, const Camera& camera,
                                    const RenderOutput& forward, const Image& residual,
                                    GradChannel channel, bool also_opacity);

}  // namespace gspw
