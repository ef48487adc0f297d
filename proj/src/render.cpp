#include "gspw/render.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gspw/error.hpp"
#include "gspw/parallel.hpp"

namespace gspw {

ProjectedPoint project_point(const Vec3& position, const Camera& camera) {
  const Vec3 c = camera.to_camera(position);
  ProjectedPoint out;
  out.depth = c.z();
  if (c.z() <= kNearPlane) return out;
  out.pixel = {camera.fx * c.x() / c.z() + camera.cx, camera.fy * c.y() / c.z() + camera.cy};
  out.visible = out.pixel.x() >= -0.5 && out.pixel.x() < camera.width - 0.5 &&
                out.pixel.y() >= -0.5 && out.pixel.y() < camera.height - 0.5;
  return out;
}

std::vector<ProjectedPoint> project_points(std::span<const Vec3> positions, const Camera& camera) {
  std::vector<ProjectedPoint> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) out[i] = project_point(positions[i], camera);
  return out;
}

std::optional<Splat2D> project_splat(const Primitive& p, std::uint32_t index,
                                     const Camera& camera) {
  const Mat3 w = camera.rotation.matrix();
  const Vec3 t = w * p.position + camera.translation;
  if (t.z() <= kNearPlane) return std::nullopt;

  const Mat3 rot = p.rotation.matrix();
  const Vec3 s2 = p.scale.cwiseProduct(p.scale);
  const Mat3 cov3 = rot * s2.asDiagonal() * rot.transpose();

  Eigen::Matrix<double, 2, 3> j;
  const double iz = 1.0 / t.z();
  // The Jacobian is linearised at a point clamped to 1.3x the half field of
  // view; far off-axis splats near the camera otherwise blow up to cover the image.
  const double lim_x = 1.3 * std::max(camera.cx + 0.5, camera.width - 0.5 - camera.cx) / camera.fx;
  const double lim_y = 1.3 * std::max(camera.cy + 0.5, camera.height - 0.5 - camera.cy) / camera.fy;
  const double tx = std::clamp(t.x() * iz, -lim_x, lim_x) * t.z();
  const double ty = std::clamp(t.y() * iz, -lim_y, lim_y) * t.z();
  j << camera.fx * iz, 0.0, -camera.fx * tx * iz * iz,  //
      0.0, camera.fy * iz, -camera.fy * ty * iz * iz;
  const Eigen::Matrix<double, 2, 3> jw = j * w;
  Mat2 cov = jw * cov3 * jw.transpose();
  cov(0, 1) = cov(1, 0) = 0.5 * (cov(0, 1) + cov(1, 0));
  cov(0, 0) += kCovarianceFloor;
  cov(1, 1) += kCovarianceFloor;

  Splat2D s;
  s.primitive_id = p.id;
  s.index = index;
  s.depth = t.z();
  s.mean2d = {camera.fx * t.x() * iz + camera.cx, camera.fy * t.y() * iz + camera.cy};
  s.cov2d = cov;
  const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
  s.conic << cov(1, 1) / det, -cov(0, 1) / det, -cov(0, 1) / det, cov(0, 0) / det;

  // Axis-aligned box of the ellipse d^T conic d <= 9 is mean +- 3 sqrt(diag(cov)).
  const double rx = 3.0 * std::sqrt(cov(0, 0));
  const double ry = 3.0 * std::sqrt(cov(1, 1));
  const double fx0 = std::ceil(s.mean2d.x() - rx), fx1 = std::floor(s.mean2d.x() + rx);
  const double fy0 = std::ceil(s.mean2d.y() - ry), fy1 = std::floor(s.mean2d.y() + ry);
  if (!(fx1 >= 0 && fy1 >= 0 && fx0 <= camera.width - 1 && fy0 <= camera.height - 1))
    return std::nullopt;
  s.bounds.x0 = static_cast<int>(std::max(0.0, fx0));
  s.bounds.y0 = static_cast<int>(std::max(0.0, fy0));
  s.bounds.x1 = static_cast<int>(std::min<double>(camera.width - 1, fx1)) + 1;
  s.bounds.y1 = static_cast<int>(std::min<double>(camera.height - 1, fy1)) + 1;
  return s;
}

std::vector<Splat2D> project_splats(std::span<const Primitive> prims, const Camera& camera) {
  std::vector<std::optional<Splat2D>> tmp(prims.size());
  parallel_for(static_cast<std::int64_t>(prims.size()), [&](std::int64_t i) {
    tmp[i] = project_splat(prims[i], static_cast<std::uint32_t>(i), camera);
  });
  std::vector<Splat2D> out;
  out.reserve(prims.size());
  for (auto& s : tmp)
    if (s) out.push_back(*s);
  std::sort(out.begin(), out.end(), [](const Splat2D& a, const Splat2D& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.primitive_id < b.primitive_id;
  });
  return out;
}

std::uint64_t render_fingerprint(std::span<const Primitive> prims, const Camera& camera) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  auto mixd = [&](double v) { mix(&v, sizeof v); };
  for (const auto& p : prims) {
    mix(&p.id, sizeof p.id);
    for (int a = 0; a < 3; ++a) {
      mixd(p.position[a]);
      mixd(p.scale[a]);
      mixd(p.color[a]);
    }
    mixd(p.rotation.w);
    mixd(p.rotation.x);
    mixd(p.rotation.y);
    mixd(p.rotation.z);
    mixd(p.opacity);
    for (double f : p.feature) mixd(f);
  }
  mix(&camera.frame_index, sizeof camera.frame_index);
  mix(&camera.width, sizeof camera.width);
  mix(&camera.height, sizeof camera.height);
  for (double v : {camera.fx, camera.fy, camera.cx, camera.cy, camera.rotation.w,
                   camera.rotation.x, camera.rotation.y, camera.rotation.z,
                   camera.translation.x(), camera.translation.y(), camera.translation.z()})
    mixd(v);
  return h;
}

namespace {

struct Entry {
  std::uint32_t prim;
  double weight, transmittance, footprint;
};

struct Accum {
  double rgb[3] = {0, 0, 0};
  double alpha = 0;
  double depth = 0;
};

/// Composites one pixel over an ordered splat list; shared by the tiled and
/// reference paths so both perform identical arithmetic.
template <class SplatRange>
void shade_pixel(int x, int y, const SplatRange& order, const std::vector<Splat2D>& splats,
                 std::span<const Primitive> prims, int feature_dim, unsigned channels,
                 double* feature_out, Accum& acc, std::vector<Entry>* entries) {
  double t = 1.0;
  for (const auto si : order) {
    const Splat2D& s = splats[si];
    if (x < s.bounds.x0 || x >= s.bounds.x1 || y < s.bounds.y0 || y >= s.bounds.y1) continue;
    const double dx = x - s.mean2d.x();
    const double dy = y - s.mean2d.y();
    const double m = dx * dx * s.conic(0, 0) + 2.0 * dx * dy * s.conic(0, 1) +
                     dy * dy * s.conic(1, 1);
    if (m > kSupportMahalanobis2) continue;
    const double g = std::min(1.0, std::exp(-0.5 * m));
    const Primitive& p = prims[s.index];
    const double a = p.opacity * g;
    const double w = a * t;
    if (channels & kRgb)
      for (int c = 0; c < 3; ++c) acc.rgb[c] += w * p.color[c];
    if ((channels & kFeature) && feature_out != nullptr)
      for (int d = 0; d < feature_dim; ++d) feature_out[d] += w * p.feature[d];
    acc.alpha += w;
    acc.depth += w * s.depth;
    if (entries != nullptr) entries->push_back({s.index, w, t, g});
    t *= 1.0 - a;
    if (t < kMinTransmittance) break;
  }
}

void store_pixel(RenderOutput& out, int x, int y, const Accum& acc, unsigned channels) {
  if (channels & kRgb)
    for (int c = 0; c < 3; ++c) out.rgb.at(x, y, c) = acc.rgb[c];
  if (channels & kAlpha) out.alpha.at(x, y) = acc.alpha;
  if (channels & kDepth) out.depth.at(x, y) = acc.alpha > 0.0 ? acc.depth / acc.alpha : 0.0;
}

RenderOutput allocate(const Camera& camera, int feature_dim, unsigned channels) {
  RenderOutput out;
  if (channels & kRgb) out.rgb = Image(camera.width, camera.height, 3);
  if (channels & kAlpha) out.alpha = Image(camera.width, camera.height, 1);
  if (channels & kDepth) out.depth = Image(camera.width, camera.height, 1);
  if ((channels & kFeature) && feature_dim > 0)
    out.feature = Image(camera.width, camera.height, feature_dim);
  return out;
}

}  // namespace

RenderOutput render(std::span<const Primitive> prims, int feature_dim, const Camera& camera,
                    const RenderOptions& opts) {
  const unsigned channels = opts.channels;
  RenderOutput out = allocate(camera, feature_dim, channels);
  PixelRect roi{0, 0, camera.width, camera.height};
  if (opts.roi) {
    roi.x0 = std::max(0, opts.roi->x0);
    roi.y0 = std::max(0, opts.roi->y0);
    roi.x1 = std::min(camera.width, opts.roi->x1);
    roi.y1 = std::min(camera.height, opts.roi->y1);
  }

  const std::vector<Splat2D> splats = project_splats(prims, camera);

  const int tiles_x = (camera.width + kTileSize - 1) / kTileSize;
  const int tiles_y = (camera.height + kTileSize - 1) / kTileSize;
  const int tile_count = tiles_x * tiles_y;
  std::vector<std::vector<std::uint32_t>> bins(static_cast<std::size_t>(tile_count));
  if (!roi.empty()) {
    for (std::uint32_t si = 0; si < splats.size(); ++si) {
      const PixelRect& b = splats[si].bounds;
      const int x0 = std::max(b.x0, roi.x0), x1 = std::min(b.x1, roi.x1);
      const int y0 = std::max(b.y0, roi.y0), y1 = std::min(b.y1, roi.y1);
      if (x0 >= x1 || y0 >= y1) continue;
      for (int ty = y0 / kTileSize; ty <= (y1 - 1) / kTileSize; ++ty)
        for (int tx = x0 / kTileSize; tx <= (x1 - 1) / kTileSize; ++tx)
          bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(si);
    }
  }

  const bool keep = opts.keep_weights;
  const std::size_t npix = static_cast<std::size_t>(camera.width) * camera.height;
  // Per-tile entry lists are concatenated in pixel order afterwards.
  std::vector<std::vector<Entry>> tile_entries(keep ? tile_count : 0);
  std::vector<std::uint32_t> pixel_counts(keep ? npix : 0, 0);

  parallel_for(tile_count, [&](std::int64_t ti) {
    const int tx = static_cast<int>(ti % tiles_x), ty = static_cast<int>(ti / tiles_x);
    const int x0 = std::max(tx * kTileSize, roi.x0);
    const int x1 = std::min((tx + 1) * kTileSize, roi.x1);
    const int y0 = std::max(ty * kTileSize, roi.y0);
    const int y1 = std::min((ty + 1) * kTileSize, roi.y1);
    const auto& bin = bins[ti];
    std::vector<Entry>* entries = keep ? &tile_entries[ti] : nullptr;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        Accum acc;
        double* fo = out.feature.empty() ? nullptr : out.feature.pixel(x, y).data();
        const std::size_t before = entries ? entries->size() : 0;
        shade_pixel(x, y, bin, splats, prims, feature_dim, channels, fo, acc, entries);
        store_pixel(out, x, y, acc, channels);
        if (keep)
          pixel_counts[static_cast<std::size_t>(y) * camera.width + x] =
              static_cast<std::uint32_t>(entries->size() - before);
      }
  });

  if (keep) {
    CompositeWeights& cw = out.weights;
    cw.width = camera.width;
    cw.height = camera.height;
    cw.offsets.assign(npix + 1, 0);
    for (std::size_t p = 0; p < npix; ++p) cw.offsets[p + 1] = cw.offsets[p] + pixel_counts[p];
    const std::size_t total = cw.offsets[npix];
    cw.prim.resize(total);
    cw.weight.resize(total);
    cw.transmittance.resize(total);
    cw.footprint.resize(total);
    parallel_for(tile_count, [&](std::int64_t ti) {
      const int tx = static_cast<int>(ti % tiles_x), ty = static_cast<int>(ti / tiles_x);
      const int x0 = std::max(tx * kTileSize, roi.x0);
      const int x1 = std::min((tx + 1) * kTileSize, roi.x1);
      const int y0 = std::max(ty * kTileSize, roi.y0);
      const int y1 = std::min((ty + 1) * kTileSize, roi.y1);
      std::size_t k = 0;
      const auto& src = tile_entries[ti];
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * camera.width + x;
          for (std::uint32_t o = cw.offsets[p]; o < cw.offsets[p + 1]; ++o, ++k) {
            cw.prim[o] = src[k].prim;
            cw.weight[o] = src[k].weight;
            cw.transmittance[o] = src[k].transmittance;
            cw.footprint[o] = src[k].footprint;
          }
        }
    });
    cw.fingerprint = render_fingerprint(prims, camera);
  }
  return out;
}

RenderOutput render(const Scene& scene, const Camera& camera, const RenderOptions& opts) {
  return render(scene.primitives, scene.feature_dim, camera, opts);
}

RenderOutput render_reference(std::span<const Primitive> prims, int feature_dim,
                              const Camera& camera, unsigned channels) {
  RenderOutput out = allocate(camera, feature_dim, channels);
  const std::vector<Splat2D> splats = project_splats(prims, camera);
  std::vector<std::uint32_t> all(splats.size());
  for (std::uint32_t i = 0; i < all.size(); ++i) all[i] = i;
  for (int y = 0; y < camera.height; ++y)
    for (int x = 0; x < camera.width; ++x) {
      Accum acc;
      double* fo = out.feature.empty() ? nullptr : out.feature.pixel(x, y).data();
      shade_pixel(x, y, all, splats, prims, feature_dim, channels, fo, acc, nullptr);
      store_pixel(out, x, y, acc, channels);
    }
  return out;
}

void PrimitiveGradients::resize(std::size_t n, int feature_dim) {
  color.assign(n, Vec3::Zero());
  feature.assign(n * static_cast<std::size_t>(std::max(feature_dim, 0)), 0.0);
  opacity.assign(n, 0.0);
}

void PrimitiveGradients::add(const PrimitiveGradients& o) {
  for (std::size_t i = 0; i < color.size(); ++i) color[i] += o.color[i];
  for (std::size_t i = 0; i < feature.size(); ++i) feature[i] += o.feature[i];
  for (std::size_t i = 0; i < opacity.size(); ++i) opacity[i] += o.opacity[i];
}

PrimitiveGradients render_gradients(std::span<const Primitive> prims, int feature_dim,
                                    const Camera& camera, const RenderOutput& forward,
                                    const Residuals& r, bool also_opacity) {
  const CompositeWeights& cw = forward.weights;
  if (cw.empty())
    throw Error(ErrorCode::ContractViolation, "forward pass was rendered without weights");
  if (cw.width != camera.width || cw.height != camera.height ||
      cw.fingerprint != render_fingerprint(prims, camera))
    throw Error(ErrorCode::ContractViolation,
                fmt::format("stale compositing weights for frame {}", camera.frame_index));
  auto check = [&](const Image* img, int channels, const char* name) {
    if (img != nullptr &&
        (img->width != camera.width || img->height != camera.height || img->channels != channels))
      throw Error(ErrorCode::DimensionMismatch,
                  fmt::format("{} residual is {}x{}x{}, expected {}x{}x{}", name, img->width,
                              img->height, img->channels, camera.width, camera.height, channels));
  };
  check(r.rgb, 3, "rgb");
  check(r.feature, feature_dim, "feature");
  check(r.depth, 1, "depth");
  check(r.alpha, 1, "alpha");
  if (r.depth != nullptr && forward.depth.empty())
    throw Error(ErrorCode::ContractViolation, "depth residual needs a forward depth channel");

  const std::size_t npix = static_cast<std::size_t>(camera.width) * camera.height;
  const std::size_t total = cw.prim.size();
  const auto D = static_cast<std::size_t>(std::max(feature_dim, 0));

  // Opacity: per pixel, walk back to front with the running suffix
  //   s_{k-1} = a_k e_k + (1 - a_k) s_k,   dOut/d(opacity_k) = G_k T_k (e_k - s_k)
  // where e_k is the residual-weighted "colour" of splat k across channels.
  std::vector<double> opacity_entry;
  if (also_opacity) {
    opacity_entry.assign(total, 0.0);
    parallel_for(camera.height, [&](std::int64_t yy) {
      const int y = static_cast<int>(yy);
      for (int x = 0; x < camera.width; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * camera.width + x;
        const std::uint32_t b = cw.offsets[p], e = cw.offsets[p + 1];
        if (b == e) continue;
        double alpha = 0.0;
        for (std::uint32_t o = b; o < e; ++o) alpha += cw.weight[o];
        const double depth = forward.depth.empty() ? 0.0 : forward.depth.at(x, y);
        double s = 0.0;
        for (std::uint32_t o = e; o-- > b;) {
          const Primitive& pr = prims[cw.prim[o]];
          double ek = 0.0;
          if (r.rgb != nullptr)
            for (int c = 0; c < 3; ++c) ek += r.rgb->at(x, y, c) * pr.color[c];
          if (r.feature != nullptr) {
            const auto rf = r.feature->pixel(x, y);
            for (std::size_t d = 0; d < D; ++d) ek += rf[d] * pr.feature[d];
          }
          if (r.alpha != nullptr) ek += r.alpha->at(x, y);
          if (r.depth != nullptr && alpha > 0.0) {
            // depth = N / A with N = sum w z, A = sum w: dDepth = (dN - depth dA) / A
            const double z = camera.to_camera(pr.position).z();
            ek += r.depth->at(x, y) * (z - depth) / alpha;
          }
          const double g = cw.footprint[o];
          const double a = pr.opacity * g;
          opacity_entry[o] = g * cw.transmittance[o] * (ek - s);
          s = a * ek + (1.0 - a) * s;
        }
      }
    });
  }

  PrimitiveGradients out;
  out.resize(prims.size(), feature_dim);
  // Serial accumulation in pixel order keeps sums bitwise independent of threads.
  for (std::size_t p = 0; p < npix; ++p) {
    const int x = static_cast<int>(p % camera.width), y = static_cast<int>(p / camera.width);
    for (std::uint32_t o = cw.offsets[p]; o < cw.offsets[p + 1]; ++o) {
      const std::uint32_t k = cw.prim[o];
      const double w = cw.weight[o];
      if (r.rgb != nullptr)
        for (int c = 0; c < 3; ++c) out.color[k][c] += w * r.rgb->at(x, y, c);
      if (r.feature != nullptr) {
        const auto rf = r.feature->pixel(x, y);
        double* g = out.feature.data() + k * D;
        for (std::size_t d = 0; d < D; ++d) g[d] += w * rf[d];
      }
      if (also_opacity) out.opacity[k] += opacity_entry[o];
    }
  }
  return out;
}

PrimitiveGradients render_gradients(const Scene& scene, const Camera& camera,
                                    const RenderOutput& forward, const Image& residual,
                                    GradChannel channel, bool also_opacity) {
  Residuals r;
  if (channel == GradChannel::Rgb)
    r.rgb = &residual;
  else
    r.feature = &residual;
  return render_gradients(scene.primitives, scene.feature_dim, camera, forward, r, also_opacity);
}

}  // namespace gspw
