#include "gspw/substitute.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "gspw/error.hpp"
#include "gspw/parallel.hpp"
#include "gspw/render.hpp"

namespace gspw {

namespace {

constexpr int kSubsamples = 5;           // per axis, per reference pixel, centred
constexpr double kSurfaceTolerance = 0.02;  // relative depth still counted as the front surface
constexpr double kRegionShare = 0.5;     // copies' share of the pixel weight
constexpr double kSolidAlpha = 0.5;

std::unordered_map<std::int64_t, std::size_t> slots(const Scene& scene) {
  std::unordered_map<std::int64_t, std::size_t> m;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) m[scene.primitives[i].id] = i;
  return m;
}

/// Bilinear sample with edge clamping; channels written to out[0..c).
void sample(const Image& img, double x, double y, double* out) {
  x = std::clamp(x, 0.0, img.width - 1.0);
  y = std::clamp(y, 0.0, img.height - 1.0);
  const int x0 = std::min(static_cast<int>(x), img.width - 1);
  const int y0 = std::min(static_cast<int>(y), img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0, fy = y - y0;
  for (int c = 0; c < img.channels; ++c)
    out[c] = (1 - fy) * ((1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c)) +
             fy * ((1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c));
}

}  // namespace

std::pair<Scene, TransplantRecord> transplant(const Scene& scene, const VoxelIndex& index,
                                              const Patch& target, const AffinityRecord& best,
                                              std::span<const std::int64_t> barred) {
  const auto& placement = best.placement;
  TransplantRecord rec;
  rec.map = placement.map;
  rec.target_voxels = target.voxels;
  rec.source_voxels = placement.source_voxels;
  std::sort(rec.target_voxels.begin(), rec.target_voxels.end());

  const auto slot = slots(scene);
  for (const auto& k : placement.source_voxels) {
    const auto* ids = index.anchors_in(k);
    if (ids == nullptr)
      throw Error(ErrorCode::StaleIndex,
                  fmt::format("source voxel ({}, {}, {}) is no longer occupied", k.i, k.j, k.k));
    for (std::int64_t id : *ids) {
      const auto it = slot.find(id);
      if (it == slot.end())
        throw Error(ErrorCode::StaleIndex, fmt::format("source anchor {} is gone", id));
      if (index.key_of(scene.primitives[it->second].position) != k)
        throw Error(ErrorCode::StaleIndex, fmt::format("source anchor {} has moved", id));
      rec.source_ids.push_back(id);
    }
  }
  std::sort(rec.source_ids.begin(), rec.source_ids.end());

  const std::unordered_set<std::int64_t> bar(barred.begin(), barred.end());
  std::unordered_set<std::int64_t> remove;
  for (const auto& k : rec.target_voxels)
    if (const auto* ids = index.anchors_in(k))
      for (std::int64_t id : *ids) {
        const auto lab = target.labels.find(id);
        const bool non_intact = lab != target.labels.end() && lab->second != AnchorLabel::Intact;
        if (bar.count(id) || non_intact) remove.insert(id);
      }

  Scene out = scene;
  out.primitives.clear();
  for (const auto& p : scene.primitives) {
    if (remove.count(p.id))
      rec.removed_ids.push_back(p.id);
    else
      out.primitives.push_back(p);
  }
  std::sort(rec.removed_ids.begin(), rec.removed_ids.end());

  const Quat q = rec.map.rotation();
  std::int64_t next = scene.max_id() + 1;
  for (std::int64_t id : rec.source_ids) {
    const Primitive& src = scene.primitives[slot.at(id)];
    Primitive copy = src;
    copy.position = rec.map.apply(src.position);
    copy.rotation = q * src.rotation;
    if (copy.position == src.position && copy.rotation == src.rotation && !remove.count(id)) {
      ++rec.suppressed;
      continue;
    }
    copy.id = next++;
    if (!std::binary_search(rec.target_voxels.begin(), rec.target_voxels.end(),
                            index.key_of(copy.position))) {
      copy.opacity = 0.0;
      rec.zeroed_ids.push_back(copy.id);
    }
    rec.new_ids.push_back(copy.id);
    out.primitives.push_back(std::move(copy));
  }
  return {std::move(out), std::move(rec)};
}

Reprojection reproject_background(const Image& ref_rgb, const Image& ref_depth,
                                  const Camera& ref_camera, const Camera& tgt_camera,
                                  const Mask& region, const Mask* exclude) {
  if (ref_rgb.width != ref_camera.width || ref_rgb.height != ref_camera.height ||
      !(ref_depth.width == ref_rgb.width && ref_depth.height == ref_rgb.height) ||
      region.width != tgt_camera.width || region.height != tgt_camera.height)
    throw Error(ErrorCode::DimensionMismatch, "reprojection inputs do not match their cameras");

  const int w = tgt_camera.width, h = tgt_camera.height;
  Reprojection out{Image(w, h, 3), Mask(w, h)};
  std::vector<double> zbuf(static_cast<std::size_t>(w) * h, std::numeric_limits<double>::infinity());
  if (!region.any()) return out;

  auto depth_ok = [&](int x, int y) {
    return ref_depth.at(x, y) > 0.0 && (exclude == nullptr || !exclude->get(x, y));
  };
  struct Hit {
    std::size_t pixel;
    double z, off2;  // target depth, squared distance to the target pixel centre
    double slack;    // depth change to the neighbouring reference pixels
    double rgb[3];
  };
  // Sub-sample (sx, sy) of reference pixel (x, y), if it lands in the region.
  auto warp = [&](int x, int y, int sx, int sy) -> std::optional<Hit> {
    const double px = x + (sx - kSubsamples / 2) / static_cast<double>(kSubsamples);
    const double py = y + (sy - kSubsamples / 2) / static_cast<double>(kSubsamples);
    // Interpolate only across valid neighbours; otherwise use this pixel alone.
    const int nx = px < x ? x - 1 : x + 1, ny = py < y ? y - 1 : y + 1;
    const bool smooth = nx >= 0 && ny >= 0 && nx < ref_rgb.width && ny < ref_rgb.height &&
                        depth_ok(nx, y) && depth_ok(x, ny) && depth_ok(nx, ny);
    Hit hit{};
    double d = ref_depth.at(x, y);
    for (const auto& [qx, qy] : {std::pair{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}})
      if (qx >= 0 && qy >= 0 && qx < ref_rgb.width && qy < ref_rgb.height && depth_ok(qx, qy))
        hit.slack = std::max(hit.slack, std::abs(ref_depth.at(qx, qy) - d));
    if (smooth) {
      sample(ref_depth, px, py, &d);
      sample(ref_rgb, px, py, hit.rgb);
    } else {
      for (int ch = 0; ch < 3; ++ch) hit.rgb[ch] = ref_rgb.at(x, y, ch);
    }
    const Vec3 cam((px - ref_camera.cx) / ref_camera.fx * d, (py - ref_camera.cy) / ref_camera.fy * d, d);
    const Vec3 t = tgt_camera.to_camera(ref_camera.to_world(cam));
    if (t.z() <= kNearPlane) return std::nullopt;
    const double fu = tgt_camera.fx * t.x() / t.z() + tgt_camera.cx;
    const double fv = tgt_camera.fy * t.y() / t.z() + tgt_camera.cy;
    const int u = static_cast<int>(std::floor(fu + 0.5));
    const int v = static_cast<int>(std::floor(fv + 0.5));
    if (u < 0 || v < 0 || u >= w || v >= h || !region.get(u, v)) return std::nullopt;
    hit.pixel = static_cast<std::size_t>(v) * w + u;
    hit.z = t.z();
    hit.off2 = (fu - u) * (fu - u) + (fv - v) * (fv - v);
    return hit;
  };
  auto for_each_hit = [&](auto&& fn) {
    for (int y = 0; y < ref_rgb.height; ++y)
      for (int x = 0; x < ref_rgb.width; ++x) {
        if (!depth_ok(x, y)) continue;
        for (int sy = 0; sy < kSubsamples; ++sy)
          for (int sx = 0; sx < kSubsamples; ++sx)
            if (const auto hit = warp(x, y, sx, sy)) fn(*hit);
      }
  };

  // Pass 1: nearest surface per target pixel. Pass 2: among samples on that
  // surface, the one landing closest to the pixel centre supplies the colour.
  for_each_hit([&](const Hit& hit) { zbuf[hit.pixel] = std::min(zbuf[hit.pixel], hit.z); });
  std::vector<double> best(zbuf.size(), std::numeric_limits<double>::infinity());
  for_each_hit([&](const Hit& hit) {
    if (hit.z - hit.slack > zbuf[hit.pixel] * (1.0 + kSurfaceTolerance) || hit.off2 >= best[hit.pixel])
      return;
    best[hit.pixel] = hit.off2;
    for (int ch = 0; ch < 3; ++ch) out.rgb.data[hit.pixel * 3 + ch] = hit.rgb[ch];
    out.valid.bits[hit.pixel] = 1;
  });

  // Fill narrow holes from the nearest originally valid 8-neighbour.
  const Mask warped = out.valid;
  const Image colours = out.rgb;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!region.get(x, y) || warped.get(x, y)) continue;
      int bx = -1, by = -1, bd = 3;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int qx = x + dx, qy = y + dy;
          if (!warped.inside(qx, qy) || !warped.get(qx, qy)) continue;
          const int d2 = dx * dx + dy * dy;
          if (d2 < bd) {
            bd = d2;
            bx = qx;
            by = qy;
          }
        }
      if (bx < 0) continue;
      for (int ch = 0; ch < 3; ++ch) out.rgb.at(x, y, ch) = colours.at(bx, by, ch);
      out.valid.set(x, y);
    }
  return out;
}

Reprojection reproject_background(const Scene& scene, const Camera& ref_camera,
                                  const Camera& tgt_camera, const Mask& region) {
  RenderOptions opts;
  opts.channels = kRgb | kAlpha | kDepth;
  RenderOutput r = render(scene, ref_camera, opts);
  for (std::size_t p = 0; p < r.alpha.pixel_count(); ++p)
    if (r.alpha.data[p] < kSolidAlpha) r.depth.data[p] = 0.0;
  return reproject_background(r.rgb, r.depth, ref_camera, tgt_camera, region);
}

Blend blend_edges(const Reprojection& warped, const Image& rendered, int band_px, double w_alpha) {
  if (warped.rgb.width != rendered.width || warped.rgb.height != rendered.height ||
      rendered.channels != warped.rgb.channels || warped.valid.width != rendered.width ||
      warped.valid.height != rendered.height)
    throw Error(ErrorCode::DimensionMismatch, "blend_edges inputs differ in size");
  const int w = rendered.width, h = rendered.height;
  const Mask closed = erode3x3(dilate3x3(warped.valid));

  Blend out{rendered, Mask(w, h)};
  const int r2 = band_px * band_px;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!warped.valid.get(x, y)) continue;
      bool near_edge = false;
      for (int dy = -band_px; dy <= band_px && !near_edge; ++dy)
        for (int dx = -band_px; dx <= band_px; ++dx) {
          if (dx * dx + dy * dy > r2) continue;
          const int qx = x + dx, qy = y + dy;
          if (closed.inside(qx, qy) && !closed.get(qx, qy)) {
            near_edge = true;
            break;
          }
        }
      for (int c = 0; c < rendered.channels; ++c) {
        const double b = warped.rgb.at(x, y, c);
        out.image.at(x, y, c) = near_edge ? w_alpha * b + (1.0 - w_alpha) * rendered.at(x, y, c) : b;
      }
      if (near_edge) out.band.set(x, y);
    }
  return out;
}

SupervisionSet build_supervision(const Scene& scene, std::span<const std::int64_t> copies,
                                 std::span<const FrameMask> masks,
                                 std::span<const Image> observed, const SupervisionConfig& cfg) {
  SupervisionSet out;
  const auto slot = slots(scene);
  std::vector<std::uint8_t> is_copy(scene.primitives.size(), 0);
  std::vector<Vec3> live;
  for (std::int64_t id : copies) {
    const auto it = slot.find(id);
    if (it == slot.end() || scene.primitives[it->second].opacity <= 0.0) continue;
    is_copy[it->second] = 1;
    live.push_back(scene.primitives[it->second].position);
  }
  if (live.empty()) return out;

  struct FrameInfo {
    std::size_t mask_slot = 0;
    const Camera* cam = nullptr;
    RenderOutput render;
    Mask region;
    std::size_t region_px = 0;
    bool occluded = false;
  };
  std::vector<FrameInfo> frames;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    const Camera* cam = scene.camera_for_frame(masks[m].frame_index);
    if (cam == nullptr) continue;
    bool sees = false;
    for (const auto& p : live) sees = sees || project_point(p, *cam).visible;
    if (!sees) continue;
    FrameInfo fi;
    fi.mask_slot = m;
    fi.cam = cam;
    RenderOptions opts;
    opts.channels = kRgb | kAlpha | kDepth;
    opts.keep_weights = true;
    fi.render = render(scene, *cam, opts);
    const auto& wts = fi.render.weights;
    fi.region = Mask(cam->width, cam->height);
    for (std::size_t p = 0; p < fi.render.alpha.pixel_count(); ++p) {
      const double a = fi.render.alpha.data[p];
      if (a < kSolidAlpha) continue;
      double share = 0.0;
      for (auto o = wts.offsets[p]; o < wts.offsets[p + 1]; ++o)
        if (is_copy[wts.prim[o]]) share += wts.weight[o];
      if (share >= kRegionShare * a) {
        fi.region.bits[p] = 1;
        ++fi.region_px;
        fi.occluded = fi.occluded || masks[m].bitmap.bits[p];
      }
    }
    fi.render.weights = {};
    if (fi.region_px > 0) frames.push_back(std::move(fi));
  }

  // Reference: forced, or the earliest unoccluded frame showing at least half
  // as much of the region as the best unoccluded view.
  const FrameInfo* ref = nullptr;
  if (cfg.ref_frame >= 0) {
    for (const auto& f : frames)
      if (f.cam->frame_index == cfg.ref_frame) ref = &f;
    if (ref == nullptr)
      throw Error(ErrorCode::Config,
                  fmt::format("reference frame {} does not see the transplanted region", cfg.ref_frame));
  } else {
    std::size_t most = 0;
    for (const auto& f : frames)
      if (!f.occluded) most = std::max(most, f.region_px);
    for (const auto& f : frames)
      if (!f.occluded && 2 * f.region_px >= most) {
        ref = &f;
        break;
      }
  }
  if (ref == nullptr) return out;
  out.ref_frame = ref->cam->frame_index;

  std::vector<const FrameInfo*> occluded;
  for (const auto& f : frames)
    if (f.occluded && &f != ref) occluded.push_back(&f);
  if (cfg.max_frames > 0 && static_cast<int>(occluded.size()) > cfg.max_frames) {
    std::vector<const FrameInfo*> pick;
    const int n = static_cast<int>(occluded.size()), k = cfg.max_frames;
    for (int i = 0; i < k; ++i)
      pick.push_back(occluded[k == 1 ? 0 : static_cast<std::size_t>(std::lround(i * (n - 1.0) / (k - 1)))]);
    occluded = pick;
  }

  // Further unoccluded views fill what the primary reference cannot see,
  // nearest to the supervised frame first.
  std::vector<const FrameInfo*> helpers;
  if (cfg.extra_refs)
    for (const auto& f : frames)
      if (!f.occluded && &f != ref) helpers.push_back(&f);

  struct RefView {
    const FrameInfo* info;
    Image depth;
    const Image* rgb;
    const Mask* exclude;
  };
  std::map<const FrameInfo*, RefView> views;
  auto view_of = [&](const FrameInfo* f) -> const RefView& {
    auto it = views.find(f);
    if (it != views.end()) return it->second;
    RefView v{f, f->render.depth, observed.empty() ? &f->render.rgb : &observed[f->mask_slot],
              &masks[f->mask_slot].bitmap};
    for (std::size_t p = 0; p < v.depth.pixel_count(); ++p)
      if (f->render.alpha.data[p] < kSolidAlpha) v.depth.data[p] = 0.0;
    return views.emplace(f, std::move(v)).first->second;
  };

  for (const FrameInfo* f : occluded) {
    std::vector<const FrameInfo*> order{ref};
    std::vector<const FrameInfo*> rest = helpers;
    const int fi = f->cam->frame_index;
    std::stable_sort(rest.begin(), rest.end(), [&](const FrameInfo* a, const FrameInfo* b) {
      return std::abs(a->cam->frame_index - fi) < std::abs(b->cam->frame_index - fi);
    });
    order.insert(order.end(), rest.begin(), rest.end());

    Reprojection warped{Image(f->cam->width, f->cam->height, 3), Mask(f->cam->width, f->cam->height)};
    Mask todo = f->region;
    for (const FrameInfo* r : order) {
      if (!todo.any()) break;
      const RefView& v = view_of(r);
      const Reprojection part = reproject_background(*v.rgb, v.depth, *r->cam, *f->cam, todo, v.exclude);
      for (std::size_t p = 0; p < todo.bits.size(); ++p) {
        if (!part.valid.bits[p]) continue;
        for (int c = 0; c < 3; ++c) warped.rgb.data[p * 3 + c] = part.rgb.data[p * 3 + c];
        warped.valid.bits[p] = 1;
        todo.bits[p] = 0;
      }
    }
    if (!warped.valid.any()) continue;
    Blend b = blend_edges(warped, f->render.rgb, cfg.band_px, cfg.w_alpha);
    out.frames.push_back({f->cam->frame_index, *f->cam, std::move(b.image), warped.valid, std::move(b.band)});
  }
  return out;
}

namespace {

/// Primitives that can touch a frame's supervised pixels; geometry is frozen
/// during fusion, so this list is computed once.
struct FrameProblem {
  const FusionSupervision* sup = nullptr;
  PixelRect roi;
  std::size_t pixels = 0;
  std::vector<std::size_t> members;  // indices into the scene
  std::vector<Primitive> prims;
};

double frame_loss(const FrameProblem& fp, const RenderOutput& r) {
  double sum = 0.0;
  const auto& m = fp.sup->mask;
  for (int y = fp.roi.y0; y < fp.roi.y1; ++y)
    for (int x = fp.roi.x0; x < fp.roi.x1; ++x)
      if (m.get(x, y))
        for (int c = 0; c < 3; ++c) sum += std::abs(r.rgb.at(x, y, c) - fp.sup->target.at(x, y, c));
  return fp.pixels > 0 ? sum / (3.0 * fp.pixels) : 0.0;
}

RenderOutput render_frame(const FrameProblem& fp, int feature_dim, bool weights) {
  RenderOptions opts;
  opts.channels = kRgb;
  opts.keep_weights = weights;
  opts.roi = fp.roi;
  return render(fp.prims, feature_dim, fp.sup->camera, opts);
}

}  // namespace

double fusion_loss(const Scene& scene, std::span<const FusionSupervision> sup) {
  if (sup.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : sup) {
    FrameProblem fp;
    fp.sup = &s;
    fp.roi = bounding_rect(s.mask);
    fp.pixels = s.mask.count();
    if (fp.roi.empty()) continue;
    RenderOptions opts;
    opts.channels = kRgb;
    opts.roi = fp.roi;
    total += frame_loss(fp, render(scene, s.camera, opts));
  }
  return total / static_cast<double>(sup.size());
}

FuseResult fuse(const Scene& scene, std::span<const FusionSupervision> sup,
                std::span<const std::int64_t> params, const FuseConfig& cfg) {
  FuseResult res;
  res.scene = scene;
  if (sup.empty()) throw Error(ErrorCode::Validation, "fusion needs at least one supervised frame");
  if (cfg.iters < 0 || !(cfg.step > 0))
    throw Error(ErrorCode::Config, "fusion needs iters >= 0 and step > 0");

  // Parameters: colour and opacity of the listed, visible primitives.
  const auto slot = slots(scene);
  std::vector<std::size_t> param_prim;
  std::unordered_map<std::size_t, std::size_t> param_of;
  for (std::int64_t id : params) {
    const auto it = slot.find(id);
    if (it == slot.end() || scene.primitives[it->second].opacity <= 0.0) continue;
    if (param_of.emplace(it->second, param_prim.size()).second) param_prim.push_back(it->second);
  }

  const int D = scene.feature_dim;
  std::vector<FrameProblem> problems;
  for (const auto& s : sup) {
    FrameProblem fp;
    fp.sup = &s;
    fp.roi = bounding_rect(s.mask);
    fp.pixels = s.mask.count();
    if (fp.roi.empty()) continue;
    for (const auto& sp : project_splats(scene.primitives, s.camera)) {
      const auto& b = sp.bounds;
      if (b.x1 <= fp.roi.x0 || b.x0 >= fp.roi.x1 || b.y1 <= fp.roi.y0 || b.y0 >= fp.roi.y1) continue;
      fp.members.push_back(sp.index);
    }
    std::sort(fp.members.begin(), fp.members.end());
    for (std::size_t i : fp.members) fp.prims.push_back(scene.primitives[i]);
    problems.push_back(std::move(fp));
  }
  const double nframes = static_cast<double>(sup.size());

  const std::size_t P = param_prim.size();
  std::vector<Vec3> color(P);
  std::vector<double> opacity(P);
  for (std::size_t k = 0; k < P; ++k) {
    color[k] = scene.primitives[param_prim[k]].color;
    opacity[k] = scene.primitives[param_prim[k]].opacity;
  }
  auto load = [&](const std::vector<Vec3>& c, const std::vector<double>& o) {
    for (auto& fp : problems)
      for (std::size_t j = 0; j < fp.members.size(); ++j) {
        const auto it = param_of.find(fp.members[j]);
        if (it == param_of.end()) continue;
        fp.prims[j].color = c[it->second];
        fp.prims[j].opacity = o[it->second];
      }
  };
  auto evaluate = [&](std::vector<RenderOutput>& outs, bool weights) {
    double total = 0.0;
    outs.resize(problems.size());
    for (std::size_t f = 0; f < problems.size(); ++f) {
      outs[f] = render_frame(problems[f], D, weights);
      total += frame_loss(problems[f], outs[f]);
    }
    return total / nframes;
  };

  std::vector<RenderOutput> current;
  double loss = evaluate(current, true);
  res.initial_loss = loss;
  if (P == 0) {
    res.trace.assign(static_cast<std::size_t>(cfg.iters), loss);
    return res;
  }

  for (int it = 0; it < cfg.iters; ++it) {
    // Gradient and diagonal scale (sum of the weights each parameter receives).
    std::vector<Vec3> gc(P, Vec3::Zero());
    std::vector<double> go(P, 0.0), hc(P, 0.0), ho(P, 0.0);
    for (std::size_t f = 0; f < problems.size(); ++f) {
      const FrameProblem& fp = problems[f];
      const RenderOutput& r = current[f];
      const double scale = 1.0 / (3.0 * fp.pixels * nframes);
      Image resid(r.rgb.width, r.rgb.height, 3);
      const auto& m = fp.sup->mask;
      for (int y = fp.roi.y0; y < fp.roi.y1; ++y)
        for (int x = fp.roi.x0; x < fp.roi.x1; ++x) {
          if (!m.get(x, y)) continue;
          for (int c = 0; c < 3; ++c) {
            const double d = r.rgb.at(x, y, c) - fp.sup->target.at(x, y, c);
            resid.at(x, y, c) = d > 0 ? scale : d < 0 ? -scale : 0.0;
          }
          const std::size_t p = static_cast<std::size_t>(y) * r.rgb.width + x;
          const auto& w = r.weights;
          for (auto o = w.offsets[p]; o < w.offsets[p + 1]; ++o) {
            const auto pi = param_of.find(fp.members[w.prim[o]]);
            if (pi == param_of.end()) continue;
            hc[pi->second] += w.weight[o] * scale;
            ho[pi->second] += w.footprint[o] * w.transmittance[o] * scale;
          }
        }
      Residuals res_in;
      res_in.rgb = &resid;
      const PrimitiveGradients g = render_gradients(fp.prims, D, fp.sup->camera, r, res_in, true);
      for (std::size_t j = 0; j < fp.members.size(); ++j) {
        const auto pi = param_of.find(fp.members[j]);
        if (pi == param_of.end()) continue;
        gc[pi->second] += g.color[j];
        go[pi->second] += g.opacity[j];
      }
    }
    std::vector<Vec3> dc(P, Vec3::Zero());
    std::vector<double> dop(P, 0.0);
    for (std::size_t k = 0; k < P; ++k) {
      if (hc[k] > 1e-12) dc[k] = gc[k] / hc[k];
      if (ho[k] > 1e-12) dop[k] = go[k] / (3.0 * ho[k]);
    }

    double t = cfg.step;
    bool accepted = false;
    for (int h = 0; h <= cfg.max_halvings; ++h, t *= 0.5) {
      std::vector<Vec3> c2(P);
      std::vector<double> o2(P);
      for (std::size_t k = 0; k < P; ++k) {
        c2[k] = (color[k] - t * dc[k]).cwiseMax(0.0).cwiseMin(1.0);
        o2[k] = std::clamp(opacity[k] - t * dop[k], 0.0, 1.0);
      }
      load(c2, o2);
      std::vector<RenderOutput> trial;
      const double l2 = evaluate(trial, true);
      if (l2 <= loss) {
        color = std::move(c2);
        opacity = std::move(o2);
        current = std::move(trial);
        loss = l2;
        accepted = true;
        break;
      }
    }
    if (accepted)
      ++res.accepted;
    else
      load(color, opacity);
    res.trace.push_back(loss);
  }

  for (std::size_t k = 0; k < P; ++k) {
    res.scene.primitives[param_prim[k]].color = color[k];
    res.scene.primitives[param_prim[k]].opacity = opacity[k];
  }
  return res;
}

}  // namespace gspw
