#include "gspw/locate.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "gspw/error.hpp"
#include "gspw/manifold.hpp"
#include "gspw/parallel.hpp"
#include "gspw/render.hpp"

namespace gspw {

namespace {

constexpr double kSeedLift = 1e-4;  // metres

const Camera& camera_for_mask(const Scene& scene, const FrameMask& mask) {
  const Camera* cam = scene.camera_for_frame(mask.frame_index);
  if (cam == nullptr)
    throw Error(ErrorCode::DimensionMismatch,
                fmt::format("mask for frame {} has no matching camera", mask.frame_index));
  if (cam->width != mask.bitmap.width || cam->height != mask.bitmap.height)
    throw Error(ErrorCode::DimensionMismatch,
                fmt::format("mask for frame {} is {}x{} but the camera is {}x{}", mask.frame_index,
                            mask.bitmap.width, mask.bitmap.height, cam->width, cam->height));
  return *cam;
}

bool hits_mask(const Vec3& position, const Camera& cam, const Mask& mask, bool& visible) {
  const ProjectedPoint pp = project_point(position, cam);
  visible = pp.visible;
  if (!pp.visible) return false;
  const auto [x, y] = rounded_pixel(pp.pixel);
  return mask.get(x, y);
}

}  // namespace

void LocateConfig::validate() const {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
      throw Error(ErrorCode::Config, fmt::format("{} must lie in [0, 1], got {}", name, v));
  };
  unit(opacity_thresh, "opacity_thresh");
  unit(cmp, "cmp");
  unit(alpha_missing_thresh, "alpha_missing_thresh");
}

std::vector<std::int64_t> identify_targets(const Scene& scene, std::span<const FrameMask> masks,
                                           const LocateConfig& cfg) {
  cfg.validate();
  std::vector<const Camera*> cams;
  for (const auto& m : masks) cams.push_back(&camera_for_mask(scene, m));

  const auto& prims = scene.primitives;
  std::vector<std::uint8_t> hit(prims.size(), 0);
  parallel_for(static_cast<std::int64_t>(prims.size()), [&](std::int64_t i) {
    const Primitive& p = prims[i];
    if (!(p.opacity < cfg.opacity_thresh)) return;
    for (std::size_t f = 0; f < masks.size(); ++f) {
      bool visible = false;
      if (hits_mask(p.position, *cams[f], masks[f].bitmap, visible)) {
        hit[i] = 1;
        return;
      }
    }
  });
  std::vector<std::int64_t> ids;
  for (std::size_t i = 0; i < prims.size(); ++i)
    if (hit[i]) ids.push_back(prims[i].id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::map<std::int64_t, Recurrence> recurrence(const Scene& scene, std::span<const std::int64_t> ids,
                                              std::span<const FrameMask> masks,
                                              std::span<const int> frames) {
  std::unordered_map<std::int64_t, std::size_t> slot;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) slot[scene.primitives[i].id] = i;
  std::vector<const FrameMask*> used;
  for (const auto& m : masks)
    if (frames.empty() || std::find(frames.begin(), frames.end(), m.frame_index) != frames.end())
      used.push_back(&m);
  std::vector<const Camera*> cams;
  for (const auto* m : used) cams.push_back(&camera_for_mask(scene, *m));

  std::vector<Recurrence> rec(ids.size());
  parallel_for(static_cast<std::int64_t>(ids.size()), [&](std::int64_t n) {
    const auto it = slot.find(ids[n]);
    if (it == slot.end()) return;
    const Vec3& pos = scene.primitives[it->second].position;
    for (std::size_t f = 0; f < used.size(); ++f) {
      bool visible = false;
      const bool inside = hits_mask(pos, *cams[f], used[f]->bitmap, visible);
      rec[n].visible += visible;
      rec[n].inside += inside;
    }
  });
  std::map<std::int64_t, Recurrence> out;
  for (std::size_t n = 0; n < ids.size(); ++n) out[ids[n]] = rec[n];
  return out;
}

Classification classify_anchors(const Scene& scene, const Patch& patch,
                                std::span<const FrameMask> masks, const LocateConfig& cfg,
                                std::span<const std::int64_t> missing,
                                std::span<const int> frames) {
  cfg.validate();
  const std::set<std::int64_t> missing_set(missing.begin(), missing.end());
  Classification c;
  for (const auto& [id, r] : recurrence(scene, patch.anchor_ids, masks, frames)) {
    c.rates[id] = r.rate();
    if (missing_set.count(id))
      c.labels[id] = AnchorLabel::Missing;
    else if (r.visible == 0 || r.rate() >= cfg.cmp)
      c.labels[id] = AnchorLabel::Incomplete;
    else
      c.labels[id] = AnchorLabel::Intact;
  }
  return c;
}

Scene without_anchors(const Scene& scene, std::span<const std::int64_t> ids) {
  const std::unordered_set<std::int64_t> drop(ids.begin(), ids.end());
  Scene out = scene;
  for (auto& p : out.primitives)
    if (drop.count(p.id)) p.opacity = 0.0;
  return out;
}

MissingRegion missing_regions(const Scene& removed, const Camera& camera,
                              std::span<const FrameMask> masks, const VoxelIndex& index,
                              const LocateConfig& cfg) {
  const FrameMask* sem = nullptr;
  for (const auto& m : masks)
    if (m.frame_index == camera.frame_index) sem = &m;
  if (sem == nullptr)
    throw Error(ErrorCode::Validation,
                fmt::format("frame {} has no semantic mask", camera.frame_index));
  camera_for_mask(removed, *sem);

  MissingRegion out;
  out.frame_index = camera.frame_index;
  out.mask = Mask(camera.width, camera.height);
  const auto roi = bounding_rect(sem->bitmap);
  if (roi.empty()) return out;
  RenderOptions opts;
  opts.channels = kAlpha;
  opts.roi = roi;
  const RenderOutput r = render(removed, camera, opts);
  for (int y = roi.y0; y < roi.y1; ++y)
    for (int x = roi.x0; x < roi.x1; ++x)
      if (sem->bitmap.get(x, y) && r.alpha.at(x, y) < cfg.alpha_missing_thresh) out.mask.set(x, y);

  if (!removed.manifold) return out;
  std::vector<std::pair<int, int>> pixels;
  for (int y = roi.y0; y < roi.y1; ++y)
    for (int x = roi.x0; x < roi.x1; ++x)
      if (out.mask.get(x, y)) pixels.emplace_back(x, y);
  std::vector<std::optional<VoxelKey>> keys(pixels.size());
  const Vec3 eye = camera.center();
  parallel_for(static_cast<std::int64_t>(pixels.size()), [&](std::int64_t n) {
    const auto hit = intersect_ground(eye, camera.ray_direction(pixels[n].first, pixels[n].second),
                                      *removed.manifold);
    // Hits converge from below the surface; lift them so a surface lying exactly
    // on a cell boundary keys into the cell that holds its anchors.
    if (hit) keys[n] = voxel_of(*hit + Vec3(0.0, 0.0, kSeedLift), index);
  });
  std::set<VoxelKey> seeds;
  for (const auto& k : keys)
    if (k) seeds.insert(*k);
  out.seeds.assign(seeds.begin(), seeds.end());
  return out;
}

int select_reference_frame(std::span<const FrameMask> masks, const LocateConfig& cfg) {
  if (cfg.ref_frame >= 0) {
    for (const auto& m : masks)
      if (m.frame_index == cfg.ref_frame) return cfg.ref_frame;
    throw Error(ErrorCode::Config, fmt::format("reference frame {} has no mask", cfg.ref_frame));
  }
  if (masks.empty()) throw Error(ErrorCode::Validation, "no masks given");
  int best = masks.front().frame_index;
  std::size_t count = 0;
  for (const auto& m : masks) {
    const std::size_t c = m.bitmap.count();
    if (c > count) {
      count = c;
      best = m.frame_index;
    }
  }
  return best;
}

std::vector<std::vector<VoxelKey>> connected_components(std::vector<VoxelKey> voxels) {
  std::sort(voxels.begin(), voxels.end());
  voxels.erase(std::unique(voxels.begin(), voxels.end()), voxels.end());
  std::unordered_set<VoxelKey, VoxelKeyHash> left(voxels.begin(), voxels.end());
  std::vector<std::vector<VoxelKey>> out;
  for (const auto& start : voxels) {
    if (!left.erase(start)) continue;
    std::vector<VoxelKey> comp{start}, stack{start};
    while (!stack.empty()) {
      const VoxelKey v = stack.back();
      stack.pop_back();
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj)
          for (int dk = -1; dk <= 1; ++dk) {
            const VoxelKey n{v.i + di, v.j + dj, v.k + dk};
            if (left.erase(n)) {
              comp.push_back(n);
              stack.push_back(n);
            }
          }
    }
    std::sort(comp.begin(), comp.end());
    out.push_back(std::move(comp));
  }
  return out;
}

LocateResult locate(const Scene& scene, std::span<const FrameMask> masks, const VoxelIndex& index,
                    const LocateConfig& cfg) {
  LocateResult res;
  res.targets = identify_targets(scene, masks, cfg);
  res.ref_frame = select_reference_frame(masks, cfg);
  const Camera* ref = scene.camera_for_frame(res.ref_frame);
  if (ref == nullptr)
    throw Error(ErrorCode::Validation, fmt::format("reference frame {} has no camera", res.ref_frame));

  const Scene removed = without_anchors(scene, res.targets);
  res.region = missing_regions(removed, *ref, masks, index, cfg);

  // Targets whose centre shows through a hole in the reference view are missing.
  for (std::int64_t id : res.targets) {
    const auto idx = scene.find_primitive(id);
    const ProjectedPoint pp = project_point(scene.primitives[idx].position, *ref);
    if (!pp.visible) continue;
    const auto [x, y] = rounded_pixel(pp.pixel);
    if (res.region.mask.get(x, y)) res.missing.push_back(id);
  }

  std::vector<int> frames;
  if (cfg.window >= 0)
    for (const auto& m : masks)
      if (std::abs(m.frame_index - res.ref_frame) <= cfg.window) frames.push_back(m.frame_index);

  std::vector<VoxelKey> target_voxels = res.region.seeds;
  for (std::int64_t id : res.targets) target_voxels.push_back(index.anchor_to_voxel.at(id));
  for (auto& comp : connected_components(std::move(target_voxels))) {
    Patch p = extract_patch(index, std::move(comp));
    p.labels = classify_anchors(scene, p, masks, cfg, res.missing, frames).labels;
    res.patches.push_back(std::move(p));
  }
  return res;
}

std::vector<std::int64_t> barred_anchors(const LocateResult& result) {
  std::set<std::int64_t> out(result.targets.begin(), result.targets.end());
  for (const auto& p : result.patches)
    for (const auto& [id, label] : p.labels)
      if (label != AnchorLabel::Intact) out.insert(id);
  return {out.begin(), out.end()};
}

}  // namespace gspw
