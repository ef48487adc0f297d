#include "gspw/voxel_index.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "gspw/error.hpp"

namespace gspw {

VoxelKey VoxelIndex::key_of(const Vec3& position) const {
  return {static_cast<int>(std::floor((position.x() - origin.x()) / size)),
          static_cast<int>(std::floor((position.y() - origin.y()) / size)),
          static_cast<int>(std::floor((position.z() - origin.z()) / size))};
}

Vec3 VoxelIndex::center(const VoxelKey& key) const {
  return origin + size * Vec3(key.i + 0.5, key.j + 0.5, key.k + 0.5);
}

const std::vector<std::int64_t>* VoxelIndex::anchors_in(const VoxelKey& key) const {
  const auto it = voxel_to_anchors.find(key);
  return it == voxel_to_anchors.end() ? nullptr : &it->second;
}

std::vector<VoxelKey> VoxelIndex::occupied_keys() const {
  std::vector<VoxelKey> keys;
  keys.reserve(voxel_to_anchors.size());
  for (const auto& [key, ids] : voxel_to_anchors) keys.push_back(key);
  std::sort(keys.begin(), keys.end());
  return keys;
}

Vec3 default_origin(const Scene& scene, double voxel_size) {
  if (scene.primitives.empty()) return Vec3::Zero();
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  for (const auto& p : scene.primitives) lo = lo.cwiseMin(p.position);
  return (lo / voxel_size).array().floor().matrix() * voxel_size;
}

VoxelIndex build_index(const Scene& scene, double voxel_size, std::optional<Vec3> origin) {
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size))
    throw Error(ErrorCode::Config, fmt::format("voxel size must be positive, got {}", voxel_size));
  for (const auto& p : scene.primitives)
    if (!p.position.allFinite())
      throw Error(ErrorCode::Validation,
                  fmt::format("primitive {} has a non-finite position", p.id));

  VoxelIndex index;
  index.size = voxel_size;
  index.origin = origin ? *origin : default_origin(scene, voxel_size);
  index.anchor_to_voxel.reserve(scene.primitives.size());
  for (const auto& p : scene.primitives) {
    const VoxelKey key = index.key_of(p.position);
    index.voxel_to_anchors[key].push_back(p.id);
    index.anchor_to_voxel.emplace(p.id, key);
  }
  for (auto& [key, ids] : index.voxel_to_anchors) std::sort(ids.begin(), ids.end());
  return index;
}

VoxelKey voxel_of(const Vec3& position, const VoxelIndex& index) { return index.key_of(position); }

const char* to_string(AnchorLabel label) {
  switch (label) {
    case AnchorLabel::Missing: return "missing";
    case AnchorLabel::Incomplete: return "incomplete";
    case AnchorLabel::Intact: return "intact";
  }
  return "unknown";
}

Patch extract_patch(const VoxelIndex& index, std::vector<VoxelKey> voxels) {
  std::sort(voxels.begin(), voxels.end());
  voxels.erase(std::unique(voxels.begin(), voxels.end()), voxels.end());
  Patch patch;
  for (const auto& key : voxels)
    if (const auto* ids = index.anchors_in(key))
      patch.anchor_ids.insert(patch.anchor_ids.end(), ids->begin(), ids->end());
  std::sort(patch.anchor_ids.begin(), patch.anchor_ids.end());
  patch.voxels = std::move(voxels);
  return patch;
}

}  // namespace gspw
