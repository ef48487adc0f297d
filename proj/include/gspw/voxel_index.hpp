#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <unordered_map>
#include <vector>

#include "gspw/scene.hpp"

namespace gspw {

struct VoxelKey {
  int i = 0, j = 0, k = 0;
  auto operator<=>(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& key) const noexcept {
    std::uint64_t h = static_cast<std::uint32_t>(key.i);
    h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint32_t>(key.j);
    h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint32_t>(key.k);
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

/// Hash-encoded bidirectional map between anchors and half-open voxel cells
/// [origin + key * size, origin + (key + 1) * size).
struct VoxelIndex {
  Vec3 origin = Vec3::Zero();
  double size = 2.5;
  std::unordered_map<VoxelKey, std::vector<std::int64_t>, VoxelKeyHash> voxel_to_anchors;
  std::unordered_map<std::int64_t, VoxelKey> anchor_to_voxel;

  VoxelKey key_of(const Vec3& position) const;
  Vec3 center(const VoxelKey& key) const;
  /// Sorted ids in the voxel, or nullptr when unoccupied.
  const std::vector<std::int64_t>* anchors_in(const VoxelKey& key) const;
  bool occupied(const VoxelKey& key) const { return anchors_in(key) != nullptr; }
  /// All occupied keys in lexicographic order.
  std::vector<VoxelKey> occupied_keys() const;
};

/// Component-wise floor of the scene's bounding-box minimum, snapped to the voxel size.
Vec3 default_origin(const Scene& scene, double voxel_size);

VoxelIndex build_index(const Scene& scene, double voxel_size,
                       std::optional<Vec3> origin = std::nullopt);

VoxelKey voxel_of(const Vec3& position, const VoxelIndex& index);

enum class AnchorLabel { Missing, Incomplete, Intact };
const char* to_string(AnchorLabel label);

struct Patch {
  std::vector<VoxelKey> voxels;         // sorted, unique
  std::vector<std::int64_t> anchor_ids;  // sorted union of the voxels' anchors
  std::map<std::int64_t, AnchorLabel> labels;

  bool empty() const { return voxels.empty(); }
};

Patch extract_patch(const VoxelIndex& index, std::vector<VoxelKey> voxels);

}  // namespace gspw
