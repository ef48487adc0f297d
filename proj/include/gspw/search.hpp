#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "gspw/image.hpp"
#include "gspw/scene.hpp"
#include "gspw/voxel_index.hpp"

namespace gspw {

/// Rigid motion about the vertical axis taking source-patch points to the
/// target patch: T(x) = Rz(theta) (x - source_pivot) + target_pivot.
struct RigidMap {
  double theta = 0.0;
  Vec3 source_pivot = Vec3::Zero();
  Vec3 target_pivot = Vec3::Zero();

  Vec3 apply(const Vec3& x) const;
  Vec3 inverse(const Vec3& y) const;
  Quat rotation() const;
};

struct CandidatePlacement {
  std::vector<VoxelKey> source_voxels;  // sorted
  RigidMap map;
  double du = 0.0;  // BEV offset of the source relative to the target (m)
  double dv = 0.0;
};

struct AffinityRecord {
  int target_id = 0;
  CandidatePlacement placement;
  double score = 0.0;
  int target_frame = -1;
  int source_frame = -1;
  int samples = 0;
};

struct SearchConfig {
  double span_u = 30.0;
  double span_v = 5.0;
  double stride = 0.0;  // <= 0 means the voxel size

  void validate() const;
};

/// Shared state of a search over one scene: the index, the anchors barred from
/// source windows, and a cache of rendered feature maps. Feature maps are
/// rendered with the barred anchors at zero opacity.
class SearchContext {
 public:
  /// `scene` must carry a ground manifold and outlive the context.
  SearchContext(const Scene& scene, const VoxelIndex& index, std::vector<std::int64_t> barred);

  const Scene& scene() const { return *scene_; }
  const VoxelIndex& index() const { return *index_; }
  const GroundManifold& manifold() const { return *scene_->manifold; }
  bool barred(std::int64_t id) const { return barred_.count(id) != 0; }
  const Vec3& position(std::int64_t id) const;

  /// Renders (once) and returns the feature map of a frame.
  const Image& feature_map(int frame_index);
  /// Renders every listed frame not yet cached.
  void prefetch(std::span<const int> frames);
  std::size_t cached_frames() const;

 private:
  const Scene* scene_;
  const VoxelIndex* index_;
  std::unordered_set<std::int64_t> barred_;
  std::vector<Primitive> render_prims_;
  std::unordered_map<std::int64_t, std::size_t> slot_;
  mutable std::mutex mutex_;
  std::map<int, std::shared_ptr<const Image>> cache_;
};

/// Stride-grid placements at du in +-[stride, span_u] and dv in +-[0, span_v]
/// that pass the validity rules (occupied, no barred anchors, disjoint from
/// the target, injective, source inside the road).
std::vector<CandidatePlacement> enumerate_candidates(const Patch& target, SearchContext& ctx,
                                                     const SearchConfig& cfg);

/// Patch affinity: cosine between mean normalised feature samples of the target's
/// intact anchors and their mapped counterparts in the source.
/// Throws AffinityUndefined when either side has no usable view.
AffinityRecord patch_affinity(const Patch& target, const CandidatePlacement& placement,
                              SearchContext& ctx, int target_id = 0);

/// Strict ordering used for selection: higher score, then smaller |du|, then
/// smaller |dv|, then lexicographically smaller source voxels.
bool better(const AffinityRecord& a, const AffinityRecord& b);

/// Best-scoring candidate. Unscoreable candidates are skipped; `scored`
/// receives every successfully scored record when given.
/// Throws NoCandidate when nothing is scoreable.
AffinityRecord select_best(const Patch& target, std::span<const CandidatePlacement> candidates,
                           SearchContext& ctx, int target_id = 0,
                           std::vector<AffinityRecord>* scored = nullptr);

/// Scores every valid integer voxel translation of the target window inside
/// the corridor that moves it along the road, with no stride or span limits.
AffinityRecord exhaustive_oracle(const Patch& target, SearchContext& ctx, int target_id = 0);

nlohmann::json to_json(const AffinityRecord& r);

}  // namespace gspw
