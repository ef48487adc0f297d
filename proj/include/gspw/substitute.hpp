#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gspw/image.hpp"
#include "gspw/scene.hpp"
#include "gspw/search.hpp"
#include "gspw/voxel_index.hpp"

namespace gspw {

struct TransplantRecord {
  std::vector<std::int64_t> new_ids;     // copies, in source-id order
  std::vector<std::int64_t> source_ids;  // primitives of the mapped source voxels
  std::vector<std::int64_t> removed_ids;
  std::vector<std::int64_t> zeroed_ids;  // copies landing outside the target voxels
  std::size_t suppressed = 0;            // copies identical to their source, not added
  RigidMap map;
  std::vector<VoxelKey> target_voxels;
  std::vector<VoxelKey> source_voxels;
  std::string config_hash;
};

/// Removes barred anchors from the target voxels, then copies every primitive
/// of the mapped source voxels through the rigid map. Copies whose new position
/// falls outside the target voxels get opacity 0; copies that would coincide
/// exactly with their source (identity map) are skipped.
/// Throws StaleIndex when the source voxels no longer match the scene.
std::pair<Scene, TransplantRecord> transplant(const Scene& scene, const VoxelIndex& index,
                                              const Patch& target, const AffinityRecord& best,
                                              std::span<const std::int64_t> barred);

struct Reprojection {
  Image rgb;   // 3 channels, zero outside `valid`
  Mask valid;
};

/// Forward-warps a reference view (RGB plus depth, 0 = no surface) into the
/// target camera, z-buffered, keeping only pixels inside `region`. Each
/// reference pixel is warped as a centred 5x5 grid of bilinearly interpolated
/// sub-samples; on the front surface the sample landing nearest a target pixel
/// centre gives its colour, so an identity warp is exact. Holes narrower
/// than 3 px are filled from the nearest valid 8-neighbour. Reference pixels set in `exclude` are not warped.
Reprojection reproject_background(const Image& ref_rgb, const Image& ref_depth,
                                  const Camera& ref_camera, const Camera& tgt_camera,
                                  const Mask& region, const Mask* exclude = nullptr);

/// Convenience form rendering the reference RGB and depth from the scene.
Reprojection reproject_background(const Scene& scene, const Camera& ref_camera,
                                  const Camera& tgt_camera, const Mask& region);

struct Blend {
  Image image;  // I'
  Mask band;
};

/// Edge blending: inside the band I' = w pi(B) + (1 - w) I; elsewhere in the
/// validity mask I' = pi(B); outside it I' = I.
Blend blend_edges(const Reprojection& warped, const Image& rendered, int band_px = 10,
                  double w_alpha = 0.5);

struct FusionSupervision {
  int frame_index = 0;
  Camera camera;
  Image target;  // I'
  Mask mask;     // pixels where I' is defined
  Mask band;
};

struct SupervisionConfig {
  int band_px = 10;
  double w_alpha = 0.5;
  int max_frames = 8;
  int ref_frame = -1;  // negative = automatic
  /// Also warp from the other unoccluded views where the reference leaves holes.
  bool extra_refs = true;
};

struct SupervisionSet {
  int ref_frame = -1;
  std::vector<FusionSupervision> frames;
};

/// Builds reprojection supervision for the transplanted copies: the region of
/// a frame is where the copies hold at least half the compositing weight;
/// frames whose region meets the occlusion mask are supervised from the
/// reference frame. `observed` (optional, indexed like masks) supplies the
/// reference RGB; otherwise the scene's own render is used.
SupervisionSet build_supervision(const Scene& scene, std::span<const std::int64_t> copies,
                                 std::span<const FrameMask> masks,
                                 std::span<const Image> observed, const SupervisionConfig& cfg);

struct FuseConfig {
  int iters = 50;
  double step = 0.05;
  int max_halvings = 5;
};

struct FuseResult {
  Scene scene;
  double initial_loss = 0.0;
  std::vector<double> trace;  // loss after each iteration
  int accepted = 0;
};

/// Mean L1 RGB loss over the supervision masks, averaged over frames.
double fusion_loss(const Scene& scene, std::span<const FusionSupervision> sup);

/// Fusion L1 loss minimised over colour and opacity of `params` (other
/// primitives frozen) by diagonally preconditioned gradient descent with
/// backtracking; rejected steps leave the scene unchanged.
FuseResult fuse(const Scene& scene, std::span<const FusionSupervision> sup,
                std::span<const std::int64_t> params, const FuseConfig& cfg = {});

}  // namespace gspw
