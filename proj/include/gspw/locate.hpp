#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "gspw/image.hpp"
#include "gspw/scene.hpp"
#include "gspw/voxel_index.hpp"

namespace gspw {

struct LocateConfig {
  double opacity_thresh = 0.9;
  double cmp = 0.5;  // recurrence-rate threshold
  double alpha_missing_thresh = 0.1;
  /// Frames within +-window of the reference frame count towards recurrence; negative = all.
  int window = -1;
  /// Reference ("selected") frame; negative = the frame with the most mask pixels.
  int ref_frame = -1;

  void validate() const;
};

/// Anchors with opacity below the threshold whose centre lands inside a mask in
/// at least one frame where it is visible. Sorted ids.
std::vector<std::int64_t> identify_targets(const Scene& scene, std::span<const FrameMask> masks,
                                           const LocateConfig& cfg);

struct Recurrence {
  int visible = 0;
  int inside = 0;
  double rate() const { return visible > 0 ? static_cast<double>(inside) / visible : 0.0; }
};

/// Visibility-conditioned recurrence for each requested anchor, over the
/// frames listed in `frames` (all masks when empty).
std::map<std::int64_t, Recurrence> recurrence(const Scene& scene, std::span<const std::int64_t> ids,
                                              std::span<const FrameMask> masks,
                                              std::span<const int> frames = {});

struct Classification {
  std::map<std::int64_t, AnchorLabel> labels;
  std::map<std::int64_t, double> rates;
};

/// Missing if listed in `missing`; otherwise incomplete when never visible or
/// when the recurrence rate reaches cfg.cmp; otherwise intact.
Classification classify_anchors(const Scene& scene, const Patch& patch,
                                std::span<const FrameMask> masks, const LocateConfig& cfg,
                                std::span<const std::int64_t> missing,
                                std::span<const int> frames = {});

struct MissingRegion {
  int frame_index = 0;
  Mask mask;                     // low-alpha pixels inside the semantic mask
  std::vector<VoxelKey> seeds;   // ground voxels seen through those pixels, sorted
};

/// `removed` must already have the targets removed or at zero opacity.
MissingRegion missing_regions(const Scene& removed, const Camera& camera,
                              std::span<const FrameMask> masks, const VoxelIndex& index,
                              const LocateConfig& cfg);

/// Copy of the scene with the given anchors at zero opacity.
Scene without_anchors(const Scene& scene, std::span<const std::int64_t> ids);

/// cfg.ref_frame if set, else the frame with the most mask pixels (earliest on ties).
int select_reference_frame(std::span<const FrameMask> masks, const LocateConfig& cfg);

/// Groups voxels into 26-connected components, each sorted; components ordered by first key.
std::vector<std::vector<VoxelKey>> connected_components(std::vector<VoxelKey> voxels);

struct LocateResult {
  int ref_frame = 0;
  std::vector<std::int64_t> targets;  // sorted
  std::vector<std::int64_t> missing;  // sorted subset of targets
  MissingRegion region;
  std::vector<Patch> patches;  // labelled
};

/// The full locate stage: targets, missing region in the reference frame,
/// target patches and anchor labels.
LocateResult locate(const Scene& scene, std::span<const FrameMask> masks, const VoxelIndex& index,
                    const LocateConfig& cfg);

/// Targets plus every anchor labelled missing or incomplete in any patch; these
/// may not be used as source material. Sorted, unique.
std::vector<std::int64_t> barred_anchors(const LocateResult& result);

}  // namespace gspw
