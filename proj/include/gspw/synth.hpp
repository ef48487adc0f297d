#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "gspw/image.hpp"
#include "gspw/scene.hpp"

namespace gspw {

/// Flat horizontal plate hovering over the road; stands in for a vehicle.
struct OccluderSpec {
  double u = 50.0;       // centre, metres along the road
  double v = -2.0;       // centre, metres left of the centreline
  double length = 3.0;   // along u
  double width = 1.8;    // along v
  double height = 0.35;  // above the local ground
  /// Inclusive frame window in which the plate is present; negative = automatic
  /// (frames whose camera is between `auto_behind` metres behind the plate centre
  /// and `auto_ahead` metres past it).
  int first_frame = -1;
  int last_frame = -1;
};

struct GenSpec {
  std::uint64_t seed = 7;
  double road_length = 100.0;
  double road_width = 8.0;
  double verge_width = 3.0;  // grass strip on each side of the road
  double spacing = 0.5;
  double jitter = 0.2;  // fraction of spacing
  double texture_period = 10.0;
  int feature_dim = 16;
  std::vector<OccluderSpec> occluders;
  int camera_count = 30;
  double camera_height = 2.0;
  double camera_pitch_deg = 35.0;
  int image_width = 256;
  int image_height = 128;
  double focal = 128.0;
  double hill_amplitude = 0.0;
  double hill_wavelength = 40.0;
  double drift_amplitude = 0.15;  // slow non-periodic brightness modulation
  double drift_wavelength = 37.0;
  double noise = 0.02;      // per-anchor colour noise
  int stain_count = -1;     // non-periodic dark blotches; negative = one per 20 m
  int feature_downsample = 4;
  double auto_behind = 9.0;
  double auto_ahead = 0.5;
};

/// Default spec for a seed: one occluder at a seed-dependent position near the
/// middle of the road, in a seed-dependent lane.
GenSpec default_gen_spec(std::uint64_t seed);

/// Periodic-in-u feature embedding with a small colour component; unit norm.
std::vector<double> synthetic_features(double u, double v, const Vec3& color, double period,
                                       int dim);

struct GenOutput {
  GenSpec spec;
  Scene clean;
  Scene corrupt;
  std::vector<FrameMask> masks;       // occluder masks, one per frame
  std::vector<Image> gt_images;       // clean render with the occluder composited
  std::vector<Image> gt_depths;       // depth of gt_images (1 channel)
  std::vector<Image> clean_images;    // clean render without occluder
  std::vector<FrameMask> regions;     // pixels dominated by degraded anchors
  std::vector<FeatureMap> features;   // downsampled clean feature renders
  nlohmann::json manifest;
};

GenOutput generate_road_scene(const GenSpec& spec);

/// Writes scene_clean.gsp, scene_corrupt.gsp, masks/, gt/, clean/, regions/,
/// features/ and manifest.json under dir.
void write_generated(const GenOutput& out, const std::filesystem::path& dir);

}  // namespace gspw
