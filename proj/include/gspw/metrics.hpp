#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include <json.hpp>

#include "gspw/image.hpp"
#include "gspw/scene.hpp"

namespace gspw {

/// Returned by psnr for identical inputs.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// Region metrics need at least this many pixels.
inline constexpr std::size_t kMinRegionPixels = 100;

/// 10 log10(1 / MSE) with peak 1, over all channels of the pixels set in
/// `mask` (all pixels when null). An empty mask gives NaN.
double psnr(const Image& a, const Image& b, const Mask* mask = nullptr);

struct FrameImage {
  int frame_index = 0;
  Image image;
};

struct FrameEval {
  int frame_index = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t region_pixels = 0;
  bool region_sufficient = false;
  double region_psnr = 0.0;  // only meaningful when region_sufficient
  double region_ssim = 0.0;
};

struct EvalReport {
  std::vector<FrameEval> frames;
  double psnr = 0.0;  // mean over frames
  double ssim = 0.0;
  /// Pooled over every region pixel of every frame.
  double region_psnr = 0.0;
  /// Mean of per-frame region SSIM weighted by region size.
  double region_ssim = 0.0;
  std::size_t region_pixels = 0;
  bool region_sufficient = false;
  std::vector<int> missing_frames;  // frames present on only one side

  nlohmann::json to_json() const;
};

/// Compares renders with ground truth frame by frame (matched on frame index).
/// Regions are optional per frame; frames present on only one side are listed
/// in missing_frames and otherwise ignored.
EvalReport evaluate_inpainting(std::span<const FrameImage> renders, std::span<const FrameImage> gt,
                               std::span<const FrameMask> regions);

}  // namespace gspw
