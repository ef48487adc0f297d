#pragma once

#include <span>
#include <vector>

#include "gspw/image.hpp"
#include "gspw/scene.hpp"

namespace gspw {

/// Mean structural similarity over all channels: 11x11 Gaussian window
/// (sigma 1.5, truncated and renormalised at the border), K1 = 0.01,
/// K2 = 0.03, dynamic range 1.
double ssim(const Image& a, const Image& b);

/// SSIM averaged over the centres set in `use` (all when null). When `grad_a`
/// is given it receives dSSIM/da.
double ssim(const Image& a, const Image& b, const Mask* use, Image* grad_a);

struct TrainConfig {
  double lambda_ssim = 0.2;
  double lambda_depth = 0.2;
  double lambda_feat = 1.0;
  int iters = 100;
  double step = 0.01;           // Adam rate for colour and opacity
  double feature_step = 0.05;   // embeddings get their own rate
  double final_step_ratio = 0.05;  // rates decay exponentially to this fraction
  double prune_opacity = 0.05;

  void validate() const;
};

struct TrainResult {
  Scene scene;
  std::vector<double> trace;  // loss before each update, then the final loss
  std::size_t pruned = 0;
};

/// Masked L1 between area-downsampled rendered features and the maps, averaged
/// over frames. Pixels whose block touches a mask are skipped. When `grad` is
/// given it receives dLoss/dfeature (n x D, row-major, scene order).
double feature_loss(const Scene& scene, std::span<const FeatureMap> maps,
                    std::span<const FrameMask> masks, std::vector<double>* grad = nullptr);

/// Fits per-primitive feature vectors only (Adam on feature_loss).
TrainResult fit_embeddings(const Scene& scene, std::span<const FeatureMap> maps,
                           std::span<const FrameMask> masks, const TrainConfig& cfg);

/// Weighted photometric + SSIM + depth + feature refinement of colour,
/// opacity and features; geometry stays fixed. gt_images[i] belongs to
/// scene.cameras[i]; gt_depths may be empty. Masked pixels are ignored by every
/// term. Primitives below prune_opacity are dropped afterwards (not when
/// iters is 0).
TrainResult simplified_train(const Scene& scene, std::span<const Image> gt_images,
                             std::span<const Image> gt_depths, std::span<const FeatureMap> maps,
                             std::span<const FrameMask> masks, const TrainConfig& cfg);

}  // namespace gspw
