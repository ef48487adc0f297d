#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gspw/locate.hpp"
#include "gspw/metrics.hpp"
#include "gspw/search.hpp"
#include "gspw/substitute.hpp"
#include "gspw/train.hpp"

namespace gspw {

enum class NoCandidatePolicy { Fail, Skip };

/// Every tunable of the pipeline. Config files hold one `key = value` per line
/// with `#` comments; keys match the names listed by config_keys().
struct PipelineConfig {
  // Inputs and outputs. An empty `scene` means: generate the default synthetic
  // scene for `seed` under out/input and run on its corrupted scene.
  std::string scene;
  std::string masks;     // mask_NNNN.pgm
  std::string observed;  // gt_NNNN.ppm, reference colours for supervision
  std::string clean;     // clean_NNNN.ppm, evaluation ground truth
  std::string regions;   // region_NNNN.pgm, evaluation regions
  std::string out = "gspw_out";
  std::uint64_t seed = 7;

  double voxel_size = 2.5;
  double opacity_thresh = 0.9;
  double cmp = 0.5;
  double alpha_missing = 0.1;
  double span_u = 30.0;
  double span_v = 5.0;
  double stride = 0.0;  // 0 = voxel_size
  NoCandidatePolicy on_no_candidate = NoCandidatePolicy::Fail;

  int band_px = 10;
  double w_alpha = 0.5;
  int max_frames = 8;
  int fuse_iters = 50;
  double fuse_step = 0.05;

  double lambda_ssim = 0.2;
  double lambda_depth = 0.2;
  double lambda_feat = 1.0;
  double prune_opacity = 0.05;

  double effective_stride() const { return stride > 0 ? stride : voxel_size; }

  LocateConfig locate_config() const;
  SearchConfig search_config() const;
  SupervisionConfig supervision_config() const;
  FuseConfig fuse_config() const;
  TrainConfig train_config() const;

  /// Throws Config naming the first offending key.
  void validate() const;
  /// Sorted `key=value` lines; doubles printed round-trip exactly.
  std::string canonical() const;
  /// 64-bit FNV-1a of canonical(), as 16 hex digits.
  std::string hash() const;
};

std::vector<std::string> config_keys();

/// Sets one key from its textual value. Throws Config on unknown keys or
/// unparsable values.
void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value);

/// Parses a config file over the defaults. Duplicate keys are an error.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);

struct PatchOutcome {
  int patch = 0;
  bool skipped = false;
  std::string reason;
  AffinityRecord match;
  std::size_t copies = 0;
  std::size_t zeroed = 0;
  std::size_t removed = 0;
};

struct PipelineResult {
  std::string config_hash;
  Scene scene;
  std::vector<PatchOutcome> patches;
  int supervision_ref = -1;
  std::size_t supervised_frames = 0;
  double fusion_initial = 0.0;
  std::vector<double> fusion_trace;
  bool evaluated = false;
  EvalReport baseline;  // input scene against the evaluation ground truth
  EvalReport report;    // inpainted scene
  std::map<std::string, double> timing_s;
};

/// locate -> index -> search -> transplant -> fuse -> render -> eval, writing
/// each stage's artifact under cfg.out. A failing stage throws an Error whose
/// message starts with the stage name; artifacts written so far are kept.
PipelineResult run_pipeline(const PipelineConfig& cfg);

}  // namespace gspw
