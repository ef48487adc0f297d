// Command-line driver: one subcommand per pipeline stage plus `run`.
#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "gspw/error.hpp"
#include "gspw/io.hpp"
#include "gspw/locate.hpp"
#include "gspw/metrics.hpp"
#include "gspw/parallel.hpp"
#include "gspw/pipeline.hpp"
#include "gspw/render.hpp"
#include "gspw/search.hpp"
#include "gspw/synth.hpp"
#include "gspw/train.hpp"

namespace fs = std::filesystem;
using namespace gspw;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNoCandidate = 3;
constexpr int kExitIo = 4;
constexpr int kExitValidation = 5;

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::Config: return kExitConfig;
    case ErrorCode::NoCandidate: return kExitNoCandidate;
    case ErrorCode::Io:
    case ErrorCode::Format:
    case ErrorCode::UnsupportedVersion: return kExitIo;
    default: return kExitValidation;
  }
}

void write_trace(const std::vector<double>& trace, const std::string& path) {
  if (path.empty()) return;
  std::ofstream f(path);
  f << "iter,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) f << i << ',' << fmt::format("{:.17g}", trace[i]) << '\n';
  if (!f) throw Error(ErrorCode::Io, fmt::format("cannot write {}", path));
}

void write_text(const std::string& text, const std::string& path) {
  std::ofstream f(path);
  f << text << '\n';
  if (!f) throw Error(ErrorCode::Io, fmt::format("cannot write {}", path));
}

/// Applies `key=value` overrides on top of a config.
void apply_sets(PipelineConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::Config, fmt::format("--set expects key=value, got '{}'", s));
    set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Repetition-aware inpainting of Gaussian-splat road scenes"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default: GSPW_THREADS or all cores)");

  // build-synth
  auto* synth = app.add_subcommand("build-synth", "generate a synthetic road scene with ground truth");
  std::uint64_t seed = 7;
  std::string synth_out;
  double road_length = 0, period = 0, hill = 0;
  int cameras = 0;
  bool no_occluder = false;
  synth->add_option("--seed", seed);
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--road-length", road_length, "metres");
  synth->add_option("--period", period, "texture period, metres");
  synth->add_option("--hill", hill, "hill amplitude, metres");
  synth->add_option("--cameras", cameras);
  synth->add_flag("--no-occluder", no_occluder);

  // fit-features
  auto* fit = app.add_subcommand("fit-features", "fit per-primitive feature embeddings");
  std::string scene_path, features_dir, masks_dir, out_path, trace_path;
  TrainConfig tcfg;
  tcfg.iters = 500;
  fit->add_option("--scene", scene_path)->required();
  fit->add_option("--features", features_dir)->required();
  fit->add_option("--masks", masks_dir);
  fit->add_option("--iters", tcfg.iters);
  fit->add_option("--step", tcfg.feature_step);
  fit->add_option("--out", out_path)->required();
  fit->add_option("--trace", trace_path);

  // locate / search share scene, masks and voxel size
  PipelineConfig pcfg;
  auto* loc = app.add_subcommand("locate", "find target anchors and patches");
  loc->add_option("--scene", scene_path)->required();
  loc->add_option("--masks", masks_dir)->required();
  loc->add_option("--voxel-size", pcfg.voxel_size);
  loc->add_option("--opacity-thresh", pcfg.opacity_thresh);
  loc->add_option("--cmp", pcfg.cmp);
  loc->add_option("--out", out_path)->required();

  auto* search = app.add_subcommand("search", "select a source placement per target patch");
  search->add_option("--scene", scene_path)->required();
  search->add_option("--masks", masks_dir)->required();
  search->add_option("--voxel-size", pcfg.voxel_size);
  search->add_option("--span-u", pcfg.span_u);
  search->add_option("--span-v", pcfg.span_v);
  search->add_option("--stride", pcfg.stride);
  search->add_option("--out", out_path)->required();

  // inpaint: the pipeline without evaluation
  auto* inpaint = app.add_subcommand("inpaint", "locate, search, transplant and fuse");
  std::string work_dir, observed_dir;
  std::vector<std::string> sets;
  inpaint->add_option("--scene", scene_path)->required();
  inpaint->add_option("--masks", masks_dir)->required();
  inpaint->add_option("--observed", observed_dir, "observed frames gt_NNNN.ppm used as reference colours");
  inpaint->add_option("--out", out_path)->required();
  inpaint->add_option("--trace", trace_path);
  inpaint->add_option("--work", work_dir, "directory for stage artifacts (default: <out>.work)");
  inpaint->add_option("--set", sets, "key=value config override");

  auto* rend = app.add_subcommand("render", "render every camera of a scene");
  std::string render_dir;
  rend->add_option("--scene", scene_path)->required();
  rend->add_option("--out", render_dir)->required();

  auto* eval = app.add_subcommand("eval", "compare renders with ground truth");
  std::string renders_dir, gt_dir, regions_dir, gt_prefix = "clean";
  eval->add_option("--renders", renders_dir)->required();
  eval->add_option("--gt", gt_dir)->required();
  eval->add_option("--gt-prefix", gt_prefix);
  eval->add_option("--regions", regions_dir);
  eval->add_option("--out", out_path)->required();

  auto* run = app.add_subcommand("run", "full pipeline from a config file");
  std::string config_path;
  run->add_option("--config", config_path);
  run->add_option("--out", out_path, "overrides the config's output directory");
  run->add_option("--set", sets, "key=value config override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (threads < 0) throw Error(ErrorCode::Config, "--threads must be non-negative");
    set_thread_count(threads);

    if (*synth) {
      GenSpec spec = default_gen_spec(seed);
      if (road_length > 0) {
        for (auto& o : spec.occluders) o.u *= road_length / spec.road_length;
        spec.road_length = road_length;
      }
      if (period > 0) spec.texture_period = period;
      if (hill > 0) spec.hill_amplitude = hill;
      if (cameras > 0) spec.camera_count = cameras;
      if (no_occluder) spec.occluders.clear();
      write_generated(generate_road_scene(spec), synth_out);
      fmt::print("wrote {}\n", synth_out);
    } else if (*fit) {
      const Scene scene = load_scene(scene_path);
      std::vector<FeatureMap> maps;
      for (int f : list_frames(features_dir, "feat", "fmap"))
        maps.push_back({f, load_fmap(fs::path(features_dir) / frame_file("feat", f, "fmap"))});
      if (maps.empty()) throw Error(ErrorCode::Io, fmt::format("no feat_NNNN.fmap files in {}", features_dir));
      std::vector<FrameMask> masks;
      if (!masks_dir.empty()) masks = load_mask_dir(masks_dir);
      const TrainResult r = fit_embeddings(scene, maps, masks, tcfg);
      save_scene(r.scene, out_path);
      write_trace(r.trace, trace_path);
      fmt::print("feature loss {:.6g} -> {:.6g}\n", r.trace.front(), r.trace.back());
    } else if (*loc || *search) {
      pcfg.scene = scene_path;
      pcfg.masks = masks_dir;
      pcfg.validate();
      const Scene scene = load_scene(scene_path);
      const auto masks = load_mask_dir(masks_dir);
      const VoxelIndex index = build_index(scene, pcfg.voxel_size);
      const LocateResult lr = locate(scene, masks, index, pcfg.locate_config());
      nlohmann::json j{{"config_hash", pcfg.hash()}, {"ref_frame", lr.ref_frame}};
      if (*loc) {
        j["targets"] = lr.targets;
        j["missing"] = lr.missing;
        auto& arr = j["patches"] = nlohmann::json::array();
        for (const auto& p : lr.patches) {
          nlohmann::json labels;
          for (const auto& [id, label] : p.labels) labels[std::to_string(id)] = to_string(label);
          arr.push_back({{"anchors", p.anchor_ids}, {"labels", labels}});
        }
      } else {
        SearchContext ctx(scene, index, barred_anchors(lr));
        auto& arr = j["patches"] = nlohmann::json::array();
        for (std::size_t i = 0; i < lr.patches.size(); ++i) {
          const auto cands = enumerate_candidates(lr.patches[i], ctx, pcfg.search_config());
          arr.push_back(to_json(select_best(lr.patches[i], cands, ctx, static_cast<int>(i))));
        }
      }
      write_text(j.dump(2), out_path);
    } else if (*inpaint) {
      pcfg.scene = scene_path;
      pcfg.masks = masks_dir;
      pcfg.observed = observed_dir;
      pcfg.out = work_dir.empty() ? out_path + ".work" : work_dir;
      apply_sets(pcfg, sets);
      const PipelineResult r = run_pipeline(pcfg);
      fs::copy_file(fs::path(pcfg.out) / "scene_inpainted.gsp", out_path, fs::copy_options::overwrite_existing);
      std::vector<double> trace{r.fusion_initial};
      trace.insert(trace.end(), r.fusion_trace.begin(), r.fusion_trace.end());
      write_trace(trace, trace_path);
      fmt::print("config {} patches {} fusion {:.6g} -> {:.6g}\n", r.config_hash, r.patches.size(),
                 r.fusion_initial, trace.back());
    } else if (*rend) {
      const Scene scene = load_scene(scene_path);
      fs::create_directories(render_dir);
      RenderOptions opts;
      opts.channels = kRgb;
      for (const auto& cam : scene.cameras)
        save_ppm(render(scene, cam, opts).rgb, fs::path(render_dir) / frame_file("render", cam.frame_index, "ppm"));
    } else if (*eval) {
      std::vector<FrameImage> renders, gt;
      for (int f : list_frames(renders_dir, "render", "ppm"))
        renders.push_back({f, load_ppm(fs::path(renders_dir) / frame_file("render", f, "ppm"))});
      for (int f : list_frames(gt_dir, gt_prefix, "ppm"))
        gt.push_back({f, load_ppm(fs::path(gt_dir) / frame_file(gt_prefix, f, "ppm"))});
      std::vector<FrameMask> regions;
      if (!regions_dir.empty()) regions = load_mask_dir(regions_dir, "region");
      const EvalReport rep = evaluate_inpainting(renders, gt, regions);
      write_text(rep.to_json().dump(2), out_path);
      fmt::print("psnr {:.3f} dB, region psnr {:.3f} dB over {} px\n", rep.psnr, rep.region_psnr, rep.region_pixels);
    } else if (*run) {
      PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
      apply_sets(cfg, sets);
      if (!out_path.empty()) cfg.out = out_path;
      const PipelineResult r = run_pipeline(cfg);
      fmt::print("config {} -> {}\n", r.config_hash, cfg.out);
      if (r.evaluated)
        fmt::print("region psnr {:.3f} dB (input {:.3f} dB)\n", r.report.region_psnr, r.baseline.region_psnr);
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error [io]: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitOk;
}
