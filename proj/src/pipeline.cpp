#include "gspw/pipeline.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "gspw/error.hpp"
#include "gspw/io.hpp"
#include "gspw/render.hpp"
#include "gspw/synth.hpp"

namespace gspw {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
    throw Error(ErrorCode::Config, fmt::format("{}: '{}' is not a number", key, s));
  return v;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& s) {
  Int v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw Error(ErrorCode::Config, fmt::format("{}: '{}' is not an integer", key, s));
  return v;
}

struct Field {
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
};

template <class T>
Field field(T PipelineConfig::*m) {
  Field f;
  if constexpr (std::is_same_v<T, std::string>) {
    f.get = [m](const PipelineConfig& c) { return c.*m; };
    f.set = [m](PipelineConfig& c, const std::string&, const std::string& v) { c.*m = v; };
  } else if constexpr (std::is_same_v<T, double>) {
    f.get = [m](const PipelineConfig& c) { return fmt_double(c.*m); };
    f.set = [m](PipelineConfig& c, const std::string& k, const std::string& v) { c.*m = parse_double(k, v); };
  } else {
    f.get = [m](const PipelineConfig& c) { return std::to_string(c.*m); };
    f.set = [m](PipelineConfig& c, const std::string& k, const std::string& v) { c.*m = parse_int<T>(k, v); };
  }
  return f;
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["scene"] = field(&PipelineConfig::scene);
    t["masks"] = field(&PipelineConfig::masks);
    t["observed"] = field(&PipelineConfig::observed);
    t["clean"] = field(&PipelineConfig::clean);
    t["regions"] = field(&PipelineConfig::regions);
    t["out"] = field(&PipelineConfig::out);
    t["seed"] = field(&PipelineConfig::seed);
    t["voxel_size"] = field(&PipelineConfig::voxel_size);
    t["opacity_thresh"] = field(&PipelineConfig::opacity_thresh);
    t["cmp"] = field(&PipelineConfig::cmp);
    t["alpha_missing"] = field(&PipelineConfig::alpha_missing);
    t["span_u"] = field(&PipelineConfig::span_u);
    t["span_v"] = field(&PipelineConfig::span_v);
    t["stride"] = field(&PipelineConfig::stride);
    t["band_px"] = field(&PipelineConfig::band_px);
    t["w_alpha"] = field(&PipelineConfig::w_alpha);
    t["max_frames"] = field(&PipelineConfig::max_frames);
    t["fuse_iters"] = field(&PipelineConfig::fuse_iters);
    t["fuse_step"] = field(&PipelineConfig::fuse_step);
    t["lambda_ssim"] = field(&PipelineConfig::lambda_ssim);
    t["lambda_depth"] = field(&PipelineConfig::lambda_depth);
    t["lambda_feat"] = field(&PipelineConfig::lambda_feat);
    t["prune_opacity"] = field(&PipelineConfig::prune_opacity);
    t["on_no_candidate"] = Field{
        [](const PipelineConfig& c) {
          return std::string(c.on_no_candidate == NoCandidatePolicy::Skip ? "skip" : "fail");
        },
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          if (v == "skip")
            c.on_no_candidate = NoCandidatePolicy::Skip;
          else if (v == "fail")
            c.on_no_candidate = NoCandidatePolicy::Fail;
          else
            throw Error(ErrorCode::Config, fmt::format("{}: expected 'fail' or 'skip', got '{}'", k, v));
        }};
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream f(path);
  f << j.dump(2) << '\n';
  if (!f) throw Error(ErrorCode::Io, fmt::format("cannot write {}", path.string()));
}

nlohmann::json keys_json(std::span<const VoxelKey> keys) {
  auto arr = nlohmann::json::array();
  for (const auto& k : keys) arr.push_back({k.i, k.j, k.k});
  return arr;
}

/// Runs one stage, prefixing any library error with the stage name.
template <class F>
auto stage(const char* name, PipelineResult& res, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  auto done = [&] {
    res.timing_s[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  try {
    if constexpr (std::is_void_v<decltype(body())>) {
      body();
      done();
    } else {
      auto r = body();
      done();
      return r;
    }
  } catch (const Error& e) {
    throw Error(e.code(), fmt::format("{}: {}", name, e.what()));
  } catch (const std::filesystem::filesystem_error& e) {
    throw Error(ErrorCode::Io, fmt::format("{}: {}", name, e.what()));
  }
}

std::vector<FrameImage> load_frames(const fs::path& dir, const std::string& prefix,
                                    std::span<const Camera> cameras) {
  std::vector<FrameImage> out;
  for (const auto& cam : cameras) {
    const fs::path p = dir / frame_file(prefix, cam.frame_index, "ppm");
    if (fs::exists(p)) out.push_back({cam.frame_index, load_ppm(p)});
  }
  return out;
}

std::vector<FrameImage> render_all(const Scene& scene) {
  std::vector<FrameImage> out;
  RenderOptions opts;
  opts.channels = kRgb;
  for (const auto& cam : scene.cameras) out.push_back({cam.frame_index, render(scene, cam, opts).rgb});
  return out;
}

}  // namespace

LocateConfig PipelineConfig::locate_config() const {
  LocateConfig c;
  c.opacity_thresh = opacity_thresh;
  c.cmp = cmp;
  c.alpha_missing_thresh = alpha_missing;
  return c;
}

SearchConfig PipelineConfig::search_config() const {
  SearchConfig c;
  c.span_u = span_u;
  c.span_v = span_v;
  c.stride = effective_stride();
  return c;
}

SupervisionConfig PipelineConfig::supervision_config() const {
  SupervisionConfig c;
  c.band_px = band_px;
  c.w_alpha = w_alpha;
  c.max_frames = max_frames;
  return c;
}

FuseConfig PipelineConfig::fuse_config() const {
  FuseConfig c;
  c.iters = fuse_iters;
  c.step = fuse_step;
  return c;
}

TrainConfig PipelineConfig::train_config() const {
  TrainConfig c;
  c.lambda_ssim = lambda_ssim;
  c.lambda_depth = lambda_depth;
  c.lambda_feat = lambda_feat;
  c.prune_opacity = prune_opacity;
  return c;
}

void PipelineConfig::validate() const {
  auto fail = [](const char* key, const std::string& why) {
    throw Error(ErrorCode::Config, fmt::format("{}: {}", key, why));
  };
  if (!(voxel_size > 0)) fail("voxel_size", "must be positive");
  if (stride < 0) fail("stride", "must be non-negative (0 = voxel_size)");
  if (band_px < 0) fail("band_px", "must be non-negative");
  if (!(w_alpha >= 0 && w_alpha <= 1)) fail("w_alpha", "must lie in [0, 1]");
  if (max_frames < 1) fail("max_frames", "must be at least 1");
  if (out.empty()) fail("out", "an output directory is required");
  if (!scene.empty() && masks.empty()) fail("masks", "a mask directory is required with a scene");
  try {
    locate_config().validate();
    search_config().validate();
    train_config().validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  if (fuse_iters < 0 || !(fuse_step > 0)) fail("fuse_iters", "iterations >= 0 and a positive step required");
}

std::string PipelineConfig::canonical() const {
  std::string s;
  for (const auto& [k, f] : fields()) s += k + "=" + f.get(*this) + "\n";
  return s;
}

std::string PipelineConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return fmt::format("{:016x}", h);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw Error(ErrorCode::Config, fmt::format("unknown config key '{}'", key));
  it->second.set(cfg, key, value);
}

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::Config, fmt::format("line {}: expected key = value", lineno));
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second)
      throw Error(ErrorCode::Config, fmt::format("line {}: duplicate key '{}'", lineno, key));
    set_config_value(cfg, key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::Io, fmt::format("cannot read config {}", path.string()));
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

PipelineResult run_pipeline(const PipelineConfig& cfg_in) {
  cfg_in.validate();
  PipelineConfig cfg = cfg_in;
  PipelineResult res;
  res.config_hash = cfg.hash();
  const fs::path out = cfg.out;
  fs::create_directories(out);
  {
    std::ofstream f(out / "config.txt");
    f << "# hash " << res.config_hash << '\n' << cfg.canonical();
  }

  if (cfg.scene.empty()) {
    stage("generate", res, [&] {
      const GenOutput g = generate_road_scene(default_gen_spec(cfg.seed));
      write_generated(g, out / "input");
    });
    const fs::path in = out / "input";
    cfg.scene = (in / "scene_corrupt.gsp").string();
    cfg.masks = (in / "masks").string();
    cfg.observed = (in / "gt").string();
    cfg.clean = (in / "clean").string();
    cfg.regions = (in / "regions").string();
  }

  const Scene input = stage("load", res, [&] { return load_scene(cfg.scene); });
  const auto masks = stage("load", res, [&] {
    auto m = load_mask_dir(cfg.masks);
    if (m.empty()) throw Error(ErrorCode::Io, fmt::format("no masks in {}", cfg.masks));
    return m;
  });
  auto meta = [&] { return nlohmann::json{{"config_hash", res.config_hash}}; };

  const VoxelIndex index = stage("index", res, [&] {
    VoxelIndex idx = build_index(input, cfg.voxel_size);
    nlohmann::json j = meta();
    j["voxel_size"] = idx.size;
    j["origin"] = {idx.origin.x(), idx.origin.y(), idx.origin.z()};
    j["occupied_voxels"] = idx.voxel_to_anchors.size();
    j["anchors"] = idx.anchor_to_voxel.size();
    write_json(j, out / "index.json");
    return idx;
  });

  const LocateResult loc = stage("locate", res, [&] {
    LocateResult r = locate(input, masks, index, cfg.locate_config());
    nlohmann::json j = meta();
    j["ref_frame"] = r.ref_frame;
    j["targets"] = r.targets.size();
    j["missing"] = r.missing.size();
    auto& arr = j["patches"] = nlohmann::json::array();
    for (const auto& p : r.patches) {
      std::map<std::string, int> counts;
      for (const auto& [id, label] : p.labels) ++counts[to_string(label)];
      arr.push_back({{"voxels", keys_json(p.voxels)}, {"anchors", p.anchor_ids.size()}, {"labels", counts}});
    }
    write_json(j, out / "locate.json");
    return r;
  });

  const auto barred = barred_anchors(loc);
  Scene work = input;
  std::vector<std::int64_t> copies;
  stage("search", res, [&] {
    SearchContext ctx(input, index, barred);
    nlohmann::json j = meta();
    auto& arr = j["patches"] = nlohmann::json::array();
    for (std::size_t pi = 0; pi < loc.patches.size(); ++pi) {
      PatchOutcome po;
      po.patch = static_cast<int>(pi);
      const Patch& target = loc.patches[pi];
      try {
        const auto cands = enumerate_candidates(target, ctx, cfg.search_config());
        po.match = select_best(target, cands, ctx, static_cast<int>(pi));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NoCandidate || cfg.on_no_candidate == NoCandidatePolicy::Fail) {
          write_json(j, out / "search.json");
          throw Error(e.code(), fmt::format("patch {}: {}", pi, e.what()));
        }
        po.skipped = true;
        po.reason = e.what();
      }
      arr.push_back(po.skipped ? nlohmann::json{{"patch", pi}, {"skipped", po.reason}} : to_json(po.match));
      res.patches.push_back(po);
    }
    write_json(j, out / "search.json");
  });

  stage("transplant", res, [&] {
    nlohmann::json j = meta();
    auto& arr = j["patches"] = nlohmann::json::array();
    for (auto& po : res.patches) {
      if (po.skipped) continue;
      auto [next, rec] = transplant(work, index, loc.patches[po.patch], po.match, barred);
      work = std::move(next);
      copies.insert(copies.end(), rec.new_ids.begin(), rec.new_ids.end());
      po.copies = rec.new_ids.size();
      po.zeroed = rec.zeroed_ids.size();
      po.removed = rec.removed_ids.size();
      arr.push_back({{"patch", po.patch},
                     {"copies", po.copies},
                     {"zeroed", po.zeroed},
                     {"removed", po.removed},
                     {"suppressed", rec.suppressed}});
    }
    write_json(j, out / "transplant.json");
    save_scene(work, out / "scene_transplant.gsp");
  });

  stage("fuse", res, [&] {
    std::vector<Image> observed;
    if (!cfg.observed.empty())
      for (const auto& m : masks) {
        const fs::path p = fs::path(cfg.observed) / frame_file("gt", m.frame_index, "ppm");
        if (!fs::exists(p)) throw Error(ErrorCode::Io, fmt::format("missing observed image {}", p.string()));
        observed.push_back(load_ppm(p));
      }
    std::ofstream trace(out / "fuse_trace.csv");
    trace << "iter,loss\n";
    if (!copies.empty()) {
      const SupervisionSet sup = build_supervision(work, copies, masks, observed, cfg.supervision_config());
      res.supervision_ref = sup.ref_frame;
      res.supervised_frames = sup.frames.size();
      if (!sup.frames.empty()) {
        FuseResult fr = fuse(work, sup.frames, copies, cfg.fuse_config());
        res.fusion_initial = fr.initial_loss;
        res.fusion_trace = fr.trace;
        work = std::move(fr.scene);
        trace << 0 << ',' << fmt_double(res.fusion_initial) << '\n';
        for (std::size_t i = 0; i < res.fusion_trace.size(); ++i)
          trace << i + 1 << ',' << fmt_double(res.fusion_trace[i]) << '\n';
      }
    }
    save_scene(work, out / "scene_inpainted.gsp");
  });
  // Continue with the f32 scene exactly as written, so renders match the file.
  res.scene = decode_scene(encode_scene(work));

  const auto renders = stage("render", res, [&] {
    auto r = render_all(res.scene);
    fs::create_directories(out / "renders");
    for (const auto& f : r) save_ppm(f.image, out / "renders" / frame_file("render", f.frame_index, "ppm"));
    return r;
  });

  stage("eval", res, [&] {
    nlohmann::json j = meta();
    j["patches"] = res.patches.size();
    j["skipped_patches"] = std::count_if(res.patches.begin(), res.patches.end(),
                                         [](const PatchOutcome& p) { return p.skipped; });
    j["copies"] = copies.size();
    j["supervision_ref"] = res.supervision_ref;
    j["supervised_frames"] = res.supervised_frames;
    j["fusion_initial_loss"] = res.fusion_initial;
    j["fusion_final_loss"] = res.fusion_trace.empty() ? res.fusion_initial : res.fusion_trace.back();
    if (!cfg.clean.empty()) {
      const auto gt = load_frames(cfg.clean, "clean", res.scene.cameras);
      std::vector<FrameMask> regions;
      if (!cfg.regions.empty()) regions = load_mask_dir(cfg.regions, "region");
      res.baseline = evaluate_inpainting(render_all(input), gt, regions);
      res.report = evaluate_inpainting(renders, gt, regions);
      res.evaluated = true;
      j["baseline"] = res.baseline.to_json();
      j["eval"] = res.report.to_json();
    }
    j["timing_s"] = res.timing_s;
    write_json(j, out / "report.json");
  });
  return res;
}

}  // namespace gspw
