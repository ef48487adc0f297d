#include "gspw/synth.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "gspw/error.hpp"
#include "gspw/io.hpp"
#include "gspw/manifold.hpp"
#include "gspw/parallel.hpp"
#include "gspw/render.hpp"

namespace gspw {

namespace {

constexpr double kTwoPi = 6.283185307179586;
constexpr double kRecurrenceThreshold = 0.5;
constexpr double kMissingClearance = 0.7;  // metres from the nearest intact anchor

struct Stain {
  double x, y, r;
};

double positive_mod(double a, double m) {
  const double r = std::fmod(a, m);
  return r < 0 ? r + m : r;
}

/// Deterministic periodic road paint plus grass verges.
Vec3 paint(double x, double y, double period, double half_width) {
  if (std::abs(y) > half_width) return {0.22, 0.42, 0.18};
  const double w = positive_mod(x, period) * (10.0 / period);  // phase scaled to a 10 m layout
  const double g = 0.32 + 0.04 * std::cos(kTwoPi * x / period);
  Vec3 c(g, g, g + 0.02);
  if (std::abs(y) < 0.5 && w < 4.0) c = {0.92, 0.92, 0.88};
  if (y < -half_width + 0.5) c = {0.88, 0.88, 0.88};
  if (y > half_width - 0.5) c = {0.90, 0.78, 0.20};
  if (y > -3.25 && y < -1.25 && w >= 6.0 && w < 8.0) c = {0.72, 0.22, 0.18};
  if (y > 1.25 && y < 3.25 && w >= 1.5 && w < 3.5) c = {0.20, 0.35, 0.72};
  return c;
}

double ground_z(const GenSpec& s, double x, double phase) {
  return s.hill_amplitude * std::sin(kTwoPi * x / s.hill_wavelength + phase);
}

double ground_slope(const GenSpec& s, double x, double phase) {
  return s.hill_amplitude * kTwoPi / s.hill_wavelength *
         std::cos(kTwoPi * x / s.hill_wavelength + phase);
}

std::vector<double> random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (auto& x : v) {
    x = n(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

void check_spec(const GenSpec& s) {
  auto bad = [](const std::string& msg) { throw Error(ErrorCode::Infeasible, msg); };
  if (!(s.road_length > 0 && s.road_width > 0 && s.spacing > 0 && s.texture_period > 0))
    bad("road length, width, spacing and period must be positive");
  if (s.feature_dim < 1) bad("feature dimension must be at least 1");
  if (s.camera_count < 1) bad("need at least one camera");
  if (s.image_width < 1 || s.image_height < 1 || !(s.focal > 0)) bad("invalid camera intrinsics");
  if (s.feature_downsample < 1 || s.image_width % s.feature_downsample != 0 ||
      s.image_height % s.feature_downsample != 0)
    bad("feature downsample factor must divide the image size");
  for (const auto& o : s.occluders) {
    if (!(o.length > 0 && o.width > 0 && o.height > 0)) bad("occluder extents must be positive");
    if (o.u - o.length / 2 < 0 || o.u + o.length / 2 > s.road_length ||
        std::abs(o.v) + o.width / 2 > s.road_width / 2)
      bad(fmt::format("occluder at (u={}, v={}) leaves the road", o.u, o.v));
  }
}

}  // namespace

GenSpec default_gen_spec(std::uint64_t seed) {
  GenSpec s;
  s.seed = seed;
  std::mt19937_64 rng(seed ^ 0x5DEECE66Dull);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  OccluderSpec o;
  o.u = 0.5 * s.road_length + (u(rng) - 0.5) * 0.3 * s.road_length;
  o.v = u(rng) < 0.5 ? -2.0 : 2.0;
  s.occluders.push_back(o);
  return s;
}

std::vector<double> synthetic_features(double u, double v, const Vec3& color, double period,
                                       int dim) {
  std::vector<double> f(static_cast<std::size_t>(dim), 0.0);
  const int colour_dims = dim >= 6 ? 3 : 0;
  const int atoms = dim - colour_dims;
  const double phi = kTwoPi * u / period;
  for (int a = 0; a < atoms; ++a) {
    const int m = a / 2;
    const int k = 1 + m % 4;
    const int j = m / 4;
    const double omega = 0.3 * (1 + j / 2) * (j % 2 == 0 ? 1.0 : -1.0);
    const double arg = k * phi + omega * v;
    f[a] = a % 2 == 0 ? std::cos(arg) : std::sin(arg);
  }
  for (int c = 0; c < colour_dims; ++c) f[atoms + c] = 0.15 * (color[c] - 0.5);
  double norm = 0.0;
  for (double x : f) norm += x * x;
  norm = std::sqrt(norm);
  for (auto& x : f) x /= norm;
  return f;
}

GenOutput generate_road_scene(const GenSpec& spec) {
  check_spec(spec);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double half_w = spec.road_width / 2;
  const double hill_phase = kTwoPi * uni(rng);
  const double drift_phase = kTwoPi * uni(rng);

  std::vector<Stain> stains;
  const int n_stains =
      spec.stain_count >= 0 ? spec.stain_count
                            : static_cast<int>(std::lround(spec.road_length / 20.0));
  for (int i = 0; i < n_stains; ++i)
    stains.push_back({uni(rng) * spec.road_length, (uni(rng) * 2 - 1) * (half_w - 0.5),
                      0.5 + 0.3 * uni(rng)});

  GenOutput out;
  out.spec = spec;
  Scene& clean = out.clean;
  clean.feature_dim = spec.feature_dim;

  // Ground primitives on a cell-centred jittered grid.
  const double y0 = -half_w - spec.verge_width;
  const int nx = static_cast<int>(std::floor(spec.road_length / spec.spacing + 1e-9));
  const int ny = static_cast<int>(std::floor((spec.road_width + 2 * spec.verge_width) / spec.spacing + 1e-9));
  std::int64_t next_id = 0;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      const double jx = (uni(rng) * 2 - 1) * spec.jitter * 0.5 * spec.spacing;
      const double jy = (uni(rng) * 2 - 1) * spec.jitter * 0.5 * spec.spacing;
      const double x = (i + 0.5) * spec.spacing + jx;
      const double y = y0 + (j + 0.5) * spec.spacing + jy;
      Primitive p;
      p.id = next_id++;
      p.position = {x, y, ground_z(spec, x, hill_phase)};
      p.scale = {0.6 * spec.spacing, 0.6 * spec.spacing, 0.02};
      p.rotation = Quat{std::cos(-0.5 * std::atan(ground_slope(spec, x, hill_phase))), 0.0,
                        std::sin(-0.5 * std::atan(ground_slope(spec, x, hill_phase))), 0.0};
      p.opacity = 0.92 + 0.07 * uni(rng);
      Vec3 c = paint(x, y, spec.texture_period, half_w);
      if (std::abs(y) <= half_w) {
        c *= 1.0 + spec.drift_amplitude * std::sin(kTwoPi * x / spec.drift_wavelength + drift_phase);
        for (const auto& s : stains)
          if (std::hypot(x - s.x, y - s.y) < s.r) c *= 0.55;
      }
      for (int ch = 0; ch < 3; ++ch) c[ch] += (uni(rng) * 2 - 1) * spec.noise;
      p.color = c.cwiseMax(0.0).cwiseMin(1.0);
      p.feature = synthetic_features(x, y, p.color, spec.texture_period, spec.feature_dim);
      clean.primitives.push_back(std::move(p));
    }

  // Forward-facing cameras along the centreline.
  const double cam_x0 = -2.0;
  const double cam_x1 = spec.road_length - 12.0;
  const double pitch = spec.camera_pitch_deg * kTwoPi / 360.0;
  for (int f = 0; f < spec.camera_count; ++f) {
    const double x =
        spec.camera_count == 1 ? cam_x0 : cam_x0 + f * (cam_x1 - cam_x0) / (spec.camera_count - 1);
    const Vec3 eye(x, 0.0, ground_z(spec, x, hill_phase) + spec.camera_height);
    const Vec3 target = eye + Vec3(std::cos(pitch), 0.0, -std::sin(pitch));
    clean.cameras.push_back(
        Camera::look_at(f, spec.image_width, spec.image_height, spec.focal, eye, target));
  }
  for (double x = cam_x0; x <= spec.road_length + 1e-9; x += 1.0)
    clean.trajectory.push_back({x, 0.0, ground_z(spec, x, hill_phase)});
  quantize_to_f32(clean);
  clean.manifold = fit_ground_manifold(clean);
  clean.metadata = {{"generator", "road"},
                    {"seed", spec.seed},
                    {"texture_period", spec.texture_period},
                    {"road_length", spec.road_length},
                    {"road_width", spec.road_width}};

  // Clean renders.
  const int nframes = spec.camera_count;
  std::vector<RenderOutput> renders(static_cast<std::size_t>(nframes));
  for (int f = 0; f < nframes; ++f)
    renders[f] = render(clean, clean.cameras[f], {.channels = kAllChannels, .keep_weights = true, .roi = std::nullopt});

  // Occluder windows and masks.
  std::vector<OccluderSpec> occ = spec.occluders;
  for (auto& o : occ)
    if (o.first_frame < 0 || o.last_frame < 0) {
      o.first_frame = nframes;
      o.last_frame = -1;
      for (int f = 0; f < nframes; ++f) {
        const double cx = clean.cameras[f].center().x();
        if (cx >= o.u - spec.auto_behind && cx <= o.u + spec.auto_ahead) {
          o.first_frame = std::min(o.first_frame, f);
          o.last_frame = std::max(o.last_frame, f);
        }
      }
    }
  out.masks.resize(static_cast<std::size_t>(nframes));
  out.gt_images.resize(static_cast<std::size_t>(nframes));
  out.gt_depths.resize(static_cast<std::size_t>(nframes));
  parallel_for(nframes, [&](std::int64_t f) {
    const Camera& cam = clean.cameras[f];
    const RenderOutput& r = renders[f];
    Mask mask(cam.width, cam.height);
    Image gt = r.rgb;
    Image depth = r.depth;
    const Vec3 o = cam.center();
    for (const auto& oc : occ) {
      if (f < oc.first_frame || f > oc.last_frame) continue;
      const double zp = ground_z(spec, oc.u, hill_phase) + oc.height;
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
          const Vec3 d = cam.ray_direction(x, y);
          if (std::abs(d.z()) < 1e-12) continue;
          const double t = (zp - o.z()) / d.z();
          if (t <= 0) continue;
          const Vec3 p = o + t * d;
          if (std::abs(p.x() - oc.u) > oc.length / 2 || std::abs(p.y() - oc.v) > oc.width / 2)
            continue;
          const double z = cam.to_camera(p).z();
          if (r.alpha.at(x, y) >= 0.5 && z >= r.depth.at(x, y)) continue;
          if (mask.get(x, y) && z >= depth.at(x, y)) continue;
          mask.set(x, y);
          const double shade = 0.85 + 0.15 * std::cos(0.5 * (p.x() - oc.u));
          gt.at(x, y, 0) = 0.55 * shade;
          gt.at(x, y, 1) = 0.12 * shade;
          gt.at(x, y, 2) = 0.14 * shade;
          depth.at(x, y) = z;
        }
    }
    out.masks[f] = {static_cast<int>(f), std::move(mask)};
    out.gt_images[f] = std::move(gt);
    out.gt_depths[f] = std::move(depth);
  });

  // Recurrence of each anchor inside the occluder masks.
  const std::size_t n = clean.primitives.size();
  std::vector<int> visible(n, 0), masked(n, 0);
  for (int f = 0; f < nframes; ++f) {
    const Camera& cam = clean.cameras[f];
    for (std::size_t i = 0; i < n; ++i) {
      const auto pp = project_point(clean.primitives[i].position, cam);
      if (!pp.visible) continue;
      ++visible[i];
      const auto [px, py] = rounded_pixel(pp.pixel);
      if (out.masks[f].bitmap.get(px, py)) ++masked[i];
    }
  }
  std::vector<std::uint8_t> degraded(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    degraded[i] = visible[i] > 0 && masked[i] >= kRecurrenceThreshold * visible[i];

  out.corrupt = clean;
  std::vector<std::int64_t> degraded_ids;
  for (std::size_t i = 0; i < n; ++i) {
    if (!degraded[i]) continue;
    Primitive& p = out.corrupt.primitives[i];
    p.opacity = 0.2 + 0.4 * uni(rng);
    p.color = {uni(rng), uni(rng), uni(rng)};
    p.feature = random_unit(rng, spec.feature_dim);
    degraded_ids.push_back(p.id);
  }
  quantize_to_f32(out.corrupt);

  // Ground-truth split of the degraded set: "missing" anchors sit deep inside
  // the hole (no intact anchor nearby) and are covered by the reference mask.
  int ref_frame = 0;
  std::size_t best_count = 0;
  for (int f = 0; f < nframes; ++f)
    if (out.masks[f].bitmap.count() > best_count) {
      best_count = out.masks[f].bitmap.count();
      ref_frame = f;
    }
  std::vector<std::int64_t> missing_ids, incomplete_ids;
  for (std::size_t i = 0; i < n; ++i) {
    if (!degraded[i]) continue;
    const Vec3& pi = clean.primitives[i].position;
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!degraded[j])
        nearest = std::min(nearest, (clean.primitives[j].position - pi).head<2>().norm());
    const auto pp = project_point(pi, clean.cameras[ref_frame]);
    bool in_ref = false;
    if (pp.visible) {
      const auto [px, py] = rounded_pixel(pp.pixel);
      in_ref = out.masks[ref_frame].bitmap.get(px, py);
    }
    (nearest > kMissingClearance && in_ref ? missing_ids : incomplete_ids).push_back(clean.primitives[i].id);
  }

  // Evaluation regions: pixels whose clean appearance is dominated by degraded anchors.
  out.regions.resize(static_cast<std::size_t>(nframes));
  out.clean_images.resize(static_cast<std::size_t>(nframes));
  out.features.resize(static_cast<std::size_t>(nframes));
  nlohmann::json frames = nlohmann::json::array();
  for (int f = 0; f < nframes; ++f) {
    const RenderOutput& r = renders[f];
    const auto& w = r.weights;
    Mask region(r.alpha.width, r.alpha.height);
    for (std::size_t p = 0; p < r.alpha.pixel_count(); ++p) {
      double share = 0.0;
      for (auto o = w.offsets[p]; o < w.offsets[p + 1]; ++o)
        if (degraded[w.prim[o]]) share += w.weight[o];
      region.bits[p] = r.alpha.data[p] > 0.5 && share >= 0.5 * r.alpha.data[p];
    }
    frames.push_back({{"frame", f},
                      {"mask_pixels", out.masks[f].bitmap.count()},
                      {"region_pixels", region.count()}});
    out.regions[f] = {f, std::move(region)};
    out.clean_images[f] = r.rgb;
    out.features[f] = {f, downsample_area(r.feature, spec.feature_downsample)};
  }

  nlohmann::json occ_json = nlohmann::json::array();
  for (const auto& o : occ)
    occ_json.push_back({{"u", o.u},
                        {"v", o.v},
                        {"length", o.length},
                        {"width", o.width},
                        {"height", o.height},
                        {"first_frame", o.first_frame},
                        {"last_frame", o.last_frame}});
  nlohmann::json repeats = nlohmann::json::array();
  for (int k = 1; k * spec.texture_period <= spec.road_length; ++k) {
    repeats.push_back(k * spec.texture_period);
    repeats.push_back(-k * spec.texture_period);
  }
  out.manifest = {{"seed", spec.seed},
                  {"texture_period", spec.texture_period},
                  {"road_length", spec.road_length},
                  {"road_width", spec.road_width},
                  {"spacing", spec.spacing},
                  {"feature_dim", spec.feature_dim},
                  {"feature_downsample", spec.feature_downsample},
                  {"camera_count", spec.camera_count},
                  {"image_width", spec.image_width},
                  {"image_height", spec.image_height},
                  {"primitive_count", out.clean.primitives.size()},
                  {"corrupt_primitive_count", out.corrupt.primitives.size()},
                  {"degraded_ids", degraded_ids},
                  {"missing_ids", missing_ids},
                  {"incomplete_ids", incomplete_ids},
                  {"reference_frame", ref_frame},
                  {"planted_repeat_offsets", repeats},
                  {"occluders", occ_json},
                  {"frames", frames}};
  return out;
}

void write_generated(const GenOutput& out, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_scene(out.clean, dir / "scene_clean.gsp");
  save_scene(out.corrupt, dir / "scene_corrupt.gsp");
  for (std::size_t f = 0; f < out.masks.size(); ++f) {
    const int idx = out.masks[f].frame_index;
    save_mask_pgm(out.masks[f].bitmap, dir / "masks" / frame_file("mask", idx, "pgm"));
    save_ppm(out.gt_images[f], dir / "gt" / frame_file("gt", idx, "ppm"));
    save_fmap(out.gt_depths[f], dir / "gt" / frame_file("depth", idx, "fmap"));
    save_ppm(out.clean_images[f], dir / "clean" / frame_file("clean", idx, "ppm"));
    save_mask_pgm(out.regions[f].bitmap, dir / "regions" / frame_file("region", idx, "pgm"));
    save_fmap(out.features[f].data, dir / "features" / frame_file("feat", idx, "fmap"));
  }
  std::ofstream m(dir / "manifest.json");
  m << out.manifest.dump(2) << "\n";
  if (!m) throw Error(ErrorCode::Io, fmt::format("cannot write {}", (dir / "manifest.json").string()));
}

}  // namespace gspw
