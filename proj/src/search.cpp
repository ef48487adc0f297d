#include "gspw/search.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>

#include "gspw/error.hpp"
#include "gspw/manifold.hpp"
#include "gspw/parallel.hpp"
#include "gspw/render.hpp"

namespace gspw {

namespace {

constexpr double kScoreTie = 1e-9;
constexpr double kOffsetTie = 1e-6;
constexpr double kMinVisibleFraction = 0.5;

Mat3 rot_z(double theta) {
  return Eigen::AngleAxisd(theta, Vec3::UnitZ()).toRotationMatrix();
}

Vec3 centroid(const VoxelIndex& index, std::span<const VoxelKey> keys) {
  Vec3 c = Vec3::Zero();
  for (const auto& k : keys) c += index.center(k);
  return c / static_cast<double>(keys.size());
}

std::vector<std::int64_t> intact_anchors(const Patch& patch, const SearchContext& ctx) {
  std::vector<std::int64_t> out;
  for (std::int64_t id : patch.anchor_ids) {
    const auto it = patch.labels.find(id);
    const bool intact =
        it != patch.labels.end() ? it->second == AnchorLabel::Intact : !ctx.barred(id);
    if (intact) out.push_back(id);
  }
  return out;
}

/// Nearest camera (by centre distance to `focus`) that sees at least half of the points.
std::optional<int> choose_frame(const Scene& scene, const Vec3& focus, std::span<const Vec3> pts) {
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t c = 0; c < scene.cameras.size(); ++c)
    order.emplace_back((scene.cameras[c].center() - focus).squaredNorm(), c);
  std::sort(order.begin(), order.end());
  for (const auto& [d2, c] : order) {
    std::size_t seen = 0;
    for (const auto& p : pts) seen += project_point(p, scene.cameras[c]).visible;
    if (seen > 0 && static_cast<double>(seen) >= kMinVisibleFraction * pts.size())
      return scene.cameras[c].frame_index;
  }
  return std::nullopt;
}

/// Bilinear sample of a multi-channel image at a pixel-centre coordinate, edge clamped.
void bilinear(const Image& img, const Vec2& p, std::vector<double>& out) {
  const double x = std::clamp(p.x(), 0.0, img.width - 1.0);
  const double y = std::clamp(p.y(), 0.0, img.height - 1.0);
  const int x0 = std::min(static_cast<int>(x), img.width - 1);
  const int y0 = std::min(static_cast<int>(y), img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0, fy = y - y0;
  out.assign(static_cast<std::size_t>(img.channels), 0.0);
  for (int c = 0; c < img.channels; ++c)
    out[c] = (1 - fy) * ((1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c)) +
             fy * ((1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c));
}

/// Sum of L2-normalised samples at the visible points; returns the sample count.
int aggregate(const Image& fmap, const Camera& cam, std::span<const Vec3> pts,
              std::vector<double>& sum) {
  sum.assign(static_cast<std::size_t>(fmap.channels), 0.0);
  std::vector<double> s;
  int n = 0;
  for (const auto& p : pts) {
    const ProjectedPoint pp = project_point(p, cam);
    if (!pp.visible) continue;
    bilinear(fmap, pp.pixel, s);
    double norm = 0.0;
    for (double v : s) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) continue;
    for (std::size_t d = 0; d < s.size(); ++d) sum[d] += s[d] / norm;
    ++n;
  }
  return n;
}

struct Plan {
  std::vector<Vec3> target_pts;
  std::vector<Vec3> source_pts;
  int target_frame = -1;
  int source_frame = -1;
};

Plan plan_affinity(const Patch& target, const CandidatePlacement& placement,
                   const SearchContext& ctx) {
  Plan plan;
  for (std::int64_t id : intact_anchors(target, ctx)) {
    const Vec3& p = ctx.position(id);
    plan.target_pts.push_back(p);
    plan.source_pts.push_back(placement.map.inverse(p));
  }
  if (plan.target_pts.empty())
    throw Error(ErrorCode::AffinityUndefined, "target patch has no intact anchors");
  const Vec3 c = centroid(ctx.index(), target.voxels);
  const auto tf = choose_frame(ctx.scene(), c, plan.target_pts);
  if (!tf) throw Error(ErrorCode::AffinityUndefined, "no frame sees the target's intact anchors");
  const auto sf = choose_frame(ctx.scene(), placement.map.inverse(c), plan.source_pts);
  if (!sf) throw Error(ErrorCode::AffinityUndefined, "no frame sees the source counterparts");
  plan.target_frame = *tf;
  plan.source_frame = *sf;
  return plan;
}

AffinityRecord score_plan(const Plan& plan, const CandidatePlacement& placement,
                          SearchContext& ctx, int target_id) {
  std::vector<double> a, b;
  const int na = aggregate(ctx.feature_map(plan.target_frame),
                           *ctx.scene().camera_for_frame(plan.target_frame), plan.target_pts, a);
  const int nb = aggregate(ctx.feature_map(plan.source_frame),
                           *ctx.scene().camera_for_frame(plan.source_frame), plan.source_pts, b);
  double dot = 0, aa = 0, bb = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    dot += a[d] * b[d];
    aa += a[d] * a[d];
    bb += b[d] * b[d];
  }
  if (na == 0 || nb == 0 || aa <= 0 || bb <= 0)
    throw Error(ErrorCode::AffinityUndefined, "no non-zero feature samples");
  AffinityRecord r;
  r.target_id = target_id;
  r.placement = placement;
  r.score = std::clamp(dot / std::sqrt(aa * bb), -1.0, 1.0);
  r.target_frame = plan.target_frame;
  r.source_frame = plan.source_frame;
  r.samples = na;
  return r;
}

/// Validity rules shared by the stride enumeration and the oracle.
bool valid_window(const Patch& target, std::span<const VoxelKey> source, SearchContext& ctx) {
  const auto& index = ctx.index();
  const auto& m = ctx.manifold();
  std::set<VoxelKey> seen;
  for (const auto& k : source) {
    if (!seen.insert(k).second) return false;
    if (std::binary_search(target.voxels.begin(), target.voxels.end(), k)) return false;
    const auto* ids = index.anchors_in(k);
    if (ids == nullptr) return false;
    for (std::int64_t id : *ids)
      if (ctx.barred(id)) return false;
    try {
      const double u = to_bev(index.center(k), m).u;
      if (u < m.arc.front() || u > m.arc.back()) return false;
    } catch (const Error&) {
      return false;
    }
  }
  return true;
}

std::vector<AffinityRecord> score_all(const Patch& target,
                                      std::span<const CandidatePlacement> candidates,
                                      SearchContext& ctx, int target_id) {
  const auto n = static_cast<std::int64_t>(candidates.size());
  std::vector<std::optional<Plan>> plans(candidates.size());
  parallel_for(n, [&](std::int64_t i) {
    try {
      plans[i] = plan_affinity(target, candidates[i], ctx);
    } catch (const Error&) {
    }
  });
  std::set<int> frames;
  for (const auto& p : plans)
    if (p) {
      frames.insert(p->target_frame);
      frames.insert(p->source_frame);
    }
  const std::vector<int> fv(frames.begin(), frames.end());
  ctx.prefetch(fv);

  std::vector<std::optional<AffinityRecord>> recs(candidates.size());
  parallel_for(n, [&](std::int64_t i) {
    if (!plans[i]) return;
    try {
      recs[i] = score_plan(*plans[i], candidates[i], ctx, target_id);
    } catch (const Error&) {
    }
  });
  std::vector<AffinityRecord> out;
  for (auto& r : recs)
    if (r) out.push_back(std::move(*r));
  return out;
}

AffinityRecord pick(std::vector<AffinityRecord>& scored, std::size_t total) {
  if (scored.empty())
    throw Error(ErrorCode::NoCandidate,
                fmt::format("none of {} candidate placements could be scored", total));
  std::size_t best = 0;
  for (std::size_t i = 1; i < scored.size(); ++i)
    if (better(scored[i], scored[best])) best = i;
  return scored[best];
}

}  // namespace

Vec3 RigidMap::apply(const Vec3& x) const { return rot_z(theta) * (x - source_pivot) + target_pivot; }

Vec3 RigidMap::inverse(const Vec3& y) const {
  return rot_z(-theta) * (y - target_pivot) + source_pivot;
}

Quat RigidMap::rotation() const { return Quat::about_z(theta); }

void SearchConfig::validate() const {
  if (!(span_u >= 0 && span_v >= 0))
    throw Error(ErrorCode::Config, "search spans must be non-negative");
  if (!std::isfinite(stride)) throw Error(ErrorCode::Config, "stride must be finite");
}

SearchContext::SearchContext(const Scene& scene, const VoxelIndex& index,
                             std::vector<std::int64_t> barred)
    : scene_(&scene), index_(&index), barred_(barred.begin(), barred.end()) {
  if (!scene.manifold)
    throw Error(ErrorCode::Validation, "search needs a scene with a ground manifold");
  render_prims_ = scene.primitives;
  for (std::size_t i = 0; i < render_prims_.size(); ++i) {
    slot_[render_prims_[i].id] = i;
    if (barred_.count(render_prims_[i].id)) render_prims_[i].opacity = 0.0;
  }
}

const Vec3& SearchContext::position(std::int64_t id) const {
  const auto it = slot_.find(id);
  if (it == slot_.end())
    throw Error(ErrorCode::StaleIndex, fmt::format("anchor {} is not in the scene", id));
  return scene_->primitives[it->second].position;
}

const Image& SearchContext::feature_map(int frame_index) {
  {
    std::lock_guard lock(mutex_);
    const auto it = cache_.find(frame_index);
    if (it != cache_.end()) return *it->second;
  }
  const Camera* cam = scene_->camera_for_frame(frame_index);
  if (cam == nullptr)
    throw Error(ErrorCode::Validation, fmt::format("no camera for frame {}", frame_index));
  RenderOptions opts;
  opts.channels = kFeature;
  auto img = std::make_shared<const Image>(
      render(render_prims_, scene_->feature_dim, *cam, opts).feature);
  std::lock_guard lock(mutex_);
  return *cache_.emplace(frame_index, std::move(img)).first->second;
}

void SearchContext::prefetch(std::span<const int> frames) {
  for (int f : frames) feature_map(f);
}

std::size_t SearchContext::cached_frames() const {
  std::lock_guard lock(mutex_);
  return cache_.size();
}

std::vector<CandidatePlacement> enumerate_candidates(const Patch& target, SearchContext& ctx,
                                                     const SearchConfig& cfg) {
  cfg.validate();
  if (target.voxels.empty()) throw Error(ErrorCode::Validation, "target patch has no voxels");
  const auto& index = ctx.index();
  const auto& m = ctx.manifold();
  const double stride = cfg.stride > 0 ? cfg.stride : index.size;
  const Vec3 c = centroid(index, target.voxels);
  const Bev t = to_bev(c, m);
  const Vec3 pt = from_bev(t.u, t.v, m);
  const double ht = heading_at(t.u, m);

  const int nu = static_cast<int>(std::floor(cfg.span_u / stride + 1e-9));
  const int nv = static_cast<int>(std::floor(cfg.span_v / stride + 1e-9));
  std::vector<CandidatePlacement> out;
  for (int iu = -nu; iu <= nu; ++iu) {
    if (iu == 0) continue;
    for (int iv = -nv; iv <= nv; ++iv) {
      CandidatePlacement cand;
      cand.du = iu * stride;
      cand.dv = iv * stride;
      const double us = t.u + cand.du;
      if (us < m.arc.front() || us > m.arc.back()) continue;
      cand.map.source_pivot = from_bev(us, t.v + cand.dv, m);
      cand.map.target_pivot = pt;
      cand.map.theta = ht - heading_at(us, m);
      for (const auto& k : target.voxels)
        cand.source_voxels.push_back(voxel_of(cand.map.inverse(index.center(k)), index));
      if (!valid_window(target, cand.source_voxels, ctx)) continue;
      std::sort(cand.source_voxels.begin(), cand.source_voxels.end());
      out.push_back(std::move(cand));
    }
  }
  return out;
}

AffinityRecord patch_affinity(const Patch& target, const CandidatePlacement& placement,
                              SearchContext& ctx, int target_id) {
  const Plan plan = plan_affinity(target, placement, ctx);
  return score_plan(plan, placement, ctx, target_id);
}

bool better(const AffinityRecord& a, const AffinityRecord& b) {
  if (std::abs(a.score - b.score) > kScoreTie) return a.score > b.score;
  const double au = std::abs(a.placement.du), bu = std::abs(b.placement.du);
  if (std::abs(au - bu) > kOffsetTie) return au < bu;
  const double av = std::abs(a.placement.dv), bv = std::abs(b.placement.dv);
  if (std::abs(av - bv) > kOffsetTie) return av < bv;
  return a.placement.source_voxels < b.placement.source_voxels;
}

AffinityRecord select_best(const Patch& target, std::span<const CandidatePlacement> candidates,
                           SearchContext& ctx, int target_id,
                           std::vector<AffinityRecord>* scored) {
  auto recs = score_all(target, candidates, ctx, target_id);
  if (scored != nullptr) *scored = recs;
  return pick(recs, candidates.size());
}

AffinityRecord exhaustive_oracle(const Patch& target, SearchContext& ctx, int target_id) {
  if (target.voxels.empty()) throw Error(ErrorCode::Validation, "target patch has no voxels");
  const auto& index = ctx.index();
  const auto& m = ctx.manifold();
  const VoxelKey ref = target.voxels.front();
  const Vec3 c = centroid(index, target.voxels);
  double ut = 0, vt = 0;
  try {
    const Bev t = to_bev(c, m);
    ut = t.u;
    vt = t.v;
  } catch (const Error&) {
    throw Error(ErrorCode::NoCandidate, "target lies outside the corridor");
  }

  std::vector<CandidatePlacement> windows;
  for (const auto& key : index.occupied_keys()) {
    const VoxelKey s{key.i - ref.i, key.j - ref.j, key.k - ref.k};
    const Vec3 shift(s.i * index.size, s.j * index.size, s.k * index.size);
    CandidatePlacement cand;
    try {
      const Bev b = to_bev(c + shift, m);
      cand.du = b.u - ut;
      cand.dv = b.v - vt;
    } catch (const Error&) {
      continue;
    }
    if (std::abs(cand.du) < 0.5 * index.size) continue;
    for (const auto& k : target.voxels) cand.source_voxels.push_back({k.i + s.i, k.j + s.j, k.k + s.k});
    if (!valid_window(target, cand.source_voxels, ctx)) continue;
    cand.map.source_pivot = c + shift;
    cand.map.target_pivot = c;
    windows.push_back(std::move(cand));
  }
  auto recs = score_all(target, windows, ctx, target_id);
  return pick(recs, windows.size());
}

nlohmann::json to_json(const AffinityRecord& r) {
  nlohmann::json voxels = nlohmann::json::array();
  for (const auto& k : r.placement.source_voxels) voxels.push_back({k.i, k.j, k.k});
  const auto& mp = r.placement.map;
  return {{"target", r.target_id},
          {"score", r.score},
          {"du", r.placement.du},
          {"dv", r.placement.dv},
          {"theta", mp.theta},
          {"source_pivot", {mp.source_pivot.x(), mp.source_pivot.y(), mp.source_pivot.z()}},
          {"target_pivot", {mp.target_pivot.x(), mp.target_pivot.y(), mp.target_pivot.z()}},
          {"source_voxels", voxels},
          {"target_frame", r.target_frame},
          {"source_frame", r.source_frame},
          {"samples", r.samples}};
}

}  // namespace gspw
