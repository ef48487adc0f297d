#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fuzz.hpp"
#include "road.hpp"
#include "gspw/error.hpp"
#include "gspw/locate.hpp"
#include "gspw/manifold.hpp"
#include "gspw/search.hpp"

using namespace gspw;

namespace {

/// 100 m of flat ground along +x with forward cameras every 5 m.
Scene straight_road() {
  Scene s = testing::flat_ground(0, 100, -6, 6, 0.5, 0.2);
  for (int f = 0; f < 20; ++f) {
    const Vec3 eye(5.0 * f - 3.0, 0.0, 2.0);
    s.cameras.push_back(Camera::look_at(f, 96, 64, 64, eye, eye + Vec3(1.0, 0.0, -0.7)));
  }
  return s;
}

Patch single_voxel_patch(const VoxelIndex& index, VoxelKey key) {
  Patch p = extract_patch(index, {key});
  for (auto id : p.anchor_ids) p.labels[id] = AnchorLabel::Intact;
  return p;
}

AffinityRecord record(double score, double du, double dv, VoxelKey first = {}) {
  AffinityRecord r;
  r.score = score;
  r.placement.du = du;
  r.placement.dv = dv;
  r.placement.source_voxels = {first};
  return r;
}

struct Located {
  GenOutput gen;
  VoxelIndex index;
  LocateResult loc;
};

Located locate_road(std::uint64_t seed, double voxel = 2.5) {
  Located l{generate_road_scene(testing::small_road_spec(seed)), {}, {}};
  l.index = build_index(l.gen.corrupt, voxel);
  l.loc = locate(l.gen.corrupt, l.gen.masks, l.index, {});
  return l;
}

}  // namespace

TEST_CASE("stride grid produces the expected longitudinal slots") {
  const Scene s = straight_road();
  const auto index = build_index(s, 2.5);
  const Patch target = single_voxel_patch(index, {20, 3, 0});  // centre x = 51.25
  SearchContext ctx(s, index, {});
  SearchConfig cfg;
  cfg.span_u = 20;
  cfg.span_v = 0;
  cfg.stride = 2.5;
  const auto cands = enumerate_candidates(target, ctx, cfg);
  std::set<double> dus;
  for (const auto& c : cands) {
    CHECK(c.dv == 0.0);
    dus.insert(c.du);
  }
  std::set<double> expect;
  for (int k = 1; k <= 8; ++k) {
    expect.insert(2.5 * k);
    expect.insert(-2.5 * k);
  }
  CHECK(dus == expect);
  for (const auto& c : cands) {
    REQUIRE(c.source_voxels.size() == 1);
    CHECK(c.source_voxels[0] == VoxelKey{20 + static_cast<int>(std::lround(c.du / 2.5)), 3, 0});
  }
}

TEST_CASE("no occupied voxels besides the target gives no candidates") {
  Scene s = straight_road();
  const Vec3 keep(51.0, 1.0, 0.0);
  std::erase_if(s.primitives, [&](const Primitive& p) {
    return std::abs(p.position.x() - keep.x()) > 1.0 || std::abs(p.position.y() - keep.y()) > 1.0;
  });
  const auto index = build_index(s, 2.5, Vec3(0.0, -7.5, 0.0));
  const Patch target = single_voxel_patch(index, voxel_of(keep, index));
  SearchContext ctx(s, index, {});
  CHECK(enumerate_candidates(target, ctx, {}).empty());
  CHECK_THROWS_AS(exhaustive_oracle(target, ctx), Error);
}

TEST_CASE("candidates equal a brute-force scan of occupied windows") {
  const auto l = locate_road(3);
  REQUIRE_FALSE(l.loc.patches.empty());
  const Patch& target = l.loc.patches.front();
  const auto barred = barred_anchors(l.loc);
  SearchContext ctx(l.gen.corrupt, l.index, barred);
  SearchConfig cfg;
  const auto cands = enumerate_candidates(target, ctx, cfg);

  // Straight road along +x: every slot is an integer voxel translation.
  const std::set<std::int64_t> bar(barred.begin(), barred.end());
  const double lam = l.index.size;
  const double len = l.gen.corrupt.manifold->arc.back();
  const Vec3 c0 = [&] {
    Vec3 c = Vec3::Zero();
    for (const auto& k : target.voxels) c += l.index.center(k);
    return Vec3(c / static_cast<double>(target.voxels.size()));
  }();
  const double u0 = to_bev(c0, *l.gen.corrupt.manifold).u;
  std::set<std::vector<VoxelKey>> brute;
  for (int di = -12; di <= 12; ++di)
    for (int dj = -2; dj <= 2; ++dj) {
      if (di == 0 || std::abs(di * lam) > cfg.span_u + 1e-9 || std::abs(dj * lam) > cfg.span_v + 1e-9)
        continue;
      if (u0 + di * lam < 0 || u0 + di * lam > len) continue;
      std::vector<VoxelKey> win;
      bool ok = true;
      for (const auto& k : target.voxels) {
        const VoxelKey s{k.i + di, k.j + dj, k.k};
        if (std::binary_search(target.voxels.begin(), target.voxels.end(), s)) ok = false;
        const auto* ids = l.index.anchors_in(s);
        if (ids == nullptr) ok = false;
        else
          for (auto id : *ids) ok = ok && !bar.count(id);
        const double us = l.index.center(s).x() - l.gen.corrupt.trajectory.front().x();
        ok = ok && us >= 0 && us <= len;
        win.push_back(s);
      }
      std::sort(win.begin(), win.end());
      if (ok) brute.insert(win);
    }
  std::set<std::vector<VoxelKey>> got;
  for (const auto& c : cands) got.insert(c.source_voxels);
  CHECK(got == brute);
  CHECK_FALSE(got.empty());
}

TEST_CASE("identity placement scores one") {
  const Scene s = straight_road();
  const auto index = build_index(s, 2.5);
  const Patch target = single_voxel_patch(index, {12, 2, 0});
  SearchContext ctx(s, index, {});
  CandidatePlacement id;
  id.source_voxels = target.voxels;
  const auto r = patch_affinity(target, id, ctx);
  CHECK(r.score == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r.target_frame == r.source_frame);
}

TEST_CASE("orthogonal features score zero") {
  Scene s = straight_road();
  for (auto& p : s.primitives) p.feature = p.position.x() < 50 ? std::vector<double>{1, 0, 0}
                                                              : std::vector<double>{0, 1, 0};
  const auto index = build_index(s, 2.5);
  const Patch target = single_voxel_patch(index, {10, 3, 0});
  SearchContext ctx(s, index, {});
  SearchConfig cfg;
  cfg.span_u = 50;
  cfg.span_v = 0;
  const auto cands = enumerate_candidates(target, ctx, cfg);
  const auto it = std::find_if(cands.begin(), cands.end(), [](const auto& c) { return c.du == 50.0; });
  REQUIRE(it != cands.end());
  CHECK(patch_affinity(target, *it, ctx).score == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("the planted repeat outscores every non-repeat placement") {
  const auto l = locate_road(2);
  const Patch& target = l.loc.patches.front();
  SearchContext ctx(l.gen.corrupt, l.index, barred_anchors(l.loc));
  const auto cands = enumerate_candidates(target, ctx, {});
  std::vector<AffinityRecord> scored;
  select_best(target, cands, ctx, 0, &scored);
  const auto repeat = std::find_if(scored.begin(), scored.end(), [](const auto& r) {
    return std::abs(r.placement.du - 10.0) < 1e-9 && r.placement.dv == 0.0;
  });
  REQUIRE(repeat != scored.end());
  for (const auto& r : scored) {
    CHECK(r.score >= -1.0);
    CHECK(r.score <= 1.0);
    const double phase = std::remainder(r.placement.du, 10.0);
    if (std::abs(phase) > 1e-6) CHECK(r.score < repeat->score);
  }
}

TEST_CASE("tie-break order") {
  CHECK(better(record(0.9, 5, 0), record(0.9, -10, 0)));
  CHECK_FALSE(better(record(0.9, -10, 0), record(0.9, 5, 0)));
  CHECK(better(record(0.9 + 1e-3, -10, 0), record(0.9, 5, 0)));
  CHECK(better(record(0.9, 5, 0), record(0.9 + 1e-12, 5, 2.5)));
  CHECK(better(record(0.9, 5, 2.5, {1, 0, 0}), record(0.9, -5, -2.5, {2, 0, 0})));
  CHECK_FALSE(better(record(0.9, 5, 0), record(0.9, 5, 0)));
}

TEST_CASE("single candidate is returned; none scoreable is an error") {
  const Scene s = straight_road();
  const auto index = build_index(s, 2.5);
  const Patch target = single_voxel_patch(index, {12, 2, 0});
  SearchContext ctx(s, index, {});
  SearchConfig cfg;
  cfg.span_u = 2.5;
  cfg.span_v = 0;
  auto cands = enumerate_candidates(target, ctx, cfg);
  REQUIRE(cands.size() == 2);
  cands.pop_back();
  CHECK(select_best(target, cands, ctx).placement.source_voxels == cands[0].source_voxels);
  try {
    select_best(target, {}, ctx);
    FAIL("expected no-candidate");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoCandidate);
  }
}

TEST_CASE("scaling every feature leaves the choice unchanged") {
  auto l = locate_road(4);
  const Patch& target = l.loc.patches.front();
  const auto barred = barred_anchors(l.loc);
  SearchContext ctx(l.gen.corrupt, l.index, barred);
  const auto best = select_best(target, enumerate_candidates(target, ctx, {}), ctx);

  Scene scaled = l.gen.corrupt;
  for (auto& p : scaled.primitives)
    for (auto& f : p.feature) f *= 3.5;
  SearchContext ctx2(scaled, l.index, barred);
  const auto best2 = select_best(target, enumerate_candidates(target, ctx2, {}), ctx2);
  CHECK(best2.placement.source_voxels == best.placement.source_voxels);
  CHECK(best2.score == doctest::Approx(best.score).epsilon(1e-9));
}

TEST_CASE("full-span select_best agrees with the exhaustive oracle") {
  for (std::uint64_t seed : {1u, 5u, 6u}) {
    const auto l = locate_road(seed);
    for (std::size_t t = 0; t < l.loc.patches.size(); ++t) {
      const Patch& target = l.loc.patches[t];
      SearchContext ctx(l.gen.corrupt, l.index, barred_anchors(l.loc));
      SearchConfig full;
      full.span_u = 1000;
      full.span_v = 50;
      const auto cands = enumerate_candidates(target, ctx, full);
      for (const auto& c : cands) {
        for (const auto& k : c.source_voxels)
          CHECK_FALSE(std::binary_search(target.voxels.begin(), target.voxels.end(), k));
        // Source centres land within half a voxel of target centres.
        for (std::size_t i = 0; i < target.voxels.size(); ++i) {
          const Vec3 d = c.map.apply(l.index.center(c.source_voxels[i])) - l.index.center(target.voxels[i]);
          CHECK(d.cwiseAbs().maxCoeff() <= l.index.size / 2 + 1e-9);
        }
      }
      const auto a = select_best(target, cands, ctx);
      const auto b = exhaustive_oracle(target, ctx);
      CHECK(a.placement.source_voxels == b.placement.source_voxels);
      CHECK(a.score == doctest::Approx(b.score).epsilon(1e-9));
    }
  }
}
