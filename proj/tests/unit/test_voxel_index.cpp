#include <doctest.h>

#include <random>
#include <set>

#include "gspw/error.hpp"
#include "gspw/voxel_index.hpp"

using namespace gspw;

namespace {

Scene line_scene(int n, double spacing) {
  Scene s;
  for (int i = 0; i < n; ++i) {
    Primitive p;
    p.id = i;
    p.position = {i * spacing, 0.0, 0.0};
    s.primitives.push_back(p);
  }
  return s;
}

Scene random_scene(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  Scene s;
  for (int i = 0; i < n; ++i) {
    Primitive p;
    p.id = 5 * i + 1;
    p.position = {u(rng), u(rng), 0.1 * u(rng)};
    s.primitives.push_back(p);
  }
  return s;
}

}  // namespace

TEST_CASE("ten metre line at half metre spacing fills five 2.5 m voxels") {
  const auto idx = build_index(line_scene(21, 0.5), 2.5);  // x = 0, 0.5, ..., 10
  CHECK(idx.voxel_to_anchors.size() == 5);
  for (const auto& key : idx.occupied_keys()) {
    CHECK(key.j == 0);
    CHECK(key.k == 0);
  }
}

TEST_CASE("single anchor at the origin lands in voxel (0,0,0)") {
  const auto idx = build_index(line_scene(1, 1.0), 2.5);
  REQUIRE(idx.voxel_to_anchors.size() == 1);
  CHECK(idx.occupied_keys()[0] == VoxelKey{0, 0, 0});
}

TEST_CASE("cells are half-open") {
  VoxelIndex idx;
  idx.origin = {1.0, -2.0, 0.5};
  idx.size = 2.5;
  CHECK(voxel_of(idx.origin, idx) == VoxelKey{0, 0, 0});
  CHECK(voxel_of(idx.origin + Vec3(2.5 - 1e-9, 0, 0), idx) == VoxelKey{0, 0, 0});
  CHECK(voxel_of(idx.origin + Vec3(2.5, 0, 0), idx) == VoxelKey{1, 0, 0});
  CHECK(voxel_of(idx.origin - Vec3(1e-9, 0, 0), idx) == VoxelKey{-1, 0, 0});

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int n = 0; n < 100; ++n) {
    const Vec3 p(u(rng), u(rng), u(rng));
    const VoxelKey k = voxel_of(p, idx);
    CHECK(k.i == static_cast<int>(std::floor((p.x() - 1.0) / 2.5)));
    CHECK(k.j == static_cast<int>(std::floor((p.y() + 2.0) / 2.5)));
    CHECK(k.k == static_cast<int>(std::floor((p.z() - 0.5) / 2.5)));
  }
}

TEST_CASE("every anchor round-trips through the index") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scene s = random_scene(seed, 1000);
    const auto idx = build_index(s, 1.7);
    std::size_t total = 0;
    for (const auto& [key, ids] : idx.voxel_to_anchors) {
      total += ids.size();
      CHECK(std::is_sorted(ids.begin(), ids.end()));
    }
    CHECK(total == s.primitives.size());
    for (const auto& p : s.primitives) {
      const VoxelKey key = idx.anchor_to_voxel.at(p.id);
      CHECK(key == voxel_of(p.position, idx));
      const auto* ids = idx.anchors_in(key);
      REQUIRE(ids != nullptr);
      CHECK(std::binary_search(ids->begin(), ids->end(), p.id));
    }
  }
}

TEST_CASE("index rebuild is deterministic") {
  const Scene s = random_scene(9, 500);
  const auto a = build_index(s, 2.5);
  const auto b = build_index(s, 2.5);
  CHECK(a.occupied_keys() == b.occupied_keys());
  for (const auto& key : a.occupied_keys()) CHECK(*a.anchors_in(key) == *b.anchors_in(key));
}

TEST_CASE("default origin snaps the bounding box minimum to the grid") {
  Scene s = line_scene(3, 1.0);
  s.primitives[0].position = {-3.2, 4.1, -0.1};
  const Vec3 o = default_origin(s, 2.5);
  CHECK(o.x() == -5.0);
  CHECK(o.y() == 0.0);
  CHECK(o.z() == -2.5);
}

TEST_CASE("non-finite positions are rejected by id") {
  Scene s = line_scene(3, 1.0);
  s.primitives[1].position.x() = std::nan("");
  try {
    build_index(s, 2.5, Vec3::Zero());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Validation);
    CHECK(std::string(e.what()).find("primitive 1") != std::string::npos);
  }
}

TEST_CASE("patch extraction equals a linear scan") {
  CHECK(extract_patch(build_index(line_scene(5, 1.0), 2.5), {}).anchor_ids.empty());

  Scene three = line_scene(3, 0.1);
  const auto one = extract_patch(build_index(three, 2.5), {{0, 0, 0}});
  CHECK(one.anchor_ids == std::vector<std::int64_t>{0, 1, 2});

  std::mt19937_64 rng(17);
  const Scene s = random_scene(21, 800);
  const auto idx = build_index(s, 3.0);
  const auto keys = idx.occupied_keys();
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<VoxelKey> subset;
    for (const auto& k : keys)
      if (rng() % 4 == 0) subset.push_back(k);
    subset.push_back({1000, 1000, 1000});  // unoccupied keys contribute nothing
    const Patch patch = extract_patch(idx, subset);
    const std::set<VoxelKey> chosen(subset.begin(), subset.end());
    std::vector<std::int64_t> expected;
    for (const auto& p : s.primitives)
      if (chosen.count(voxel_of(p.position, idx))) expected.push_back(p.id);
    std::sort(expected.begin(), expected.end());
    CHECK(patch.anchor_ids == expected);
  }
}
