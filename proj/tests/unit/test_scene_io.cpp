#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "gspw/error.hpp"
#include "gspw/io.hpp"
#include "gspw/scene.hpp"

using namespace gspw;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "gspw_test_scene_io";
  fs::create_directories(p);
  return p;
}

Scene one_primitive_scene(int dim = 4) {
  Scene s;
  s.feature_dim = dim;
  Primitive p;
  p.id = 3;
  p.position = {1.0, 2.0, 0.5};
  p.scale = {0.25, 0.5, 0.125};
  p.rotation = Quat::about_z(0.5);
  p.opacity = 0.75;
  p.color = {0.1, 0.2, 0.3};
  p.feature.assign(dim, 0.5);
  s.primitives.push_back(p);
  s.cameras.push_back(Camera::look_at(0, 64, 48, 50.0, {0, -3, 2}, {0, 0, 0}));
  s.trajectory = {{0, 0, 0}, {1, 0, 0}};
  quantize_to_f32(s);
  return s;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("smallest scene file loads with one primitive and round-trips") {
  const auto path = temp_dir() / "one.gsp";
  const Scene s = one_primitive_scene();
  save_scene(s, path);
  const Scene back = load_scene(path);
  CHECK(back.primitives.size() == 1);
  CHECK(back == s);
  save_scene(back, temp_dir() / "one_again.gsp");
  CHECK(slurp(path) == slurp(temp_dir() / "one_again.gsp"));
}

TEST_CASE("header fields record counts and feature dimension") {
  Scene empty;
  empty.feature_dim = 16;
  const auto bytes = encode_scene(empty);
  REQUIRE(bytes.size() > 24);
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 16, 8);
  const auto meta = nlohmann::json::parse(std::string(bytes.data() + 24, len));
  CHECK(meta["primitive_count"] == 0);
  CHECK(meta["feature_dim"] == 16);
  CHECK(decode_scene(bytes) == empty);
}

TEST_CASE("random scenes survive save and load field for field") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    Scene s;
    s.feature_dim = 1 + trial % 5;
    for (int i = 0; i < 50; ++i) {
      Primitive p;
      p.id = i * 7 + trial;
      p.position = {u(rng) * 10 - 5, u(rng) * 10 - 5, u(rng)};
      p.scale = {0.01 + u(rng), 0.01 + u(rng), 0.01 + u(rng)};
      p.rotation = Quat{u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5}.normalized();
      p.opacity = u(rng);
      p.color = {u(rng), u(rng), u(rng)};
      for (int d = 0; d < s.feature_dim; ++d) p.feature.push_back(u(rng) * 2 - 1);
      s.primitives.push_back(p);
    }
    quantize_to_f32(s);
    // Quantising a unit quaternion can move its norm by ~1e-7, still inside tolerance.
    CHECK(validate_scene(s).empty());
    const Scene back = decode_scene(encode_scene(s));
    CHECK(back == s);
    CHECK(encode_scene(back) == encode_scene(s));
  }
}

TEST_CASE("malformed files report format errors with offsets") {
  auto bytes = encode_scene(one_primitive_scene());
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    try {
      decode_scene(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Format);
      CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    }
  }
  SUBCASE("wrong version") {
    bytes[8] = 9;
    try {
      decode_scene(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UnsupportedVersion);
    }
  }
  SUBCASE("truncated table") {
    bytes.resize(bytes.size() - 3);
    try {
      decode_scene(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Format);
      CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
  }
  SUBCASE("NaN payload") {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(bytes.data() + bytes.size() - 4, &nan, 4);
    try {
      decode_scene(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Validation);
    }
  }
}

TEST_CASE("validation flags individual invariant breaches") {
  Scene s = one_primitive_scene();
  CHECK(validate_scene(s).empty());

  Scene a = s;
  a.primitives[0].opacity = 1.2;
  auto v = validate_scene(a);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == "opacity_range");

  Scene b = s;
  b.primitives[0].rotation = {2, 0, 0, 0};
  v = validate_scene(b);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == "quaternion_norm");

  Scene c = s;
  c.primitives.push_back(c.primitives[0]);
  v = validate_scene(c);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == "duplicate_id");

  Scene d = s;
  d.primitives[0].feature.pop_back();
  CHECK(validate_scene(d).size() == 1);

  Scene e = s;
  e.cameras.push_back(e.cameras[0]);
  v = validate_scene(e);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == "camera_order");
}

TEST_CASE("mask, image and feature map files round-trip") {
  const auto dir = temp_dir();
  Mask m(7, 5);
  m.set(1, 1);
  m.set(6, 4);
  save_mask_pgm(m, dir / frame_file("mask", 3, "pgm"));
  const auto masks = load_mask_dir(dir);
  REQUIRE(masks.size() == 1);
  CHECK(masks[0].frame_index == 3);
  CHECK(masks[0].bitmap.bits == m.bits);

  Image rgb(4, 3, 3);
  for (std::size_t i = 0; i < rgb.data.size(); ++i) rgb.data[i] = (i * 17 % 256) / 255.0;
  save_ppm(rgb, dir / "img.ppm");
  const Image back = load_ppm(dir / "img.ppm");
  for (std::size_t i = 0; i < rgb.data.size(); ++i) CHECK(back.data[i] == doctest::Approx(rgb.data[i]));

  Image fm(5, 2, 3);
  for (std::size_t i = 0; i < fm.data.size(); ++i) fm.data[i] = static_cast<float>(0.1 * i - 1);
  save_fmap(fm, dir / "f.fmap");
  const Image fb = load_fmap(dir / "f.fmap");
  CHECK(fb.width == 5);
  CHECK(fb.height == 2);
  CHECK(fb.channels == 3);
  CHECK(fb.data == fm.data);

  Image depth(3, 2, 1);
  depth.data = {0.0, 1.5, 2.25, 10.0, 0.001, 3.0};
  save_pgm16(depth, 1000.0, dir / "d.pgm");
  const Image db = load_pgm16(dir / "d.pgm", 1000.0);
  for (std::size_t i = 0; i < depth.data.size(); ++i)
    CHECK(db.data[i] == doctest::Approx(depth.data[i]).epsilon(1e-3));
}
