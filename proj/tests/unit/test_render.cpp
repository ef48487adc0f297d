#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fuzz.hpp"
#include "gspw/error.hpp"
#include "gspw/render.hpp"

using namespace gspw;
using gspw::testing::fuzz_camera;
using gspw::testing::fuzz_scene;

namespace {

// Homogeneous projection through the full 3x4 matrix K [R | t].
Vec2 homogeneous_projection(const Vec3& x, const Camera& c) {
  Eigen::Matrix<double, 3, 4> rt;
  rt.leftCols<3>() = c.rotation.matrix();
  rt.col(3) = c.translation;
  Mat3 k;
  k << c.fx, 0, c.cx, 0, c.fy, c.cy, 0, 0, 1;
  const Eigen::Vector3d h = k * rt * x.homogeneous();
  return h.hnormalized();
}

double loss_of(const RenderOutput& out, const Image& r_rgb, const Image& r_feat) {
  double l = 0.0;
  for (std::size_t i = 0; i < r_rgb.data.size(); ++i) l += r_rgb.data[i] * out.rgb.data[i];
  for (std::size_t i = 0; i < r_feat.data.size(); ++i) l += r_feat.data[i] * out.feature.data[i];
  return l;
}

Image random_image(std::mt19937_64& rng, int w, int h, int c) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Image img(w, h, c);
  for (auto& v : img.data) v = u(rng);
  return img;
}

bool close_rel(double analytic, double numeric, double tol, double floor) {
  return std::abs(analytic - numeric) <= tol * std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace

TEST_CASE("on-axis point projects to the principal point") {
  Camera c;
  c.width = 64;
  c.height = 48;
  c.fx = c.fy = 50;
  c.cx = 32;
  c.cy = 24;
  const auto p = project_point({0, 0, 2}, c);
  CHECK(p.visible);
  CHECK(p.depth == 2.0);
  CHECK(p.pixel.x() == 32.0);
  CHECK(p.pixel.y() == 24.0);
  CHECK_FALSE(project_point({0, 0, -1}, c).visible);
  CHECK_FALSE(project_point({0, 0, 0.04}, c).visible);
}

TEST_CASE("projection agrees with a homogeneous matrix oracle") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Vec3 eye(5 * u(rng), 5 * u(rng), 1 + 3 * std::abs(u(rng)));
    const Camera c = Camera::look_at(i, 80, 60, 40 + 30 * std::abs(u(rng)), eye, {u(rng), u(rng), 0});
    const Vec3 x(u(rng), u(rng), u(rng));
    const auto p = project_point(x, c);
    if (p.depth <= kNearPlane) continue;
    const Vec2 ref = homogeneous_projection(x, c);
    CHECK((p.pixel - ref).norm() < 1e-5);
  }
}

TEST_CASE("single opaque splat reproduces its colour at the centre") {
  Scene s;
  Primitive p;
  p.position = {0, 0, 0};
  p.scale = {0.2, 0.2, 0.2};
  p.opacity = 1.0;
  p.color = {0.2, 0.6, 0.9};
  s.primitives.push_back(p);
  Camera c;
  c.width = c.height = 33;
  c.fx = c.fy = 40;
  c.cx = c.cy = 16;
  c.translation = {0, 0, 3};
  const auto out = render(s, c);
  CHECK(out.alpha.at(16, 16) > 0.99);
  for (int ch = 0; ch < 3; ++ch) CHECK(std::abs(out.rgb.at(16, 16, ch) - p.color[ch]) < 1.0 / 255);
  CHECK(out.depth.at(16, 16) == doctest::Approx(3.0));
  CHECK(out.alpha.at(0, 0) == 0.0);
  CHECK(out.depth.at(0, 0) == 0.0);
}

TEST_CASE("front splat outweighs an identical one behind it") {
  Scene s;
  Primitive a;
  a.id = 1;
  a.position = {0, 0, 1};
  a.scale = {0.05, 0.05, 0.05};
  a.opacity = 0.6;
  Primitive b = a;
  b.id = 0;
  b.position = {0, 0, 2};
  b.scale = {0.1, 0.1, 0.1};  // same projected footprint as a
  s.primitives = {b, a};
  Camera c;
  c.width = c.height = 21;
  c.fx = c.fy = 40;
  c.cx = c.cy = 10;
  const auto out = render(s, c, {.channels = kAllChannels, .keep_weights = true});
  const auto& w = out.weights;
  const std::size_t pix = 10 * 21 + 10;
  REQUIRE(w.offsets[pix + 1] - w.offsets[pix] == 2);
  CHECK(w.prim[w.offsets[pix]] == 1);  // storage index of the front splat
  CHECK(w.weight[w.offsets[pix]] > w.weight[w.offsets[pix] + 1]);
}

TEST_CASE("tiled renderer matches the per-pixel reference loop") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Scene s = fuzz_scene(seed, 10);
    const auto tiled = render(s, s.cameras[0]);
    const auto ref = render_reference(s.primitives, s.feature_dim, s.cameras[0]);
    double worst = 0.0;
    for (std::size_t i = 0; i < ref.rgb.data.size(); ++i)
      worst = std::max(worst, std::abs(tiled.rgb.data[i] - ref.rgb.data[i]));
    for (std::size_t i = 0; i < ref.feature.data.size(); ++i)
      worst = std::max(worst, std::abs(tiled.feature.data[i] - ref.feature.data[i]));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("alpha stays within [0,1] and equals the sum of weights") {
  for (std::uint64_t seed = 20; seed < 40; ++seed) {
    Scene s = fuzz_scene(seed, 40);
    if (seed % 3 == 0)
      for (auto& p : s.primitives) p.opacity = 1.0;
    const auto out = render(s, s.cameras[0], {.channels = kAllChannels, .keep_weights = true});
    const auto& w = out.weights;
    for (std::size_t p = 0; p + 1 < w.offsets.size(); ++p) {
      double sum = 0.0;
      for (auto o = w.offsets[p]; o < w.offsets[p + 1]; ++o) {
        CHECK(w.weight[o] >= 0.0);
        sum += w.weight[o];
      }
      CHECK(out.alpha.data[p] >= 0.0);
      CHECK(out.alpha.data[p] <= 1.0);
      CHECK(std::abs(out.alpha.data[p] - sum) < 1e-12);
    }
  }
}

TEST_CASE("storage order does not change the image") {
  std::mt19937_64 rng(3);
  for (std::uint64_t seed = 50; seed < 55; ++seed) {
    Scene s = fuzz_scene(seed, 30);
    const auto a = render(s, s.cameras[0]);
    std::shuffle(s.primitives.begin(), s.primitives.end(), rng);
    const auto b = render(s, s.cameras[0]);
    for (std::size_t i = 0; i < a.rgb.data.size(); ++i)
      CHECK(std::abs(a.rgb.data[i] - b.rgb.data[i]) <= 1e-9);
  }
}

TEST_CASE("feature channel composites with the rgb weights") {
  Scene s = fuzz_scene(77, 25);
  for (auto& p : s.primitives) p.feature[0] = p.color[0];
  const auto out = render(s, s.cameras[0]);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) CHECK(std::abs(out.feature.at(x, y, 0) - out.rgb.at(x, y, 0)) <= 1e-9);
}

TEST_CASE("region-of-interest rendering matches the full frame inside the rectangle") {
  const Scene s = fuzz_scene(8, 30);
  const auto full = render(s, s.cameras[0]);
  const PixelRect roi{5, 9, 40, 33};
  const auto part = render(s, s.cameras[0], {.channels = kAllChannels, .roi = roi});
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const bool in = x >= roi.x0 && x < roi.x1 && y >= roi.y0 && y < roi.y1;
      CHECK(part.alpha.at(x, y) == (in ? full.alpha.at(x, y) : 0.0));
    }
}

TEST_CASE("gradients of a zero residual vanish") {
  const Scene s = fuzz_scene(9, 5);
  const auto fwd = render(s, s.cameras[0], {.channels = kAllChannels, .keep_weights = true});
  const Image zero(64, 64, 3);
  const auto g = render_gradients(s, s.cameras[0], fwd, zero, GradChannel::Rgb, true);
  for (std::size_t k = 0; k < s.primitives.size(); ++k) {
    CHECK(g.color[k].norm() == 0.0);
    CHECK(g.opacity[k] == 0.0);
  }
}

TEST_CASE("colour gradient under a unit residual is the summed weight") {
  Scene s;
  Primitive p;
  p.scale = {0.3, 0.3, 0.3};
  p.opacity = 0.7;
  s.primitives.push_back(p);
  Camera c;
  c.width = c.height = 32;
  c.fx = c.fy = 30;
  c.cx = c.cy = 16;
  c.translation = {0, 0, 3};
  const auto fwd = render(s, c, {.channels = kAllChannels, .keep_weights = true});
  const Image ones(32, 32, 3, 1.0);
  const auto g = render_gradients(s, c, fwd, ones, GradChannel::Rgb, false);
  double sum = 0.0;
  for (double w : fwd.weights.weight) sum += w;
  for (int ch = 0; ch < 3; ++ch) CHECK(g.color[0][ch] == doctest::Approx(sum).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(1234);
  const double h = 1e-4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Scene s = fuzz_scene(300 + seed, 5);
    const Camera cam = s.cameras[0];
    const Image r_rgb = random_image(rng, 64, 64, 3);
    const Image r_feat = random_image(rng, 64, 64, s.feature_dim);
    const auto fwd = render(s, cam, {.channels = kAllChannels, .keep_weights = true});
    Residuals res;
    res.rgb = &r_rgb;
    res.feature = &r_feat;
    const auto g = render_gradients(s.primitives, s.feature_dim, cam, fwd, res, true);
    for (std::size_t k = 0; k < s.primitives.size(); ++k) {
      auto probe = [&](auto&& set) {
        Scene plus = s, minus = s;
        set(plus.primitives[k], +h);
        set(minus.primitives[k], -h);
        return (loss_of(render(plus, cam), r_rgb, r_feat) -
                loss_of(render(minus, cam), r_rgb, r_feat)) / (2 * h);
      };
      for (int ch = 0; ch < 3; ++ch) {
        const double fd = probe([ch](Primitive& p, double d) { p.color[ch] += d; });
        CHECK(close_rel(g.color[k][ch], fd, 1e-4, 1e-6));
      }
      for (int d = 0; d < s.feature_dim; ++d) {
        const double fd = probe([d](Primitive& p, double e) { p.feature[d] += e; });
        CHECK(close_rel(g.feature[k * s.feature_dim + d], fd, 1e-4, 1e-6));
      }
      const double fd = probe([](Primitive& p, double d) { p.opacity += d; });
      CHECK(close_rel(g.opacity[k], fd, 1e-3, 1e-5));
    }
  }
}

TEST_CASE("depth and alpha opacity gradients match central differences") {
  std::mt19937_64 rng(99);
  const double h = 1e-5;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Scene s = fuzz_scene(600 + seed, 6);
    const Camera cam = s.cameras[0];
    const Image r_depth = random_image(rng, 64, 64, 1);
    const Image r_alpha = random_image(rng, 64, 64, 1);
    auto loss = [&](const Scene& sc) {
      const auto o = render(sc, cam);
      double l = 0.0;
      for (std::size_t i = 0; i < o.depth.data.size(); ++i)
        l += r_depth.data[i] * o.depth.data[i] + r_alpha.data[i] * o.alpha.data[i];
      return l;
    };
    const auto fwd = render(s, cam, {.channels = kAllChannels, .keep_weights = true});
    Residuals res;
    res.depth = &r_depth;
    res.alpha = &r_alpha;
    const auto g = render_gradients(s.primitives, s.feature_dim, cam, fwd, res, true);
    for (std::size_t k = 0; k < s.primitives.size(); ++k) {
      Scene plus = s, minus = s;
      plus.primitives[k].opacity += h;
      minus.primitives[k].opacity -= h;
      const double fd = (loss(plus) - loss(minus)) / (2 * h);
      CHECK(close_rel(g.opacity[k], fd, 1e-3, 1e-4));
    }
  }
}

TEST_CASE("backward pass rejects weights from a different scene") {
  Scene s = fuzz_scene(10, 5);
  const auto fwd = render(s, s.cameras[0], {.channels = kAllChannels, .keep_weights = true});
  s.primitives[0].opacity *= 0.5;
  const Image zero(64, 64, 3);
  CHECK_THROWS_AS(render_gradients(s, s.cameras[0], fwd, zero, GradChannel::Rgb, true), Error);
}

TEST_CASE("an empty scene renders black") {
  Scene s;
  const auto out = render(s, fuzz_camera());
  CHECK(std::all_of(out.rgb.data.begin(), out.rgb.data.end(), [](double v) { return v == 0.0; }));
  CHECK(std::all_of(out.alpha.data.begin(), out.alpha.data.end(), [](double v) { return v == 0.0; }));
}
