#include "gspw/train.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>

#include "gspw/error.hpp"
#include "gspw/render.hpp"

namespace gspw {

namespace {

constexpr int kRadius = 5;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, 2 * kRadius + 1>& gauss() {
  static const auto g = [] {
    std::array<double, 2 * kRadius + 1> w{};
    for (int i = -kRadius; i <= kRadius; ++i) w[i + kRadius] = std::exp(-0.5 * i * i / (kSigma * kSigma));
    return w;
  }();
  return g;
}

using Plane = std::vector<double>;

/// Sum of in-range window weights around each position of a 1-D axis.
std::vector<double> border_norm(int n) {
  std::vector<double> z(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = -kRadius; k <= kRadius; ++k)
      if (i + k >= 0 && i + k < n) z[i] += gauss()[k + kRadius];
  return z;
}

/// Separable window filter. Forward: normalised weighted mean. Transposed:
/// the adjoint of the forward filter.
struct Window {
  int w, h;
  std::vector<double> zx, zy;

  Window(int width, int height) : w(width), h(height), zx(border_norm(width)), zy(border_norm(height)) {}

  Plane mean(const Plane& v) const {
    Plane t(v.size()), out(v.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int k = -kRadius; k <= kRadius; ++k)
          if (x + k >= 0 && x + k < w) s += gauss()[k + kRadius] * v[static_cast<std::size_t>(y) * w + x + k];
        t[static_cast<std::size_t>(y) * w + x] = s / zx[x];
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int k = -kRadius; k <= kRadius; ++k)
          if (y + k >= 0 && y + k < h) s += gauss()[k + kRadius] * t[static_cast<std::size_t>(y + k) * w + x];
        out[static_cast<std::size_t>(y) * w + x] = s / zy[y];
      }
    return out;
  }

  Plane adjoint(const Plane& v) const {
    Plane t(v.size()), out(v.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int k = -kRadius; k <= kRadius; ++k)
          if (y + k >= 0 && y + k < h)
            s += gauss()[k + kRadius] * v[static_cast<std::size_t>(y + k) * w + x] / zy[y + k];
        t[static_cast<std::size_t>(y) * w + x] = s;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int k = -kRadius; k <= kRadius; ++k)
          if (x + k >= 0 && x + k < w)
            s += gauss()[k + kRadius] * t[static_cast<std::size_t>(y) * w + x + k] / zx[x + k];
        out[static_cast<std::size_t>(y) * w + x] = s;
      }
    return out;
  }
};

Plane channel(const Image& img, int c) {
  Plane p(img.pixel_count());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = img.data[i * img.channels + c];
  return p;
}

Plane product(const Plane& a, const Plane& b) {
  Plane p(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) p[i] = a[i] * b[i];
  return p;
}

const Mask* mask_for(std::span<const FrameMask> masks, int frame) {
  for (const auto& m : masks)
    if (m.frame_index == frame) return &m.bitmap;
  return nullptr;
}

/// Masked L1 between a downsampled render and a feature map; optionally adds
/// `scale * sign / (count * D * k^2)` to the full-resolution residual.
double feature_term(const Image& rendered, const Image& map, const Mask* mask, double scale,
                    Image* residual) {
  const int D = map.channels;
  if (rendered.channels != D)
    throw Error(ErrorCode::DimensionMismatch,
                fmt::format("feature map has {} channels but the scene has {}", D, rendered.channels));
  if (map.width <= 0 || rendered.width % map.width != 0 || rendered.height % map.height != 0 ||
      rendered.width / map.width != rendered.height / map.height)
    throw Error(ErrorCode::DimensionMismatch,
                fmt::format("feature map {}x{} does not divide the image {}x{}", map.width, map.height,
                            rendered.width, rendered.height));
  const int k = rendered.width / map.width;
  const Image down = downsample_area(rendered, k);

  auto usable = [&](int X, int Y) {
    if (mask == nullptr) return true;
    for (int dy = 0; dy < k; ++dy)
      for (int dx = 0; dx < k; ++dx)
        if (mask->get(X * k + dx, Y * k + dy)) return false;
    return true;
  };
  std::vector<std::uint8_t> use(static_cast<std::size_t>(map.width) * map.height);
  std::size_t count = 0;
  for (int Y = 0; Y < map.height; ++Y)
    for (int X = 0; X < map.width; ++X)
      count += use[static_cast<std::size_t>(Y) * map.width + X] = usable(X, Y);
  if (count == 0) return 0.0;

  double sum = 0.0;
  const double g = scale / (static_cast<double>(count) * D * k * k);
  for (int Y = 0; Y < map.height; ++Y)
    for (int X = 0; X < map.width; ++X) {
      if (!use[static_cast<std::size_t>(Y) * map.width + X]) continue;
      for (int d = 0; d < D; ++d) {
        const double diff = down.at(X, Y, d) - map.at(X, Y, d);
        sum += std::abs(diff);
        if (residual == nullptr || diff == 0.0) continue;
        const double r = diff > 0 ? g : -g;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) residual->at(X * k + dx, Y * k + dy, d) += r;
      }
    }
  return sum / (static_cast<double>(count) * D);
}

struct Adam {
  std::vector<double> m, v;
  int t = 0;
  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  /// Returns the update to subtract for parameter i with rate lr.
  void step(std::vector<double>& x, const std::vector<double>& g, const std::vector<double>& lr) {
    ++t;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      x[i] -= lr[i] * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

double decayed(const TrainConfig& cfg, double base, int it) {
  if (cfg.iters <= 1) return base;
  return base * std::pow(cfg.final_step_ratio, static_cast<double>(it) / (cfg.iters - 1));
}

const Camera& camera_of(const Scene& scene, int frame) {
  const Camera* cam = scene.camera_for_frame(frame);
  if (cam == nullptr)
    throw Error(ErrorCode::Validation, fmt::format("no camera for frame {}", frame));
  return *cam;
}

}  // namespace

double ssim(const Image& a, const Image& b) { return ssim(a, b, nullptr, nullptr); }

double ssim(const Image& a, const Image& b, const Mask* use, Image* grad_a) {
  if (!a.same_shape(b) || a.empty())
    throw Error(ErrorCode::DimensionMismatch, "ssim needs two non-empty images of the same shape");
  if (use != nullptr && (use->width != a.width || use->height != a.height))
    throw Error(ErrorCode::DimensionMismatch, "ssim mask size differs from the images");
  const Window win(a.width, a.height);
  const std::size_t n = a.pixel_count();
  std::size_t count = n;
  if (use != nullptr) count = use->count();
  if (grad_a != nullptr) *grad_a = Image(a.width, a.height, a.channels);
  if (count == 0) return 1.0;

  double total = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    const Plane pa = channel(a, c), pb = channel(b, c);
    const Plane ma = win.mean(pa), mb = win.mean(pb);
    const Plane eaa = win.mean(product(pa, pa)), ebb = win.mean(product(pb, pb)),
                eab = win.mean(product(pa, pb));
    Plane dmu(n, 0.0), dvar(n, 0.0), dcov(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (use != nullptr && !use->bits[i]) continue;
      const double va = eaa[i] - ma[i] * ma[i], vb = ebb[i] - mb[i] * mb[i];
      const double cov = eab[i] - ma[i] * mb[i];
      const double n1 = 2 * ma[i] * mb[i] + kC1, n2 = 2 * cov + kC2;
      const double d1 = ma[i] * ma[i] + mb[i] * mb[i] + kC1, d2 = va + vb + kC2;
      const double s = (n1 * n2) / (d1 * d2);
      total += s;
      if (grad_a == nullptr) continue;
      dmu[i] = 2 * mb[i] * n2 / (d1 * d2) - s * 2 * ma[i] / d1;
      dvar[i] = -s / d2;
      dcov[i] = 2 * n1 / (d1 * d2);
    }
    if (grad_a == nullptr) continue;
    // dS/da_j = sum_i w_ij [dmu - 2 dvar mu_a - dcov mu_b] + a_j sum_i w_ij 2 dvar + b_j sum_i w_ij dcov
    Plane k0(n), k1(n), k2(n);
    for (std::size_t i = 0; i < n; ++i) {
      k0[i] = dmu[i] - 2 * dvar[i] * ma[i] - dcov[i] * mb[i];
      k1[i] = 2 * dvar[i];
      k2[i] = dcov[i];
    }
    const Plane t0 = win.adjoint(k0), t1 = win.adjoint(k1), t2 = win.adjoint(k2);
    const double norm = 1.0 / (static_cast<double>(count) * a.channels);
    for (std::size_t j = 0; j < n; ++j)
      grad_a->data[j * a.channels + c] = (t0[j] + pa[j] * t1[j] + pb[j] * t2[j]) * norm;
  }
  return total / (static_cast<double>(count) * a.channels);
}

void TrainConfig::validate() const {
  if (lambda_ssim < 0 || lambda_depth < 0 || lambda_feat < 0)
    throw Error(ErrorCode::Config, "loss weights must be non-negative");
  if (lambda_ssim > 1) throw Error(ErrorCode::Config, "lambda_ssim must not exceed 1");
  if (!(prune_opacity >= 0 && prune_opacity < 1))
    throw Error(ErrorCode::Config, fmt::format("prune_opacity must lie in [0, 1), got {}", prune_opacity));
  if (iters < 0 || !(step > 0) || !(feature_step > 0) || !(final_step_ratio > 0 && final_step_ratio <= 1))
    throw Error(ErrorCode::Config, "iters >= 0, positive steps and a decay ratio in (0, 1] are required");
}

double feature_loss(const Scene& scene, std::span<const FeatureMap> maps,
                    std::span<const FrameMask> masks, std::vector<double>* grad) {
  const std::size_t D = static_cast<std::size_t>(scene.feature_dim);
  if (grad != nullptr) grad->assign(scene.primitives.size() * D, 0.0);
  if (maps.empty()) return 0.0;
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(maps.size());
  for (const auto& fm : maps) {
    const Camera& cam = camera_of(scene, fm.frame_index);
    RenderOptions opts;
    opts.channels = kFeature;
    opts.keep_weights = grad != nullptr;
    const RenderOutput r = render(scene, cam, opts);
    Image residual;
    if (grad != nullptr) residual = Image(cam.width, cam.height, scene.feature_dim);
    total += feature_term(r.feature, fm.data, mask_for(masks, fm.frame_index), scale,
                          grad != nullptr ? &residual : nullptr);
    if (grad == nullptr) continue;
    Residuals res;
    res.feature = &residual;
    const auto g = render_gradients(scene.primitives, scene.feature_dim, cam, r, res, false);
    for (std::size_t i = 0; i < g.feature.size(); ++i) (*grad)[i] += g.feature[i];
  }
  return total * scale;
}

TrainResult fit_embeddings(const Scene& scene, std::span<const FeatureMap> maps,
                           std::span<const FrameMask> masks, const TrainConfig& cfg) {
  cfg.validate();
  for (const auto& fm : maps)
    if (fm.data.channels != scene.feature_dim)
      throw Error(ErrorCode::DimensionMismatch,
                  fmt::format("feature map for frame {} has {} channels, scene has {}", fm.frame_index,
                              fm.data.channels, scene.feature_dim));
  TrainResult res;
  res.scene = scene;
  const std::size_t D = static_cast<std::size_t>(scene.feature_dim);
  std::vector<double> x(scene.primitives.size() * D);
  for (std::size_t i = 0; i < scene.primitives.size(); ++i)
    std::copy(scene.primitives[i].feature.begin(), scene.primitives[i].feature.end(), x.begin() + i * D);
  auto store = [&] {
    for (std::size_t i = 0; i < res.scene.primitives.size(); ++i)
      std::copy(x.begin() + i * D, x.begin() + (i + 1) * D, res.scene.primitives[i].feature.begin());
  };

  Adam adam(x.size());
  std::vector<double> grad, lr(x.size());
  for (int it = 0; it < cfg.iters; ++it) {
    res.trace.push_back(feature_loss(res.scene, maps, masks, &grad));
    std::fill(lr.begin(), lr.end(), decayed(cfg, cfg.feature_step, it));
    adam.step(x, grad, lr);
    store();
  }
  res.trace.push_back(feature_loss(res.scene, maps, masks));
  return res;
}

TrainResult simplified_train(const Scene& scene, std::span<const Image> gt_images,
                             std::span<const Image> gt_depths, std::span<const FeatureMap> maps,
                             std::span<const FrameMask> masks, const TrainConfig& cfg) {
  cfg.validate();
  if (gt_images.empty())
    throw Error(ErrorCode::Validation, "simplified_train needs ground-truth images");
  if (gt_images.size() != scene.cameras.size())
    throw Error(ErrorCode::DimensionMismatch,
                fmt::format("{} images for {} cameras", gt_images.size(), scene.cameras.size()));
  if (!gt_depths.empty() && gt_depths.size() != gt_images.size())
    throw Error(ErrorCode::DimensionMismatch, "depth images must match the colour images");
  for (std::size_t f = 0; f < gt_images.size(); ++f)
    if (gt_images[f].width != scene.cameras[f].width || gt_images[f].height != scene.cameras[f].height ||
        gt_images[f].channels != 3)
      throw Error(ErrorCode::DimensionMismatch, fmt::format("image {} does not match its camera", f));

  TrainResult res;
  res.scene = scene;
  const std::size_t n = scene.primitives.size();
  const std::size_t D = static_cast<std::size_t>(scene.feature_dim);
  const std::size_t stride = 4 + D;  // r, g, b, opacity, features
  std::vector<double> x(n * stride), lr(n * stride);
  for (std::size_t i = 0; i < n; ++i) {
    const Primitive& p = scene.primitives[i];
    for (int c = 0; c < 3; ++c) x[i * stride + c] = p.color[c];
    x[i * stride + 3] = p.opacity;
    std::copy(p.feature.begin(), p.feature.end(), x.begin() + i * stride + 4);
  }
  auto store = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      Primitive& p = res.scene.primitives[i];
      for (int c = 0; c < 3; ++c) p.color[c] = x[i * stride + c];
      p.opacity = x[i * stride + 3];
      std::copy(x.begin() + i * stride + 4, x.begin() + (i + 1) * stride, p.feature.begin());
    }
  };

  const double N = static_cast<double>(gt_images.size());
  const bool use_feat = cfg.lambda_feat > 0 && !maps.empty();
  auto evaluate = [&](std::vector<double>* grad) {
    if (grad != nullptr) grad->assign(n * stride, 0.0);
    double total = 0.0;
    for (std::size_t f = 0; f < gt_images.size(); ++f) {
      const Camera& cam = res.scene.cameras[f];
      const Image& gt = gt_images[f];
      const Mask* mask = mask_for(masks, cam.frame_index);
      const FeatureMap* fmap = nullptr;
      if (use_feat)
        for (const auto& m : maps)
          if (m.frame_index == cam.frame_index) fmap = &m;

      RenderOptions opts;
      opts.channels = kRgb | kAlpha | kDepth | (fmap != nullptr ? kFeature : 0u);
      opts.keep_weights = grad != nullptr;
      const RenderOutput r = render(res.scene, cam, opts);

      Mask use(cam.width, cam.height, true);
      if (mask != nullptr)
        for (std::size_t p = 0; p < use.bits.size(); ++p) use.bits[p] = !mask->bits[p];
      const std::size_t count = use.count();
      if (count == 0) continue;

      Image rgb_res(cam.width, cam.height, 3), depth_res, feat_res;
      // Photometric L1; masked GT is never read.
      double l1 = 0.0;
      const double g1 = (1.0 - cfg.lambda_ssim) / (3.0 * count * N);
      Image gt_clean = r.rgb;
      for (std::size_t p = 0; p < use.bits.size(); ++p) {
        if (!use.bits[p]) continue;
        for (int c = 0; c < 3; ++c) {
          const double d = r.rgb.data[p * 3 + c] - gt.data[p * 3 + c];
          gt_clean.data[p * 3 + c] = gt.data[p * 3 + c];
          l1 += std::abs(d);
          rgb_res.data[p * 3 + c] = d > 0 ? g1 : d < 0 ? -g1 : 0.0;
        }
      }
      double loss = (1.0 - cfg.lambda_ssim) * l1 / (3.0 * count);

      if (cfg.lambda_ssim > 0) {
        Image g;
        const double s = ssim(r.rgb, gt_clean, &use, grad != nullptr ? &g : nullptr);
        loss += cfg.lambda_ssim * (1.0 - s);
        if (grad != nullptr)
          for (std::size_t i = 0; i < g.data.size(); ++i)
            if (use.bits[i / 3]) rgb_res.data[i] -= cfg.lambda_ssim * g.data[i] / N;
      }

      if (cfg.lambda_depth > 0 && !gt_depths.empty()) {
        const Image& gd = gt_depths[f];
        std::size_t dn = 0;
        double dl = 0.0;
        for (std::size_t p = 0; p < use.bits.size(); ++p)
          if (use.bits[p] && gd.data[p] > 0) ++dn;
        if (dn > 0) {
          depth_res = Image(cam.width, cam.height, 1);
          const double gdp = cfg.lambda_depth / (static_cast<double>(dn) * N);
          for (std::size_t p = 0; p < use.bits.size(); ++p) {
            if (!use.bits[p] || !(gd.data[p] > 0)) continue;
            const double d = r.depth.data[p] - gd.data[p];
            dl += std::abs(d);
            depth_res.data[p] = d > 0 ? gdp : d < 0 ? -gdp : 0.0;
          }
          loss += cfg.lambda_depth * dl / static_cast<double>(dn);
        }
      }

      if (fmap != nullptr) {
        if (grad != nullptr) feat_res = Image(cam.width, cam.height, scene.feature_dim);
        loss += cfg.lambda_feat * feature_term(r.feature, fmap->data, mask, cfg.lambda_feat / N,
                                               grad != nullptr ? &feat_res : nullptr);
      }
      total += loss / N;

      if (grad == nullptr) continue;
      Residuals rs;
      rs.rgb = &rgb_res;
      if (!depth_res.empty()) rs.depth = &depth_res;
      if (!feat_res.empty()) rs.feature = &feat_res;
      const auto g = render_gradients(res.scene.primitives, scene.feature_dim, cam, r, rs, true);
      for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) (*grad)[i * stride + c] += g.color[i][c];
        (*grad)[i * stride + 3] += g.opacity[i];
        if (!g.feature.empty())
          for (std::size_t d = 0; d < D; ++d) (*grad)[i * stride + 4 + d] += g.feature[i * D + d];
      }
    }
    return total;
  };

  Adam adam(x.size());
  std::vector<double> grad;
  for (int it = 0; it < cfg.iters; ++it) {
    res.trace.push_back(evaluate(&grad));
    const double a = decayed(cfg, cfg.step, it), b = decayed(cfg, cfg.feature_step, it);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < stride; ++k) lr[i * stride + k] = k < 4 ? a : b;
    adam.step(x, grad, lr);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < 4; ++k) x[i * stride + k] = std::clamp(x[i * stride + k], 0.0, 1.0);
    store();
  }
  if (cfg.iters == 0) return res;
  res.trace.push_back(evaluate(nullptr));

  const std::size_t before = res.scene.primitives.size();
  std::erase_if(res.scene.primitives, [&](const Primitive& p) { return p.opacity < cfg.prune_opacity; });
  res.pruned = before - res.scene.primitives.size();
  return res;
}

}  // namespace gspw
