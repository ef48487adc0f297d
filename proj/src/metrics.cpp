#include "gspw/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "gspw/error.hpp"
#include "gspw/train.hpp"

namespace gspw {

namespace {

nlohmann::json number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return nullptr;
  return v;
}

double db(double se, std::size_t n) {
  if (se == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(static_cast<double>(n) / se);
}

}  // namespace

double psnr(const Image& a, const Image& b, const Mask* mask) {
  if (!a.same_shape(b)) throw Error(ErrorCode::DimensionMismatch, "psnr needs images of the same shape");
  if (mask != nullptr && (mask->width != a.width || mask->height != a.height))
    throw Error(ErrorCode::DimensionMismatch, "psnr mask size differs from the images");
  double se = 0.0;
  std::size_t n = 0;
  const std::size_t ch = static_cast<std::size_t>(a.channels);
  for (std::size_t p = 0; p < a.pixel_count(); ++p) {
    if (mask != nullptr && !mask->bits[p]) continue;
    for (std::size_t c = 0; c < ch; ++c) {
      const double d = a.data[p * ch + c] - b.data[p * ch + c];
      se += d * d;
    }
    n += ch;
  }
  if (n == 0) return std::nan("");
  return db(se, n);
}

EvalReport evaluate_inpainting(std::span<const FrameImage> renders, std::span<const FrameImage> gt,
                               std::span<const FrameMask> regions) {
  std::map<int, const Image*> by_render, by_gt;
  std::map<int, const Mask*> by_region;
  for (const auto& r : renders) by_render[r.frame_index] = &r.image;
  for (const auto& g : gt) by_gt[g.frame_index] = &g.image;
  for (const auto& m : regions) by_region[m.frame_index] = &m.bitmap;

  EvalReport rep;
  for (const auto& [f, img] : by_render)
    if (!by_gt.contains(f)) rep.missing_frames.push_back(f);
  for (const auto& [f, img] : by_gt)
    if (!by_render.contains(f)) rep.missing_frames.push_back(f);
  std::sort(rep.missing_frames.begin(), rep.missing_frames.end());

  double se = 0.0, ssim_weighted = 0.0;
  std::size_t samples = 0;
  for (const auto& [f, gimg] : by_gt) {
    const auto it = by_render.find(f);
    if (it == by_render.end()) continue;
    const Image& rimg = *it->second;
    if (!rimg.same_shape(*gimg))
      throw Error(ErrorCode::DimensionMismatch, fmt::format("frame {}: render and GT differ in shape", f));
    FrameEval fe;
    fe.frame_index = f;
    fe.psnr = psnr(rimg, *gimg);
    fe.ssim = ssim(rimg, *gimg);
    if (const auto m = by_region.find(f); m != by_region.end()) {
      const Mask& mask = *m->second;
      if (mask.width != rimg.width || mask.height != rimg.height)
        throw Error(ErrorCode::DimensionMismatch, fmt::format("frame {}: region size differs", f));
      fe.region_pixels = mask.count();
      fe.region_sufficient = fe.region_pixels >= kMinRegionPixels;
      if (fe.region_sufficient) {
        fe.region_psnr = psnr(rimg, *gimg, &mask);
        fe.region_ssim = ssim(rimg, *gimg, &mask, nullptr);
      }
      if (fe.region_pixels > 0) {
        const std::size_t ch = static_cast<std::size_t>(rimg.channels);
        for (std::size_t p = 0; p < mask.bits.size(); ++p) {
          if (!mask.bits[p]) continue;
          for (std::size_t c = 0; c < ch; ++c) {
            const double d = rimg.data[p * ch + c] - gimg->data[p * ch + c];
            se += d * d;
          }
          samples += ch;
        }
        ssim_weighted += static_cast<double>(fe.region_pixels) * ssim(rimg, *gimg, &mask, nullptr);
      }
    }
    rep.psnr += fe.psnr;
    rep.ssim += fe.ssim;
    rep.region_pixels += fe.region_pixels;
    rep.frames.push_back(fe);
  }
  if (!rep.frames.empty()) {
    rep.psnr /= static_cast<double>(rep.frames.size());
    rep.ssim /= static_cast<double>(rep.frames.size());
  }
  rep.region_sufficient = rep.region_pixels >= kMinRegionPixels;
  if (rep.region_sufficient) {
    rep.region_psnr = db(se, samples);
    rep.region_ssim = ssim_weighted / static_cast<double>(rep.region_pixels);
  }
  return rep;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["psnr"] = number(psnr);
  j["ssim"] = ssim;
  j["region_pixels"] = region_pixels;
  j["region_sufficient"] = region_sufficient;
  if (region_sufficient) {
    j["region_psnr"] = number(region_psnr);
    j["region_ssim"] = region_ssim;
  }
  j["missing_frames"] = missing_frames;
  auto& arr = j["frames"] = nlohmann::json::array();
  for (const auto& f : frames) {
    nlohmann::json e{{"frame", f.frame_index},
                     {"psnr", number(f.psnr)},
                     {"ssim", f.ssim},
                     {"region_pixels", f.region_pixels},
                     {"region_sufficient", f.region_sufficient}};
    if (f.region_sufficient) {
      e["region_psnr"] = number(f.region_psnr);
      e["region_ssim"] = f.region_ssim;
    }
    arr.push_back(std::move(e));
  }
  return j;
}

}  // namespace gspw
