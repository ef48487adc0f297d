#include "gspw/image.hpp"

#include <algorithm>
#include <stdexcept>

namespace gspw {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(),
                                                [](std::uint8_t b) { return b != 0; }));
}

bool Mask::any() const {
  return std::any_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; });
}

PixelRect bounding_rect(const Mask& m) {
  PixelRect r{m.width, m.height, 0, 0};
  bool found = false;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.get(x, y)) {
        r.x0 = std::min(r.x0, x);
        r.y0 = std::min(r.y0, y);
        r.x1 = std::max(r.x1, x + 1);
        r.y1 = std::max(r.y1, y + 1);
        found = true;
      }
  return found ? r : PixelRect{};
}

// Pixels outside the image count as unset for dilation and set for erosion,
// so the image border never creates or removes mask pixels on its own.
Mask dilate3x3(const Mask& m) {
  Mask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      bool v = false;
      for (int dy = -1; dy <= 1 && !v; ++dy)
        for (int dx = -1; dx <= 1 && !v; ++dx)
          if (m.inside(x + dx, y + dy) && m.get(x + dx, y + dy)) v = true;
      out.set(x, y, v);
    }
  return out;
}

Mask erode3x3(const Mask& m) {
  Mask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      bool v = true;
      for (int dy = -1; dy <= 1 && v; ++dy)
        for (int dx = -1; dx <= 1 && v; ++dx)
          if (m.inside(x + dx, y + dy) && !m.get(x + dx, y + dy)) v = false;
      out.set(x, y, v);
    }
  return out;
}

namespace {
void check_same(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("mask dimensions differ");
}
}  // namespace

Mask mask_or(const Mask& a, const Mask& b) {
  check_same(a, b);
  Mask out(a.width, a.height);
  for (std::size_t i = 0; i < a.bits.size(); ++i) out.bits[i] = (a.bits[i] || b.bits[i]) ? 1 : 0;
  return out;
}

Mask mask_and(const Mask& a, const Mask& b) {
  check_same(a, b);
  Mask out(a.width, a.height);
  for (std::size_t i = 0; i < a.bits.size(); ++i) out.bits[i] = (a.bits[i] && b.bits[i]) ? 1 : 0;
  return out;
}

Image downsample_area(const Image& img, int factor) {
  if (factor == 1) return img;
  Image out(img.width / factor, img.height / factor, img.channels);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double sum = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) sum += img.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = sum * inv;
      }
  return out;
}

}  // namespace gspw
