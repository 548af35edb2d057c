#include "gaitworks/image.hpp"

#include <algorithm>
#include <cmath>

namespace gaitworks {

std::size_t count_foreground(const BinaryMask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.pixels.begin(), mask.pixels.end(), [](auto v) { return v != 0; }));
}

BoundingBox bounding_box(const BinaryMask& mask) {
  BoundingBox box{mask.width, mask.height, -1, -1};
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x);
        box.y1 = std::max(box.y1, y);
      }
  return box;
}

GrayImage to_gray(const BinaryMask& mask) {
  GrayImage g(mask.width, mask.height);
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) g.pixels[i] = mask.pixels[i] ? 1.0f : 0.0f;
  return g;
}

BinaryMask binarize(const GrayImage& image, float threshold) {
  BinaryMask m(image.width, image.height);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) m.pixels[i] = image.pixels[i] >= threshold ? 1 : 0;
  return m;
}

GrayImage resize_bilinear(const GrayImage& src, int width, int height) {
  GrayImage dst(width, height);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      const double top = src.at(x0, y0) * (1.0 - wx) + src.at(x1, y0) * wx;
      const double bottom = src.at(x0, y1) * (1.0 - wx) + src.at(x1, y1) * wx;
      dst.at(x, y) = static_cast<float>(top * (1.0 - wy) + bottom * wy);
    }
  }
  return dst;
}

GrayImage resize_nearest(const GrayImage& src, int width, int height) {
  GrayImage dst(width, height);
  for (int y = 0; y < height; ++y) {
    const int syi = std::min(static_cast<int>((y + 0.5) * src.height / height), src.height - 1);
    for (int x = 0; x < width; ++x) {
      const int sxi = std::min(static_cast<int>((x + 0.5) * src.width / width), src.width - 1);
      dst.at(x, y) = src.at(sxi, syi);
    }
  }
  return dst;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const bool pa = a.pixels[i] != 0, pb = b.pixels[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace gaitworks
