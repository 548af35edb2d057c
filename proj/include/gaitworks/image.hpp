#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gaitworks {

/// Row-major single-channel image.
template <typename T>
struct Plane {
  int width = 0;
  int height = 0;
  std::vector<T> pixels;

  Plane() = default;
  Plane(int w, int h, T fill = T{}) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("image dimensions must be positive");
  }

  T& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  T at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool empty() const { return pixels.empty(); }
  std::size_t area() const { return pixels.size(); }

  friend bool operator==(const Plane&, const Plane&) = default;
};

/// Strictly binary mask; foreground = 1.
using BinaryMask = Plane<std::uint8_t>;
using GrayImage = Plane<float>;

struct ColorFrame {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // 3 * width * height
  int timestamp_index = 0;

  ColorFrame() = default;
  ColorFrame(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("frame dimensions must be positive");
  }
  std::uint8_t* pixel(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* pixel(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  bool empty() const { return rgb.empty(); }
};

struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive
  bool empty() const { return x1 < x0 || y1 < y0; }
  int width() const { return x1 - x0 + 1; }
  int height() const { return y1 - y0 + 1; }
};

std::size_t count_foreground(const BinaryMask& mask);
BoundingBox bounding_box(const BinaryMask& mask);

GrayImage to_gray(const BinaryMask& mask);
/// Threshold at 0.5 (values >= 0.5 become foreground).
BinaryMask binarize(const GrayImage& image, float threshold = 0.5f);

/// Bilinear resize with pixel-center alignment.
GrayImage resize_bilinear(const GrayImage& src, int width, int height);
GrayImage resize_nearest(const GrayImage& src, int width, int height);

/// Intersection-over-union of two equally sized masks (1.0 when both are empty).
double iou(const BinaryMask& a, const BinaryMask& b);

}  // namespace gaitworks
